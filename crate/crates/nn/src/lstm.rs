//! Single-layer LSTM over a batch of sequences, with full backpropagation
//! through time.
//!
//! Gate columns are laid out `[input | forget | candidate | output]`.

use rand::Rng;

use crate::activation::sigmoid;
use crate::{NnError, Param, Parameterized, Result, Tensor2};

#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_x: Param,
    pub w_h: Param,
    pub bias: Param,
    hidden: usize,
}

#[derive(Clone, Debug)]
struct LstmStep {
    x: Tensor2,
    h_prev: Tensor2,
    c_prev: Tensor2,
    /// Activated gates, `B × 4h`.
    gates: Tensor2,
    tanh_c: Tensor2,
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    steps: Vec<LstmStep>,
}

/// One cell update from already-activated gate values:
/// `c = f·c_prev + i·g`, `h = o·tanh(c)`. Returns `(c, h)`.
#[inline]
pub fn cell_update(input: f64, forget: f64, candidate: f64, output: f64, c_prev: f64) -> (f64, f64) {
    let c = forget * c_prev + input * candidate;
    (c, output * c.tanh())
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_x: Param::uniform(format!("{name}.wx"), input, 4 * hidden, hidden, rng),
            w_h: Param::uniform(format!("{name}.wh"), hidden, 4 * hidden, hidden, rng),
            bias: Param::uniform(format!("{name}.b"), 1, 4 * hidden, hidden, rng),
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.value.rows()
    }

    /// Runs the sequence from zero initial state; returns every hidden state.
    pub fn forward(&self, xs: &[Tensor2]) -> Result<(Vec<Tensor2>, LstmCache)> {
        let batch = xs.first().map_or(0, |x| x.rows());
        let zero = Tensor2::zeros(batch, self.hidden);
        self.forward_from(xs, &zero, &zero)
    }

    pub fn forward_from(
        &self,
        xs: &[Tensor2],
        h0: &Tensor2,
        c0: &Tensor2,
    ) -> Result<(Vec<Tensor2>, LstmCache)> {
        let h = self.hidden;
        let mut h_prev = h0.clone();
        let mut c_prev = c0.clone();
        let mut hs = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            if x.cols() != self.input_dim() || x.rows() != h_prev.rows() {
                return Err(NnError::ShapeMismatch {
                    op: "lstm",
                    left: (h_prev.rows(), self.input_dim()),
                    right: x.shape(),
                });
            }
            let mut gates = x
                .matmul(&self.w_x.value)?
                .add(&h_prev.matmul(&self.w_h.value)?)?
                .add_row(&self.bias.value)?;
            let b = x.rows();
            let mut c = Tensor2::zeros(b, h);
            let mut tanh_c = Tensor2::zeros(b, h);
            let mut h_new = Tensor2::zeros(b, h);
            for r in 0..b {
                let g = gates.row_mut(r);
                for j in 0..h {
                    g[j] = sigmoid(g[j]);
                    g[h + j] = sigmoid(g[h + j]);
                    g[2 * h + j] = g[2 * h + j].tanh();
                    g[3 * h + j] = sigmoid(g[3 * h + j]);
                }
                for j in 0..h {
                    let g = gates.row(r);
                    let (cv, hv) = cell_update(g[j], g[h + j], g[2 * h + j], g[3 * h + j], c_prev.get(r, j));
                    c.set(r, j, cv);
                    tanh_c.set(r, j, cv.tanh());
                    h_new.set(r, j, hv);
                }
            }
            h_new.check_finite("lstm")?;
            steps.push(LstmStep {
                x: x.clone(),
                h_prev: h_prev.clone(),
                c_prev: c_prev.clone(),
                gates,
                tanh_c,
            });
            hs.push(h_new.clone());
            h_prev = h_new;
            c_prev = c;
        }
        Ok((hs, LstmCache { steps }))
    }

    /// BPTT. `grad_hs[t]` is the loss gradient w.r.t. hidden state `t`
    /// (zeros where the state is unused). Returns input gradients per step.
    pub fn backward(&mut self, cache: &LstmCache, grad_hs: &[Tensor2]) -> Result<Vec<Tensor2>> {
        if grad_hs.len() != cache.steps.len() {
            return Err(NnError::ShapeMismatch {
                op: "lstm_backward",
                left: (cache.steps.len(), self.hidden),
                right: (grad_hs.len(), self.hidden),
            });
        }
        let h = self.hidden;
        let Some(first) = cache.steps.first() else {
            return Ok(Vec::new());
        };
        let b = first.x.rows();
        let mut dh_next = Tensor2::zeros(b, h);
        let mut dc_next = Tensor2::zeros(b, h);
        let mut dxs = vec![Tensor2::zeros(0, 0); cache.steps.len()];
        for t in (0..cache.steps.len()).rev() {
            let st = &cache.steps[t];
            let dh = grad_hs[t].add(&dh_next)?;
            let mut dz = Tensor2::zeros(b, 4 * h);
            let mut dc_prev = Tensor2::zeros(b, h);
            for r in 0..b {
                let g = st.gates.row(r);
                for j in 0..h {
                    let (i, f, cand, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let tc = st.tanh_c.get(r, j);
                    let dhv = dh.get(r, j);
                    let d_o = dhv * tc;
                    let dc = dhv * o * (1.0 - tc * tc) + dc_next.get(r, j);
                    let dz_row = dz.row_mut(r);
                    dz_row[j] = dc * cand * i * (1.0 - i);
                    dz_row[h + j] = dc * st.c_prev.get(r, j) * f * (1.0 - f);
                    dz_row[2 * h + j] = dc * i * (1.0 - cand * cand);
                    dz_row[3 * h + j] = d_o * o * (1.0 - o);
                    dc_prev.set(r, j, dc * f);
                }
            }
            self.w_x.grad.add_assign(&st.x.t_matmul(&dz)?)?;
            self.w_h.grad.add_assign(&st.h_prev.t_matmul(&dz)?)?;
            self.bias.grad.add_assign(&dz.sum_rows())?;
            dxs[t] = dz.matmul_t(&self.w_x.value)?;
            dh_next = dz.matmul_t(&self.w_h.value)?;
            dc_next = dc_prev;
        }
        for d in &dxs {
            d.check_finite("lstm_backward")?;
        }
        Ok(dxs)
    }
}

impl Parameterized for Lstm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w_x, &self.w_h, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_x, &mut self.w_h, &mut self.bias]
    }
}
