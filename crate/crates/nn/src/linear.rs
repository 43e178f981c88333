use rand::Rng;

use crate::{Activation, NnError, Param, Parameterized, Result, Tensor2};

/// Fully connected layer `y = x·W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::uniform(format!("{name}.w"), input, output, input, rng),
            bias: Param::uniform(format!("{name}.b"), 1, output, input, rng),
        }
    }

    pub fn from_values(name: &str, weight: Tensor2, bias: Tensor2) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(NnError::ShapeMismatch {
                op: "linear",
                left: weight.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self {
            weight: Param::new(format!("{name}.w"), weight),
            bias: Param::new(format!("{name}.b"), bias),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut y = x.matmul(&self.weight.value)?;
        let b = self.bias.value.data();
        for r in 0..y.rows() {
            for (a, bb) in y.row_mut(r).iter_mut().zip(b) {
                *a += bb;
            }
        }
        y.check_finite("linear")?;
        Ok(y)
    }

    /// Accumulates `dW = xᵀ·g`, `db = Σ_rows g` and returns `g·Wᵀ`.
    pub fn backward(&mut self, x: &Tensor2, grad_out: &Tensor2) -> Result<Tensor2> {
        if grad_out.rows() != x.rows() || grad_out.cols() != self.output_dim() {
            return Err(NnError::ShapeMismatch {
                op: "linear_backward",
                left: (x.rows(), self.output_dim()),
                right: grad_out.shape(),
            });
        }
        self.weight.grad.add_assign(&x.t_matmul(grad_out)?)?;
        self.bias.grad.add_assign(&grad_out.sum_rows())?;
        let gx = grad_out.matmul_t(&self.weight.value)?;
        gx.check_finite("linear_backward")?;
        Ok(gx)
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of [`Linear`] layers; `hidden` activation between layers and
/// `output` activation after the last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input to each layer, followed by the final output.
    acts: Vec<Tensor2>,
}

impl MlpCache {
    pub fn output(&self) -> &Tensor2 {
        self.acts.last().expect("non-empty")
    }
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    fn act(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = self.act(i).apply(&layer.forward(&h)?);
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Tensor2) -> Result<MlpCache> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let y = self.act(i).apply(&layer.forward(acts.last().expect("non-empty"))?);
            acts.push(y);
        }
        Ok(MlpCache { acts })
    }

    pub fn backward(&mut self, cache: &MlpCache, grad_out: &Tensor2) -> Result<Tensor2> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let act = self.act(i);
            g = act.backward(&cache.acts[i + 1], &g);
            g = self.layers[i].backward(&cache.acts[i], &g)?;
        }
        Ok(g)
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
