//! Transformer-style encoder: multi-head scaled dot-product self-attention,
//! position-wise feed-forward, residual connections and post-layer
//! normalization.
//!
//! Batches are stacked row-wise: a batch of `B` sequences of length `L`
//! with width `d` is a `(B·L) × d` tensor.

use rand::Rng;

use crate::{Linear, NnError, Param, Parameterized, Result, Tensor2};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor2,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor2::filled(1, width, 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor2::zeros(1, width)),
        }
    }

    pub fn forward(&self, x: &Tensor2) -> Result<(Tensor2, LayerNormCache)> {
        let d = x.cols();
        if d != self.gamma.value.cols() {
            return Err(NnError::ShapeMismatch {
                op: "layer_norm",
                left: self.gamma.value.shape(),
                right: x.shape(),
            });
        }
        let mut xhat = Tensor2::zeros(x.rows(), d);
        let mut out = Tensor2::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for j in 0..d {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(r);
            for j in 0..d {
                o[j] = g[j] * xhat.get(r, j) + b[j];
            }
        }
        out.check_finite("layer_norm")?;
        Ok((out, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache, grad: &Tensor2) -> Result<Tensor2> {
        let d = grad.cols();
        let n = d as f64;
        let mut gx = Tensor2::zeros(grad.rows(), d);
        let gamma = self.gamma.value.data().to_vec();
        let gg = self.gamma.grad.data_mut();
        for r in 0..grad.rows() {
            let g = grad.row(r);
            let xh = cache.xhat.row(r);
            for j in 0..d {
                gg[j] += g[j] * xh[j];
            }
        }
        let gb = self.beta.grad.data_mut();
        for r in 0..grad.rows() {
            for (acc, v) in gb.iter_mut().zip(grad.row(r)) {
                *acc += v;
            }
        }
        for r in 0..grad.rows() {
            let g = grad.row(r);
            let xh = cache.xhat.row(r);
            let dxhat: Vec<f64> = (0..d).map(|j| g[j] * gamma[j]).collect();
            let sum_d: f64 = dxhat.iter().sum();
            let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
            let is = cache.inv_std[r];
            let out = gx.row_mut(r);
            for j in 0..d {
                out[j] = is / n * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
            }
        }
        Ok(gx)
    }
}

impl Parameterized for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    heads: usize,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttentionCache {
    x: Tensor2,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    /// Row-stochastic attention matrices, stacked `(B·H·L) × L`.
    attn: Tensor2,
    concat: Tensor2,
    seq_len: usize,
}

impl MultiHeadAttentionCache {
    pub fn attention(&self) -> &Tensor2 {
        &self.attn
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(NnError::Config(format!(
                "model width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(&format!("{name}.q"), width, width, rng),
            wk: Linear::new(&format!("{name}.k"), width, width, rng),
            wv: Linear::new(&format!("{name}.v"), width, width, rng),
            wo: Linear::new(&format!("{name}.o"), width, width, rng),
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor2, seq_len: usize) -> Result<(Tensor2, MultiHeadAttentionCache)> {
        let width = self.wq.input_dim();
        if x.cols() != width || seq_len == 0 || x.rows() % seq_len != 0 {
            return Err(NnError::ShapeMismatch {
                op: "attention",
                left: (seq_len, width),
                right: x.shape(),
            });
        }
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let batch = x.rows() / seq_len;
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Tensor2::zeros(batch * self.heads * seq_len, seq_len);
        let mut concat = Tensor2::zeros(x.rows(), width);
        {
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            let ad = attn.data_mut();
            let cd = concat.data_mut();
            for b in 0..batch {
                let base = b * seq_len;
                for h in 0..self.heads {
                    let off = h * dh;
                    for i in 0..seq_len {
                        let qi = &qd[(base + i) * width + off..][..dh];
                        let arow = &mut ad[((b * self.heads + h) * seq_len + i) * seq_len..][..seq_len];
                        let mut max = f64::NEG_INFINITY;
                        for (j, s) in arow.iter_mut().enumerate() {
                            let kj = &kd[(base + j) * width + off..][..dh];
                            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                            max = max.max(*s);
                        }
                        let mut z = 0.0;
                        for s in arow.iter_mut() {
                            *s = (*s - max).exp();
                            z += *s;
                        }
                        let inv = 1.0 / z;
                        for s in arow.iter_mut() {
                            *s *= inv;
                        }
                        let out = &mut cd[(base + i) * width + off..][..dh];
                        for (j, &a) in arow.iter().enumerate() {
                            let vj = &vd[(base + j) * width + off..][..dh];
                            for (o, vv) in out.iter_mut().zip(vj) {
                                *o += a * vv;
                            }
                        }
                    }
                }
            }
        }
        let out = self.wo.forward(&concat)?;
        Ok((
            out,
            MultiHeadAttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                attn,
                concat,
                seq_len,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MultiHeadAttentionCache, grad: &Tensor2) -> Result<Tensor2> {
        let width = self.wq.input_dim();
        let seq_len = cache.seq_len;
        let batch = cache.x.rows() / seq_len;
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let d_concat = self.wo.backward(&cache.concat, grad)?;
        let mut dq = Tensor2::zeros(cache.x.rows(), width);
        let mut dk = Tensor2::zeros(cache.x.rows(), width);
        let mut dv = Tensor2::zeros(cache.x.rows(), width);
        let mut d_a = vec![0.0; seq_len];
        {
            let (qd, kd, vd) = (cache.q.data(), cache.k.data(), cache.v.data());
            let gd = d_concat.data();
            let (dqd, dkd, dvd) = (dq.data_mut(), dk.data_mut(), dv.data_mut());
            for b in 0..batch {
                let base = b * seq_len;
                for h in 0..self.heads {
                    let off = h * dh;
                    let arow0 = (b * self.heads + h) * seq_len;
                    for i in 0..seq_len {
                        let d_oi = &gd[(base + i) * width + off..][..dh];
                        let a_row = cache.attn.row(arow0 + i);
                        // dA_ij = dO_i · V_j ; dV_j += A_ij dO_i
                        for j in 0..seq_len {
                            let vj = &vd[(base + j) * width + off..][..dh];
                            d_a[j] = d_oi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            let dvj = &mut dvd[(base + j) * width + off..][..dh];
                            for (acc, g) in dvj.iter_mut().zip(d_oi) {
                                *acc += a_row[j] * g;
                            }
                        }
                        let dot: f64 = a_row.iter().zip(&d_a).map(|(a, g)| a * g).sum();
                        let qi = &qd[(base + i) * width + off..][..dh];
                        for j in 0..seq_len {
                            let ds = a_row[j] * (d_a[j] - dot) * scale;
                            // dQ_i += dS_ij K_j ; dK_j += dS_ij Q_i
                            let kj = &kd[(base + j) * width + off..][..dh];
                            let dqi = &mut dqd[(base + i) * width + off..][..dh];
                            for (acc, kv) in dqi.iter_mut().zip(kj) {
                                *acc += ds * kv;
                            }
                            let dkj = &mut dkd[(base + j) * width + off..][..dh];
                            for (acc, qv) in dkj.iter_mut().zip(qi) {
                                *acc += ds * qv;
                            }
                        }
                    }
                }
            }
        }
        let mut gx = self.wq.backward(&cache.x, &dq)?;
        gx.add_assign(&self.wk.backward(&cache.x, &dk)?)?;
        gx.add_assign(&self.wv.backward(&cache.x, &dv)?)?;
        gx.check_finite("attention_backward")?;
        Ok(gx)
    }
}

impl Parameterized for MultiHeadAttention {
    fn params(&self) -> Vec<&Param> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

/// `x → LN(x + MHA(x)) → LN(h + FFN(h))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct EncoderBlockCache {
    attn: MultiHeadAttentionCache,
    ln1: LayerNormCache,
    h1: Tensor2,
    f1: Tensor2,
    ln2: LayerNormCache,
}

impl EncoderBlockCache {
    pub fn attention(&self) -> &Tensor2 {
        self.attn.attention()
    }
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        width: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&format!("{name}.attn"), width, heads, rng)?,
            ln1: LayerNorm::new(&format!("{name}.ln1"), width),
            ff1: Linear::new(&format!("{name}.ff1"), width, ff, rng),
            ff2: Linear::new(&format!("{name}.ff2"), ff, width, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), width),
        })
    }

    pub fn forward(&self, x: &Tensor2, seq_len: usize) -> Result<(Tensor2, EncoderBlockCache)> {
        let (a, attn) = self.attn.forward(x, seq_len)?;
        let (h1, ln1) = self.ln1.forward(&x.add(&a)?)?;
        let f1 = self.ff1.forward(&h1)?.map(|v| v.max(0.0));
        let f2 = self.ff2.forward(&f1)?;
        let (out, ln2) = self.ln2.forward(&h1.add(&f2)?)?;
        Ok((
            out,
            EncoderBlockCache {
                attn,
                ln1,
                h1,
                f1,
                ln2,
            },
        ))
    }

    pub fn backward(&mut self, cache: &EncoderBlockCache, grad: &Tensor2) -> Result<Tensor2> {
        let g_r2 = self.ln2.backward(&cache.ln2, grad)?;
        let g_f1 = self.ff2.backward(&cache.f1, &g_r2)?;
        let g_f1 = crate::Activation::Relu.backward(&cache.f1, &g_f1);
        let mut g_h1 = self.ff1.backward(&cache.h1, &g_f1)?;
        g_h1.add_assign(&g_r2)?;
        let g_r1 = self.ln1.backward(&cache.ln1, &g_h1)?;
        let mut gx = self.attn.backward(&cache.attn, &g_r1)?;
        gx.add_assign(&g_r1)?;
        Ok(gx)
    }
}

impl Parameterized for EncoderBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.attn.params();
        v.extend(self.ln1.params());
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v.extend(self.ln2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.attn.params_mut();
        v.extend(self.ln1.params_mut());
        v.extend(self.ff1.params_mut());
        v.extend(self.ff2.params_mut());
        v.extend(self.ln2.params_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhsaConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub seq_len: usize,
    pub positional: bool,
}

impl MhsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(NnError::Config(format!(
                "model width {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.seq_len == 0 || self.input_dim == 0 || self.layers == 0 {
            return Err(NnError::Config("empty encoder dimension".into()));
        }
        Ok(())
    }
}

/// Fixed sinusoidal encoding, `seq_len × width`.
pub fn positional_encoding(seq_len: usize, width: usize) -> Tensor2 {
    let mut pe = Tensor2::zeros(seq_len, width);
    for pos in 0..seq_len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

#[derive(Clone, Debug)]
pub struct MhsaEncoder {
    pub input: Linear,
    pub blocks: Vec<EncoderBlock>,
    config: MhsaConfig,
    pe: Tensor2,
}

#[derive(Clone, Debug)]
pub struct MhsaEncoderCache {
    x: Tensor2,
    blocks: Vec<EncoderBlockCache>,
}

impl MhsaEncoderCache {
    pub fn block(&self, i: usize) -> &EncoderBlockCache {
        &self.blocks[i]
    }

    /// Which feed-forward units are active, block by block. Finite
    /// differences are only meaningful where this pattern does not change.
    pub fn relu_mask(&self) -> Vec<bool> {
        self.blocks.iter().flat_map(|b| b.f1.data().iter().map(|&v| v > 0.0)).collect()
    }
}

impl MhsaEncoder {
    pub fn new<R: Rng + ?Sized>(name: &str, config: MhsaConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let input = Linear::new(&format!("{name}.in"), config.input_dim, config.model_dim, rng);
        let blocks = (0..config.layers)
            .map(|i| {
                EncoderBlock::new(
                    &format!("{name}.block{i}"),
                    config.model_dim,
                    config.heads,
                    config.ff_dim,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let pe = if config.positional {
            positional_encoding(config.seq_len, config.model_dim)
        } else {
            Tensor2::zeros(config.seq_len, config.model_dim)
        };
        Ok(Self {
            input,
            blocks,
            config,
            pe,
        })
    }

    pub fn config(&self) -> &MhsaConfig {
        &self.config
    }

    /// `(B·L) × input_dim → (B·L) × model_dim`.
    pub fn forward(&self, x: &Tensor2) -> Result<(Tensor2, MhsaEncoderCache)> {
        let l = self.config.seq_len;
        if x.cols() != self.config.input_dim || x.rows() % l != 0 {
            return Err(NnError::ShapeMismatch {
                op: "mhsa_encode",
                left: (l, self.config.input_dim),
                right: x.shape(),
            });
        }
        let mut h = self.input.forward(x)?;
        if self.config.positional {
            for r in 0..h.rows() {
                let p = self.pe.row(r % l).to_vec();
                for (a, b) in h.row_mut(r).iter_mut().zip(p) {
                    *a += b;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, c) = block.forward(&h, l)?;
            caches.push(c);
            h = out;
        }
        Ok((
            h,
            MhsaEncoderCache {
                x: x.clone(),
                blocks: caches,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MhsaEncoderCache, grad: &Tensor2) -> Result<Tensor2> {
        let mut g = grad.clone();
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(c, &g)?;
        }
        self.input.backward(&cache.x, &g)
    }
}

impl Parameterized for MhsaEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.input.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.input.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(positional: bool) -> MhsaConfig {
        MhsaConfig {
            input_dim: 6,
            model_dim: 8,
            heads: 4,
            ff_dim: 16,
            layers: 3,
            seq_len: 20,
            positional,
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn width_must_divide_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = config(true);
        cfg.model_dim = 10;
        assert!(matches!(MhsaEncoder::new("e", cfg, &mut rng), Err(NnError::Config(_))));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = MhsaEncoder::new("e", config(true), &mut rng).unwrap();
        let x = random(2 * 20, 6, &mut rng);
        let (_, cache) = enc.forward(&x).unwrap();
        for b in 0..3 {
            let a = cache.block(b).attention();
            assert_eq!(a.rows(), 2 * 4 * 20);
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = MhsaEncoder::new("e", config(false), &mut rng).unwrap();
        let x = random(20, 6, &mut rng);
        let mut swapped = x.clone();
        let (r3, r11) = (x.row(3).to_vec(), x.row(11).to_vec());
        swapped.row_mut(3).copy_from_slice(&r11);
        swapped.row_mut(11).copy_from_slice(&r3);
        let (y, _) = enc.forward(&x).unwrap();
        let (ys, _) = enc.forward(&swapped).unwrap();
        for r in 0..20 {
            let src = match r {
                3 => 11,
                11 => 3,
                r => r,
            };
            for c in 0..8 {
                assert!((ys.get(r, c) - y.get(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_padded_window_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut enc = MhsaEncoder::new("e", config(true), &mut rng).unwrap();
        let x = Tensor2::zeros(20, 6);
        let (y, cache) = enc.forward(&x).unwrap();
        assert!(y.is_finite());
        let g = enc.backward(&cache, &Tensor2::filled(20, 8, 1.0)).unwrap();
        assert!(g.is_finite());
        assert!(enc.params().iter().all(|p| p.grad.is_finite()));
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let ln = LayerNorm::new("ln", 5);
        let x = Tensor2::from_rows(&[&[1.0, 2.0, 3.0, 4.0, 10.0]]);
        let (y, _) = ln.forward(&x).unwrap();
        let mean: f64 = y.row(0).iter().sum::<f64>() / 5.0;
        let var: f64 = y.row(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
