//! Dense layers with exact hand-written backward passes.
//!
//! Everything operates on [`Tensor2`] (row-major `f64`). Layers own their
//! [`Param`]s; forward passes return a cache that the matching backward pass
//! consumes, accumulating parameter gradients in place and returning the
//! gradient with respect to the layer input.

mod activation;
mod attention;
pub mod checkpoint;
pub mod gradcheck;
mod linear;
mod loss;
mod lstm;
mod optim;
mod tensor;

pub use activation::Activation;
pub use attention::{
    positional_encoding, EncoderBlock, EncoderBlockCache, LayerNorm, LayerNormCache,
    MhsaConfig, MhsaEncoder, MhsaEncoderCache, MultiHeadAttention, MultiHeadAttentionCache,
};
pub use linear::{Linear, Mlp, MlpCache};
pub use loss::mse;
pub use lstm::{cell_update, Lstm, LstmCache};
pub use optim::Adam;
pub use tensor::Tensor2;

use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value produced in {op}")]
    NonFinite { op: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// A named parameter tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor2) -> Self {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Uniform fan-in initialization in `±1/sqrt(fan_in)`.
    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self::new(name, Tensor2::from_vec(rows, cols, data).expect("sized"))
    }
}

/// Access to every parameter of a model in a stable order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.data().len()).sum()
    }

    /// Hard copy of parameter values (not gradients) from a model of the same shape.
    fn copy_values_from(&mut self, other: &dyn Parameterized) -> Result<()> {
        let src = other.params();
        let mut dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(NnError::Config(format!(
                "parameter count differs: {} vs {}",
                dst.len(),
                src.len()
            )));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            if d.value.shape() != s.value.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "copy_values_from",
                    left: d.value.shape(),
                    right: s.value.shape(),
                });
            }
            d.value = s.value.clone();
        }
        Ok(())
    }
}
