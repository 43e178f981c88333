use crate::{NnError, Result, Tensor2};

/// Mean squared error over every element; returns `(loss, dloss/dpred)`.
pub fn mse(pred: &Tensor2, target: &Tensor2) -> Result<(f64, Tensor2)> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch {
            op: "mse",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    let n = pred.data().len().max(1) as f64;
    let diff = pred.sub(target)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(NnError::NonFinite { op: "mse" });
    }
    Ok((loss, diff.scale(2.0 / n)))
}
