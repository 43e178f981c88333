//! Central finite differences for verifying backward passes.

use crate::{Parameterized, Tensor2};

/// `(f(θ+h) − f(θ−h)) / 2h` for every element of every parameter, in
/// `params()` order.
pub fn numeric_param_grads<M, F>(model: &mut M, h: f64, loss: F) -> Vec<Tensor2>
where
    M: Parameterized,
    F: Fn(&M) -> f64,
{
    let shapes: Vec<_> = model.params().iter().map(|p| p.value.shape()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (pi, &(r, c)) in shapes.iter().enumerate() {
        let mut g = Tensor2::zeros(r, c);
        for i in 0..r * c {
            let orig = model.params()[pi].value.data()[i];
            model.params_mut()[pi].value.data_mut()[i] = orig + h;
            let plus = loss(model);
            model.params_mut()[pi].value.data_mut()[i] = orig - h;
            let minus = loss(model);
            model.params_mut()[pi].value.data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

pub fn numeric_input_grad<F>(x: &Tensor2, h: f64, loss: F) -> Tensor2
where
    F: Fn(&Tensor2) -> f64,
{
    let mut probe = x.clone();
    let mut g = Tensor2::zeros(x.rows(), x.cols());
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = loss(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = loss(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    g
}

/// Below this norm a gradient counts as identically zero; finite-difference
/// noise at `h = 1e-5` reaches ~1e-9 on sums of a few hundred outputs. Attention key biases, for one,
/// have an exactly zero gradient because softmax is shift invariant.
pub const ZERO_GRAD_FLOOR: f64 = 1e-4;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, ZERO_GRAD_FLOOR)`.
pub fn relative_error(a: &Tensor2, b: &Tensor2) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(ZERO_GRAD_FLOOR)
}

/// `Σ y ⊙ w`, the scalar probe used to seed `grad_out = w`.
pub fn weighted_sum(y: &Tensor2, w: &Tensor2) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}
