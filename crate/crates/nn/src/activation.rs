use crate::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: &Tensor2) -> Tensor2 {
        match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Tanh => x.map(f64::tanh),
            Activation::Sigmoid => x.map(sigmoid),
        }
    }

    /// Gradient through the activation, expressed in terms of its output `y`.
    pub fn backward(self, y: &Tensor2, grad: &Tensor2) -> Tensor2 {
        let f: fn(f64, f64) -> f64 = match self {
            Activation::Identity => |_, g| g,
            Activation::Relu => |y, g| if y > 0.0 { g } else { 0.0 },
            Activation::Tanh => |y, g| g * (1.0 - y * y),
            Activation::Sigmoid => |y, g| g * y * (1.0 - y),
        };
        let data = y
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&y, &g)| f(y, g))
            .collect();
        Tensor2::from_vec(y.rows(), y.cols(), data).expect("same shape")
    }
}
