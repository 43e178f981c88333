use crate::{NnError, Param, Result, Tensor2};

/// Adaptive-moment optimizer. Moments are keyed by parameter position, so
/// the same model must be passed on every call.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if params.iter().any(|p| !p.grad.is_finite()) {
            return Err(NnError::NonFinite { op: "adam" });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor2::zeros(p.value.rows(), p.value.cols())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(NnError::Config("optimizer reused across different models".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Param {
        Param::new("w", Tensor2::row_vector(&[v]))
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let mut opt = Adam::new(1e-3);
        for _ in 0..10 {
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value.get(0, 0), 0.7);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar(0.0);
        p.grad.set(0, 0, 1.0);
        let mut opt = Adam::new(1e-3);
        opt.step(&mut [&mut p]).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.value.get(0, 0) - expected).abs() < 1e-18);
    }

    #[test]
    fn minimizes_square() {
        let mut p = scalar(1.0);
        let mut opt = Adam::new(1e-2);
        let mut prev = f64::INFINITY;
        for step in 0..100 {
            let w = p.value.get(0, 0);
            p.grad.set(0, 0, 2.0 * w);
            opt.step(&mut [&mut p]).unwrap();
            let now = p.value.get(0, 0).abs();
            if step >= 5 {
                assert!(now < prev, "step {step}: {now} >= {prev}");
            }
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = scalar(0.0);
        p.grad.set(0, 0, f64::NAN);
        assert!(matches!(Adam::new(1e-3).step(&mut [&mut p]), Err(NnError::NonFinite { .. })));
    }
}
