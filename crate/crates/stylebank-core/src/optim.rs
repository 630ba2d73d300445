//! Adam with bias correction, keyed by parameter name so one optimizer can
//! serve any named parameter collection. No schedule, no weight decay.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0 && lr.is_finite(), "learning rate must be positive");
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before the `update` calls of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to a single named parameter.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        assert!(param.same_shape(grad), "gradient shape mismatch for `{}`", name);
        assert!(self.t > 0, "begin_step must run before update");
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for ((p, g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With bias correction the very first update is lr * sign(g).
        let mut opt = Adam::new(0.1);
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap();
        opt.begin_step();
        opt.update("p", &mut p, &g);
        assert!((p.data()[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.data()[1] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut opt = Adam::new(0.05);
        let mut p = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        for _ in 0..400 {
            let g = Tensor::from_vec(&[1], vec![2.0 * p.data()[0]]).unwrap();
            opt.begin_step();
            opt.update("p", &mut p, &g);
        }
        assert!(p.data()[0].abs() < 0.05, "ended at {}", p.data()[0]);
    }

    #[test]
    fn state_is_keyed_by_name() {
        let mut opt = Adam::new(0.1);
        let mut a = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        // Warm a's momentum; b must still take a fresh first step.
        for _ in 0..10 {
            opt.begin_step();
            opt.update("a", &mut a, &g);
        }
        opt.begin_step();
        opt.update("b", &mut b, &g);
        assert!((b.data()[0] + 0.1).abs() < 2e-3, "b moved {}", b.data()[0]);
    }
}
