//! Adam optimizer over `ndarray` tensors, shared by model training and the
//! attack loop.

use crate::scalar::Scalar;
use ndarray::{ArrayBase, DataMut, Dimension};

/// Adam hyperparameters. `weight_decay` acts on the displacement from a
/// per-tensor decay center (0 for ordinary weights, 1 for multiplicative
/// perturbations), added into the gradient before the moment updates.
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moment buffers for one tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    /// One Adam update of `param` given `grad`, decaying toward `center`.
    ///
    /// Iteration order is the tensors' logical order, so updates are
    /// deterministic for a fixed seed and independent of thread count.
    pub fn update<S, D>(
        &mut self,
        opt: &Adam,
        param: &mut ArrayBase<S, D>,
        grad: &ArrayBase<S, D>,
        center: T,
    ) where
        S: DataMut<Elem = T>,
        D: Dimension,
    {
        assert_eq!(param.len(), self.m.len(), "optimizer state length mismatch");
        assert_eq!(param.len(), grad.len(), "gradient length mismatch");
        self.step += 1;
        let b1 = T::from_f64_c(opt.beta1);
        let b2 = T::from_f64_c(opt.beta2);
        let lr = T::from_f64_c(opt.lr);
        let eps = T::from_f64_c(opt.eps);
        let wd = T::from_f64_c(opt.weight_decay);
        let one = T::one();
        let bc1 = one - T::from_f64_c(opt.beta1.powi(self.step as i32));
        let bc2 = one - T::from_f64_c(opt.beta2.powi(self.step as i32));
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = *g + wd * (*p - center);
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let opt = Adam::new(0.01, 0.0);
        let mut p = Array1::from_vec(vec![1.0f64, -2.0]);
        let g = Array1::from_vec(vec![10.0f64, -0.5]);
        let mut st = AdamState::new(2);
        st.update(&opt, &mut p, &g, 0.0);
        // With bias correction the first step is lr * sign(g) up to eps.
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn quadratic_descent_converges() {
        // Minimize (p - 3)^2; gradient 2(p - 3).
        let opt = Adam::new(0.05, 0.0);
        let mut p = Array1::from_vec(vec![0.0f64]);
        let mut st = AdamState::new(1);
        for _ in 0..2000 {
            let g = Array1::from_vec(vec![2.0 * (p[0] - 3.0)]);
            st.update(&opt, &mut p, &g, 0.0);
        }
        assert!((p[0] - 3.0).abs() < 1e-3, "converged to {}", p[0]);
    }

    #[test]
    fn weight_decay_pulls_toward_center() {
        let opt = Adam {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1.0,
        };
        let mut p = Array1::from_vec(vec![5.0f64]);
        let g = Array1::from_vec(vec![0.0f64]);
        let mut st = AdamState::new(1);
        for _ in 0..3000 {
            st.update(&opt, &mut p, &g, 1.0);
        }
        assert!((p[0] - 1.0).abs() < 1e-2, "decayed to {}", p[0]);
    }
}
