//! AdamW with decoupled weight decay and the poly learning-rate schedule.

use crate::param::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0125 }
    }
}

/// Moment estimates, aligned with the parameter order of the store they
/// were created for.
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Scalar> {
    pub config: AdamWConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(store: &ParamStore<S>, config: AdamWConfig) -> Self {
        let shapes: Vec<_> = store.iter().map(|p| (p.name.clone(), p.value.shape())).collect();
        OptimizerState {
            config,
            step: 0,
            names: shapes.iter().map(|(n, _)| n.clone()).collect(),
            m: shapes.iter().map(|&(_, s)| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|&(_, s)| Tensor::zeros(s)).collect(),
        }
    }

    /// One AdamW update of every trainable weight from its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let (one_b1, one_b2) = (S::from_f64(1.0 - c.beta1), S::from_f64(1.0 - c.beta2));
        let decay = S::from_f64(1.0 - lr * c.weight_decay);
        let step = S::from_f64(lr / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);
        let eps = S::from_f64(c.eps);
        for (i, p) in store.iter_mut().enumerate() {
            if !(p.trainable && p.kind == ParamKind::Weight) {
                continue;
            }
            debug_assert_eq!(self.names[i], p.name);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                *w *= decay;
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                *w -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// `lr0 * (1 - iter / max_iter)^power`, clamped at zero.
pub fn poly_lr(lr0: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return 0.0;
    }
    let frac = (1.0 - iter as f64 / max_iter as f64).max(0.0);
    lr0 * frac.powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn store(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(Shape::new(1, 1, 1, 3), v), ParamKind::Weight).unwrap();
        s.get_mut("w").unwrap().grad = Tensor::full(Shape::new(1, 1, 1, 3), g);
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(0.7, 0.0);
        let mut opt = OptimizerState::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s, 1e-3);
        assert!(s.value("w").unwrap().data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(1.0, 0.3);
        let mut opt = OptimizerState::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s, 1e-2);
        // m_hat = g, v_hat = g^2  =>  delta = lr * g / (|g| + eps)
        let expect = 1.0 - 1e-2 * 0.3 / (0.3 + 1e-8);
        assert!((s.value("w").unwrap().data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn decoupled_decay_shrinks_multiplicatively() {
        let mut s = store(2.0, 0.0);
        let mut opt = OptimizerState::new(&s, AdamWConfig { weight_decay: 0.5, ..Default::default() });
        opt.step(&mut s, 0.1);
        assert!((s.value("w").unwrap().data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-14);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut s = store(2.0, 1.0);
        s.freeze();
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        opt.step(&mut s, 0.1);
        assert!(s.value("w").unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(4e-4, 0, 100, 0.9), 4e-4);
        assert_eq!(poly_lr(4e-4, 100, 100, 0.9), 0.0);
        let half = poly_lr(4e-4, 50, 100, 0.9);
        assert!((half - 4e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert!((half - 2.1435e-4).abs() < 1e-8);
    }
}
