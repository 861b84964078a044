//! SGD-with-momentum and Adam, plus the cosine learning-rate schedule.
//!
//! Weight decay is applied as an additive L2 term on the gradient for both
//! optimizers. A non-finite gradient aborts the step before any parameter is
//! touched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimKind::SgdMomentum { momentum }
    }
}

/// Optimizer state: hyperparameters plus per-parameter moment buffers.
pub struct Optimizer<T> {
    pub kind: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    moment1: Vec<Tensor<T>>,
    moment2: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimKind, lr: f64, weight_decay: f64, params: &ParamSet<T>) -> Self {
        let moment1 = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        let moment2 = match kind {
            OptimKind::Adam { .. } => params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
            OptimKind::SgdMomentum { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            lr,
            weight_decay,
            step_count: 0,
            moment1,
            moment2,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update to all trainable parameters from their accumulated
    /// gradients, then zero the gradients.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        // validate before mutating anything
        for e in params.entries() {
            if e.trainable && !e.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", e.name)));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let lr = T::from_f64(self.lr);
        let wd = T::from_f64(self.weight_decay);
        match self.kind {
            OptimKind::SgdMomentum { momentum } => {
                let mu = T::from_f64(momentum);
                for (i, e) in params.entries_mut().iter_mut().enumerate() {
                    if !e.trainable {
                        continue;
                    }
                    let m = &mut self.moment1[i];
                    let n = e.value.numel();
                    for j in 0..n {
                        let g = e.grad.data()[j] + wd * e.value.data()[j];
                        let mj = mu * m.data()[j] + g;
                        m.data_mut()[j] = mj;
                        e.value.data_mut()[j] -= lr * mj;
                    }
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let b1 = T::from_f64(beta1);
                let b2 = T::from_f64(beta2);
                let epsv = T::from_f64(eps);
                let bc1 = T::from_f64(1.0 - beta1.powi(t as i32));
                let bc2 = T::from_f64(1.0 - beta2.powi(t as i32));
                for (i, e) in params.entries_mut().iter_mut().enumerate() {
                    if !e.trainable {
                        continue;
                    }
                    let m = &mut self.moment1[i];
                    let v2 = &mut self.moment2[i];
                    let n = e.value.numel();
                    for j in 0..n {
                        let g = e.grad.data()[j] + wd * e.value.data()[j];
                        let mj = b1 * m.data()[j] + (T::ONE - b1) * g;
                        let vj = b2 * v2.data()[j] + (T::ONE - b2) * g * g;
                        m.data_mut()[j] = mj;
                        v2.data_mut()[j] = vj;
                        let m_hat = mj / bc1;
                        let v_hat = vj / bc2;
                        e.value.data_mut()[j] -= lr * m_hat / (v_hat.sqrt() + epsv);
                    }
                }
            }
        }
        params.zero_grads();
        Ok(())
    }
}

/// Cosine decay with optional linear warmup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, min_lr: f64, total_steps: u64, warmup_steps: u64) -> Result<Self> {
        if !(0.0 <= min_lr && min_lr <= base_lr) {
            return Err(Error::arg("lr_schedule", "requires 0 <= min_lr <= base_lr"));
        }
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::arg("lr_schedule", "requires 0 < warmup_steps < total_steps"));
        }
        Ok(LrSchedule {
            base_lr,
            min_lr,
            total_steps,
            warmup_steps,
        })
    }

    pub fn cosine(base_lr: f64, total_steps: u64) -> Result<Self> {
        Self::new(base_lr, 0.0, total_steps, 0)
    }
}

/// Learning rate at `step`. Steps past `total_steps` clamp to `min_lr`.
pub fn cosine_lr(s: &LrSchedule, step: u64) -> f64 {
    if step >= s.total_steps {
        return s.min_lr;
    }
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("w", Tensor::from_vec(&[v.len()], v.to_vec()).unwrap(), true)
            .unwrap();
        p
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut p = one_param(&[1.0, -2.0, 3.0]);
        let mut opt = Optimizer::new(OptimKind::adam(), 0.1, 0.0, &p);
        opt.step(&mut p).unwrap();
        assert_eq!(p.get("w").unwrap().value.data(), &[1.0, -2.0, 3.0]);

        let mut p = one_param(&[1.0, -2.0]);
        let mut opt = Optimizer::new(OptimKind::sgd(0.9), 0.1, 0.0, &p);
        opt.step(&mut p).unwrap();
        assert_eq!(p.get("w").unwrap().value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_momentum_zero_is_plain_gradient_descent() {
        let mut p = one_param(&[1.0]);
        p.get_mut("w").unwrap().grad = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let mut opt = Optimizer::new(OptimKind::sgd(0.0), 0.2, 0.0, &p);
        opt.step(&mut p).unwrap();
        assert!((p.get("w").unwrap().value.data()[0] - (1.0 - 0.2 * 0.5)).abs() < 1e-15);
        // gradients are zeroed after the step
        assert_eq!(p.get("w").unwrap().grad.data(), &[0.0]);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // with m = (1-b1) g, v = (1-b2) g^2 and bias correction, the first
        // update is lr * g / (|g| + eps') with eps' = eps; hand computed:
        let g = 0.3f64;
        let lr = 0.01;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let m_hat = (1.0 - b1) * g / (1.0 - b1);
        let v_hat = (1.0 - b2) * g * g / (1.0 - b2);
        let expect = 1.0 - lr * m_hat / (v_hat.sqrt() + eps);

        let mut p = one_param(&[1.0]);
        p.get_mut("w").unwrap().grad = Tensor::from_vec(&[1], vec![g]).unwrap();
        let mut opt = Optimizer::new(OptimKind::Adam { beta1: b1, beta2: b2, eps }, lr, 0.0, &p);
        opt.step(&mut p).unwrap();
        let got = p.get("w").unwrap().value.data()[0];
        assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut p = one_param(&[1.0]);
        p.get_mut("w").unwrap().grad = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        let mut opt = Optimizer::new(OptimKind::adam(), 0.01, 0.0, &p);
        assert!(opt.step(&mut p).is_err());
        // parameter untouched
        assert_eq!(p.get("w").unwrap().value.data(), &[1.0]);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = one_param(&[2.0]);
        let mut opt = Optimizer::new(OptimKind::sgd(0.0), 0.1, 0.5, &p);
        opt.step(&mut p).unwrap();
        // g_total = 0 + 0.5 * 2.0 = 1.0; w <- 2.0 - 0.1
        assert!((p.get("w").unwrap().value.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let s = LrSchedule::cosine(0.4, 100).unwrap();
        assert!((cosine_lr(&s, 0) - 0.4).abs() < 1e-15);
        assert!(cosine_lr(&s, 100).abs() < 1e-15);
        assert!((cosine_lr(&s, 50) - 0.2).abs() < 1e-12);
        // past the end clamps to min_lr
        assert_eq!(cosine_lr(&s, 250), 0.0);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let s = LrSchedule::new(1.0, 0.0, 100, 10).unwrap();
        assert_eq!(cosine_lr(&s, 0), 0.0);
        assert!((cosine_lr(&s, 5) - 0.5).abs() < 1e-15);
        assert!((cosine_lr(&s, 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::new(0.1, 0.2, 100, 0).is_err());
        assert!(LrSchedule::new(0.1, 0.0, 0, 0).is_err());
    }
}
