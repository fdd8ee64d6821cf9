//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment buffers for one ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Zeroes both moment buffers and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().for_each(|t| t.data_mut().fill(0.0));
        self.v.iter_mut().for_each(|t| t.data_mut().fill(0.0));
    }

    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let c = self.config;
        if c.lr < 0.0 || !c.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", c.lr)));
        }
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("adamw", &[self.m.len()], &[params.len(), grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("adamw gradient"));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in it {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_grad_isolates_decay() {
        let mut p = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let mut opt = AdamW::new(cfg(0.1, 0.2), &p);
        opt.apply(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        let k = 1.0 - 0.1 * 0.2;
        assert_eq!(p[0].data(), &[1.0 * k, -2.0 * k, 0.5 * k]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.25] {
            let mut p = vec![Tensor::scalar(1.0)];
            let mut opt = AdamW::new(cfg(0.01, 0.0), &p);
            opt.apply(&mut p, &[Tensor::scalar(g)]).unwrap();
            let delta = p[0].item() - 1.0;
            assert!((delta + 0.01 * g.signum()).abs() < 1e-9, "delta {delta}");
        }
    }

    #[test]
    fn three_steps_match_hand_recurrence() {
        let c = cfg(0.05, 0.1);
        let grads = [0.3, -1.2, 0.7];
        let mut p = vec![Tensor::scalar(0.8)];
        let mut opt = AdamW::new(c, &p);
        for g in grads {
            opt.apply(&mut p, &[Tensor::scalar(g)]).unwrap();
        }
        // Hand-expanded recurrences.
        let (b1, b2) = (0.9_f64, 0.999_f64);
        let mut w = 0.8_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut t = 0;
        for g in grads {
            t += 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w = w * (1.0 - 0.05 * 0.1) - 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0].item() - w).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let orig = Tensor::new(&[2], vec![0.123, -4.5]).unwrap();
        let mut p = vec![orig.clone()];
        let mut opt = AdamW::new(cfg(0.0, 0.3), &p);
        for _ in 0..5 {
            opt.apply(&mut p, &[Tensor::new(&[2], vec![1.0, -2.0]).unwrap()]).unwrap();
        }
        assert_eq!(p[0], orig);
    }

    #[test]
    fn rejects_non_finite_and_mismatch() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = AdamW::new(cfg(0.1, 0.0), &p);
        assert!(opt.apply(&mut p, &[Tensor::scalar(f64::NAN)]).is_err());
        assert!(opt.apply(&mut p, &[Tensor::zeros(&[2])]).is_err());
        assert_eq!(opt.step_count(), 0);
    }
}
