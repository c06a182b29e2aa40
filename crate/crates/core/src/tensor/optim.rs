//! AdamW: adaptive moments with decoupled weight decay.

use super::{ParamSet, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One first/second moment slot per parameter; deterministic given state.
#[derive(Debug)]
pub struct AdamW<S> {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(ps: &ParamSet<S>, cfg: AdamWConfig) -> Result<Self> {
        if cfg.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::Config("adamw betas must lie in [0, 1)".into()));
        }
        let m = ps.iter().map(|(_, p)| vec![S::ZERO; p.value.numel()]).collect();
        let v = ps.iter().map(|(_, p)| vec![S::ZERO; p.value.numel()]).collect();
        Ok(AdamW {
            cfg,
            step: 0,
            m,
            v,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Applies one update from the gradients currently held in `ps`.
    /// Does not zero them; the caller owns gradient lifetime.
    pub fn step(&mut self, ps: &mut ParamSet<S>) {
        self.step += 1;
        let t = self.step as f64;
        let lr = S::from_f64(self.cfg.lr);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one_m_b1 = S::ONE - b1;
        let one_m_b2 = S::ONE - b2;
        let eps = S::from_f64(self.cfg.eps);
        let wd = S::from_f64(self.cfg.weight_decay);
        let bc1 = S::from_f64(1.0 - self.cfg.beta1.powf(t));
        let bc2 = S::from_f64(1.0 - self.cfg.beta2.powf(t));

        for (i, id) in ps.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = ps.get_mut(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            // decoupled decay, applied before the adaptive update
            let grads = p.grad.clone();
            let data = p.value.data().to_vec();
            let mut new_data = Vec::with_capacity(data.len());
            for j in 0..data.len() {
                let g = grads[j];
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let mut x = data[j];
                x -= lr * wd * x;
                x -= lr * m_hat / (v_hat.sqrt() + eps);
                new_data.push(x);
            }
            p.value = super::Tensor::new(p.value.shape().to_vec(), new_data)
                .expect("shape unchanged");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn rejects_nonpositive_lr() {
        let ps = ParamSet::<f64>::new();
        let cfg = AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        };
        assert!(matches!(AdamW::new(&ps, cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param_unchanged() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::from_slice(&[1.5f64, -2.0])).unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&ps, cfg).unwrap();
        opt.step(&mut ps);
        assert_eq!(ps.get(id).value.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        // From m=v=0 the first update is approximately -lr * sign(g).
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::from_slice(&[0.0f64, 0.0])).unwrap();
        ps.get_mut(id).grad = vec![0.3, -7.0];
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&ps, cfg).unwrap();
        opt.step(&mut ps);
        let w = ps.get(id).value.data();
        assert!((w[0] + 0.01).abs() < 1e-4, "w0={}", w[0]);
        assert!((w[1] - 0.01).abs() < 1e-4, "w1={}", w[1]);
    }

    #[test]
    fn matches_scalar_reference_trace() {
        // Two identical steps with fixed grad, checked against a hand-rolled
        // scalar AdamW.
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.01);
        let g = 2.0f64;
        let mut x_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x_ref -= lr * wd * x_ref;
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::from_slice(&[1.0f64])).unwrap();
        let cfg = AdamWConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        };
        let mut opt = AdamW::new(&ps, cfg).unwrap();
        for _ in 0..2 {
            ps.get_mut(id).grad = vec![g];
            opt.step(&mut ps);
        }
        assert!((ps.get(id).value.data()[0] - x_ref).abs() < 1e-12);
    }
}
