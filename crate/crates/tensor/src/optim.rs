//! AdamW with decoupled weight decay and a linear-warmup/cosine schedule.

use std::f64::consts::PI;

use crate::error::{Result, TensorError};
use crate::params::{GradBuffer, ParamStore, Trainable};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

/// One AdamW update of every trainable parameter.
///
/// Parameters without a gradient are treated as having a zero gradient, so
/// their moments decay and weight decay still applies. Frozen parameters and
/// masked-out entries are left untouched.
pub fn adamw_step(store: &mut ParamStore, grads: &GradBuffer, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() > store.len() {
        return Err(TensorError::Invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (id, _) in grads.iter() {
        let g = grads.get(id).expect("iterated id has a gradient");
        store.value(id).expect_same_shape("adamw_step", g)?;
    }
    for (id, param) in store.iter_mut() {
        let mask = match &param.trainable {
            Trainable::Frozen => continue,
            Trainable::All => None,
            Trainable::Mask(m) => Some(m.clone()),
        };
        param.step += 1;
        let t = param.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let grad = grads.get(id).map(|g| g.data());
        let value = param.value.data_mut();
        let m = param.first_moment.data_mut();
        let v = param.second_moment.data_mut();
        for i in 0..value.len() {
            if let Some(mask) = &mask {
                if !mask[i] {
                    continue;
                }
            }
            let g = grad.map_or(0.0, |g| g[i]);
            value[i] -= lr * cfg.weight_decay * value[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite("adamw_step"));
        }
    }
    Ok(())
}

/// Linear warmup from `lr_start` to `lr_peak`, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(warmup_steps: u64, lr_start: f64, lr_peak: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(TensorError::Invalid(format!(
                "warmup ({warmup_steps}) must be shorter than the run ({total_steps})"
            )));
        }
        if !(lr_start >= 0.0 && lr_peak >= lr_start) {
            return Err(TensorError::Invalid(format!(
                "need 0 <= lr_start <= lr_peak, got {lr_start} and {lr_peak}"
            )));
        }
        Ok(Self {
            warmup_steps,
            lr_start,
            lr_peak,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(TensorError::Invalid(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            let frac = step as f64 / self.warmup_steps as f64;
            return Ok(self.lr_start + (self.lr_peak - self.lr_start) * frac);
        }
        let decay_len = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / decay_len;
        Ok((self.lr_peak * 0.5 * (1.0 + (PI * progress).cos())).max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ParamId, Tensor};

    fn scalar_store(p: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(p)).unwrap();
        store
    }

    fn grad(g: f64) -> GradBuffer {
        let mut buf = GradBuffer::new(1);
        buf.add(ParamId(0), &Tensor::scalar(g)).unwrap();
        buf
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut store = scalar_store(1.25);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut store, &grad(0.0), 1e-2, &cfg).unwrap();
        assert_eq!(store.value(ParamId(0)).item(), 1.25);
        assert_eq!(store.get(ParamId(0)).step, 1);
    }

    #[test]
    fn degenerate_betas_give_sign_step() {
        let mut store = scalar_store(0.5);
        let cfg = AdamWConfig {
            beta1: 0.0,
            beta2: 0.0,
            weight_decay: 0.0,
            eps: 1e-8,
        };
        let (lr, g) = (0.1, -3.0);
        adamw_step(&mut store, &grad(g), lr, &cfg).unwrap();
        let expected = 0.5 - lr * g / (g.abs() + 1e-8);
        assert!((store.value(ParamId(0)).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_and_masked_entries_stay_put() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        let b = store.insert("b", Tensor::scalar(1.0)).unwrap();
        store.set_trainable(a, Trainable::Mask(vec![false, true]));
        store.set_trainable(b, Trainable::Frozen);
        let mut grads = GradBuffer::for_store(&store);
        grads.add(a, &Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        grads.add(b, &Tensor::scalar(1.0)).unwrap();
        adamw_step(&mut store, &grads, 0.1, &AdamWConfig::default()).unwrap();
        assert_eq!(store.value(a).data()[0], 1.0);
        assert!(store.value(a).data()[1] < 1.0);
        assert_eq!(store.value(b).item(), 1.0);
    }

    #[test]
    fn rejects_misaligned_gradients() {
        let mut store = scalar_store(1.0);
        let mut grads = GradBuffer::new(1);
        grads.add(ParamId(0), &Tensor::zeros(vec![3])).unwrap();
        assert!(adamw_step(&mut store, &grads, 0.1, &AdamWConfig::default()).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1000, 1e-8, 1e-4, 5000).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 1e-8);
        assert!((s.lr_at(1000).unwrap() - 1e-4).abs() < 1e-20);
        assert!(s.lr_at(5000).unwrap().abs() < 1e-12);
        assert!(s.lr_at(5001).is_err());
        assert!(LrSchedule::new(10, 0.0, 1.0, 10).is_err());
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = LrSchedule::new(10, 0.0, 1.0, 100).unwrap();
        let lrs: Vec<f64> = (10..=100).map(|t| s.lr_at(t).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let before = s.lr_at(9).unwrap();
        let after = s.lr_at(11).unwrap();
        assert!((before - 1.0).abs() < 0.11 && (after - 1.0).abs() < 0.01);
    }
}
