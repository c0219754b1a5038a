//! Adam with coupled L2 weight decay, and the poly learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment buffers, one pair per parameter in store order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update from the gradient buffers in `store`, which are zeroed
    /// afterwards. Nothing is modified if any gradient is missing or
    /// non-finite.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("adam_step", format!("learning rate {lr}")));
        }
        if store.len() != self.m.len() {
            return Err(Error::invalid(
                "adam_step",
                "store changed since the optimizer was created",
            ));
        }
        for ((name, t), m) in store.iter().zip(&self.m) {
            let g = t.grad().ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            if g.len() != m.len() {
                return Err(Error::ShapeDisagreement {
                    name: name.to_string(),
                    expected: vec![m.len()],
                    found: vec![g.len()],
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }

        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((_, t), m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_default();
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + weight_decay * data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}

/// `lr0 · (1 − iter/max_iter)^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolySchedule {
    pub lr0: f64,
    pub power: f64,
    pub max_iter: u64,
}

impl PolySchedule {
    pub fn new(lr0: f64, power: f64, max_iter: u64) -> Result<Self> {
        if max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        if !(lr0 >= 0.0 && lr0.is_finite() && power > 0.0 && power.is_finite()) {
            return Err(Error::Config(format!("invalid schedule lr0={lr0} power={power}")));
        }
        Ok(PolySchedule { lr0, power, max_iter })
    }

    pub fn lr(&self, iter: u64) -> Result<f64> {
        poly_lr(iter, self)
    }
}

pub fn poly_lr(iter: u64, sched: &PolySchedule) -> Result<f64> {
    if iter > sched.max_iter {
        return Err(Error::invalid(
            "poly_lr",
            format!("iteration {iter} beyond max_iter {}", sched.max_iter),
        ));
    }
    let frac = 1.0 - iter as f64 / sched.max_iter as f64;
    Ok(sched.lr0 * frac.powf(sched.power))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn scalar_store(value: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(value)).unwrap();
        s
    }

    #[test]
    fn schedule_examples() {
        let s = PolySchedule::new(0.01, 0.9, 100).unwrap();
        assert_eq!(s.lr(0).unwrap(), 0.01);
        assert_eq!(s.lr(100).unwrap(), 0.0);
        assert!((s.lr(50).unwrap() - 0.005358867).abs() < 5e-10);
        assert!(s.lr(101).is_err());
        assert!(PolySchedule::new(0.01, 0.9, 0).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(1.0);
        store.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = AdamState::new(&store, cfg);
        opt.step(&mut store, 0.01).unwrap();
        let w = store.get("w").unwrap();
        assert!((1.0 - w.data()[0] - 0.01).abs() < 1e-9);
        assert_eq!(w.grad().unwrap(), &[0.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_lr_still_updates_moments() {
        let mut store = scalar_store(2.0);
        store.get_mut("w").unwrap().accumulate_grad(&[0.5]).unwrap();
        let mut opt = AdamState::new(&store, AdamConfig::default());
        opt.step(&mut store, 0.0).unwrap();
        assert_eq!(store.get("w").unwrap().data()[0], 2.0);
        let g = 0.5 + 1e-4 * 2.0;
        assert!((opt.first_moments()[0][0] - 0.1 * g).abs() < 1e-15);
        assert!((opt.second_moments()[0][0] - 0.001 * g * g).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut store = scalar_store(1.0);
        store.get_mut("w").unwrap().accumulate_grad(&[f64::NAN]).unwrap();
        let mut opt = AdamState::new(&store, AdamConfig::default());
        assert!(matches!(opt.step(&mut store, 0.1), Err(Error::NonFinite { .. })));
        assert_eq!(opt.step_count(), 0);
        assert_eq!(store.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn missing_gradient_reported() {
        let mut store = scalar_store(1.0);
        store.get_mut("w").unwrap().set_requires_grad(false);
        let mut opt = AdamState::new(&store, AdamConfig::default());
        assert!(matches!(opt.step(&mut store, 0.1), Err(Error::MissingGradient(_))));
    }
}
