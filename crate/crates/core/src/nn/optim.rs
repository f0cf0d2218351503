//! Named trainable parameters with decoupled-weight-decay Adam.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy)]
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
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Name-keyed parameter map plus per-parameter Adam state. Iteration order
/// is the lexicographic name order, which keeps updates and serialization
/// deterministic.
#[derive(Debug, Clone)]
pub struct ParameterStore<T: Real> {
    entries: BTreeMap<String, Entry<T>>,
    step: u64,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Numeric(format!("duplicate parameter `{name}`")));
        }
        let m = Tensor::zeros(value.shape().to_vec());
        let v = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad: None,
                m,
                v,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    /// Replaces a parameter value, keeping optimizer state shape-checked.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Numeric(format!("unknown parameter `{name}`")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "param-set",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Adds a gradient contribution (accumulates when one is present).
    pub fn accumulate_grad(&mut self, name: &str, grad: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Numeric(format!("unknown parameter `{name}`")))?;
        if entry.value.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "grad-accumulate",
                lhs: entry.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        match &mut entry.grad {
            Some(acc) => {
                for (a, &g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).and_then(|e| e.grad.as_ref())
    }

    /// One bias-corrected Adam step with decoupled weight decay. Parameters
    /// without a gradient this step are left untouched (their moments do not
    /// advance either), so skipped tasks do not perturb their heads.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one_minus_b1 = T::from_f64(1.0 - cfg.beta1);
        let one_minus_b2 = T::from_f64(1.0 - cfg.beta2);
        let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
        let eps = T::from_f64(cfg.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(cfg.weight_decay);

        for (name, e) in self.entries.iter_mut() {
            let Some(grad) = &e.grad else { continue };
            for i in 0..grad.len() {
                let g = grad.data()[i];
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in `{name}`"
                    )));
                }
                let m = b1 * e.m.data()[i] + one_minus_b1 * g;
                let v = b2 * e.v.data()[i] + one_minus_b2 * g * g;
                e.m.data_mut()[i] = m;
                e.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let p = e.value.data()[i];
                e.value.data_mut()[i] = p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * p);
            }
        }
        Ok(())
    }
}

/// Linearly decayed learning rate: full at step 0, zero at `total` steps.
pub fn linear_decay(lr0: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - step as f64 / total as f64).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_and_zero_decay_leave_params_unchanged() {
        let mut store: ParameterStore<f64> = ParameterStore::new();
        store
            .insert("w", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap())
            .unwrap();
        store
            .accumulate_grad("w", Tensor::zeros(vec![2]))
            .unwrap();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        store.adam_step(0.1, &cfg).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_magnitude_close_to_lr() {
        for &g0 in &[0.3f64, -2.0, 1e-3] {
            let mut store: ParameterStore<f64> = ParameterStore::new();
            store.insert("x", Tensor::scalar(1.0)).unwrap();
            store.accumulate_grad("x", Tensor::scalar(g0)).unwrap();
            let cfg = AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            };
            store.adam_step(0.1, &cfg).unwrap();
            let dx = (store.get("x").unwrap().item() - 1.0).abs();
            assert!(
                (0.09..=0.1).contains(&dx),
                "step {dx} for gradient {g0}"
            );
        }
    }

    #[test]
    fn quadratic_loss_decreases_below_threshold() {
        // Minimize x^2 from x0 = 1 with lr = 0.1.
        let mut store: ParameterStore<f64> = ParameterStore::new();
        store.insert("x", Tensor::scalar(1.0)).unwrap();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let x = store.get("x").unwrap().item();
            store.clear_grads();
            store.accumulate_grad("x", Tensor::scalar(2.0 * x)).unwrap();
            store.adam_step(0.1, &cfg).unwrap();
            last = store.get("x").unwrap().item().powi(2);
        }
        assert!(last < 1e-2, "final loss {last}");
    }

    #[test]
    fn skipped_parameters_do_not_move() {
        let mut store: ParameterStore<f64> = ParameterStore::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        store.insert("b", Tensor::scalar(2.0)).unwrap();
        store.accumulate_grad("a", Tensor::scalar(0.5)).unwrap();
        store.adam_step(0.1, &AdamConfig::default()).unwrap();
        assert_eq!(store.get("b").unwrap().item(), 2.0);
        assert_ne!(store.get("a").unwrap().item(), 1.0);
    }

    #[test]
    fn linear_decay_schedule() {
        assert_eq!(linear_decay(1.0, 0, 100), 1.0);
        assert!((linear_decay(1.0, 50, 100) - 0.5).abs() < 1e-12);
        assert_eq!(linear_decay(1.0, 100, 100), 0.0);
        assert_eq!(linear_decay(1.0, 150, 100), 0.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store: ParameterStore<f64> = ParameterStore::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        assert!(store.insert("w", Tensor::scalar(1.0)).is_err());
    }
}
