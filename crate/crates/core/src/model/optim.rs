//! Adam optimizer with bias-corrected first/second moments.

use indexmap::IndexMap;
use ndarray::ArrayD;

use super::params::ParameterStore;
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    config: AdamConfig,
    m: IndexMap<String, ArrayD<T>>,
    v: IndexMap<String, ArrayD<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero-initialized moments for every trainable tensor in `store`.
    pub fn new(config: AdamConfig, store: &ParameterStore<T>) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, entry) in store.iter() {
            if entry.trainable {
                m.insert(name.to_string(), ArrayD::zeros(entry.value.raw_dim()));
                v.insert(name.to_string(), ArrayD::zeros(entry.value.raw_dim()));
            }
        }
        Self {
            config: config,
            m,
            v,
            t: 0,
        }
    }

    /// Rebuild from checkpointed moments.
    pub fn restore(m: IndexMap<String, ArrayD<T>>, v: IndexMap<String, ArrayD<T>>, t: u64) -> Self {
        Self {
            config: AdamConfig::default(),
            m,
            v,
            t,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<(&ArrayD<T>, &ArrayD<T>)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// Apply one update. Parameters without a gradient this step keep their
    /// value and moments untouched; the step counter advances once per call.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<T>,
        grads: &IndexMap<String, ArrayD<T>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let b1 = T::from_f64x(self.config.beta1);
        let b2 = T::from_f64x(self.config.beta2);
        let one = T::one();
        let bc1 = T::from_f64x(1.0 - self.config.beta1.powi(self.t as i32));
        let bc2 = T::from_f64x(1.0 - self.config.beta2.powi(self.t as i32));
        let eps = T::from_f64x(self.config.eps);
        let lr_t = T::from_f64x(lr);

        for (name, grad) in grads {
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| CoreError::validation(format!("gradient for unknown parameter {name}")))?;
            let v = self.v.get_mut(name).expect("moment maps share keys");
            if m.shape() != grad.shape() {
                return Err(CoreError::validation(format!(
                    "gradient shape mismatch for {name}: {:?} vs {:?}",
                    m.shape(),
                    grad.shape()
                )));
            }
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let value = store.value_mut(name)?;
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
