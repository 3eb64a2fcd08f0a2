use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update to every trainable parameter and
    /// clears all gradients. Frozen parameters are left bit-identical.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids() {
            let p = store.get(id);
            if p.trainable && p.grad.is_none() {
                return Err(Error::invalid(format!(
                    "parameter {} has no gradient",
                    p.name
                )));
            }
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let step_size = T::from_f64_lossy(c.lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        for id in store.ids() {
            let i = id.index();
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else {
                continue;
            };
            if !p.trainable {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(shape));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, (w, &g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                *w = *w - step_size * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
