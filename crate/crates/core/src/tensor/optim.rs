use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over the trainable tensors of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Parameters holding optimizer state.
    pub fn tracked_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// Applies one update from the accumulated gradients. Nothing is written
    /// if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let ids = store.trainable_ids();
        for &id in &ids {
            if let Some(g) = store.get(id).grad() {
                if let Some((index, &value)) = g.iter().enumerate().find(|(_, x)| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        name: store.name(id).to_string(),
                        index,
                        value: value.to_f64().unwrap_or(f64::NAN),
                    });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.step as f64));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for id in ids {
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[T]>::to_vec) else { continue };
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the factor applied (1 when no clipping happened).
pub fn clip_global_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: T) -> T {
    let ids = store.trainable_ids();
    let sq: T = ids.iter().filter_map(|&id| store.get(id).grad()).flat_map(|g| g.iter().map(|&x| x * x)).sum();
    let norm = sq.sqrt();
    if !(norm > max_norm) {
        return T::one();
    }
    let factor = max_norm / norm;
    for id in ids {
        if let Some(g) = store.get_mut(id).grad_mut() {
            g.iter_mut().for_each(|x| *x = *x * factor);
        }
    }
    factor
}
