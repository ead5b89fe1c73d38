use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one buffer pair per parameter name.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub config: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            step: 0,
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient entry.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, g) in grads {
        let len = params.get(name)?.len();
        if g.len() != len {
            return Err(Error::shape(
                "adam_step",
                format!("gradient for '{name}' has {} values, parameter has {len}", g.len()),
            ));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (j, value) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            *value = (*value as f64 - update) as f32;
        }
    }
    Ok(())
}
