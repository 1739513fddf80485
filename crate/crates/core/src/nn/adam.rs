use std::collections::BTreeMap;

use super::params::{flatten, Params};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
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

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with a per-tensor learning rate and a set of frozen name prefixes.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    state: BTreeMap<String, Moments>,
    frozen: Vec<String>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            state: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Any tensor whose name starts with `prefix` is refused by [`Adam::step`].
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen.push(prefix.to_string());
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// One update of `params` (visited under `prefix`) from `grads`, which
    /// must have the same structure. `lr` maps a tensor name to its rate.
    pub fn step<P: Params>(
        &mut self,
        prefix: &str,
        params: &mut P,
        grads: &P,
        lr: &dyn Fn(&str) -> f64,
    ) -> Result<()> {
        let grads = flatten(grads, prefix);
        if let Some(t) = grads.iter().find(|t| self.is_frozen(&t.name)) {
            return Err(Error::FrozenParameter(t.name.clone()));
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        let mut i = 0;
        let state = &mut self.state;
        let mut mismatch = None;
        params.visit_mut(prefix, &mut |name, values| {
            let g = &grads[i];
            i += 1;
            if g.name != name || g.values.len() != values.len() {
                mismatch.get_or_insert_with(|| name.to_string());
                return;
            }
            let rate = lr(name);
            let mom = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; values.len()],
                v: vec![0.0; values.len()],
            });
            for (k, p) in values.iter_mut().enumerate() {
                let gk = g.values[k];
                mom.m[k] = beta1 * mom.m[k] + (1.0 - beta1) * gk;
                mom.v[k] = beta2 * mom.v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = mom.m[k] / bc1;
                let v_hat = mom.v[k] / bc2;
                *p -= rate * m_hat / (v_hat.sqrt() + eps);
            }
        });
        match mismatch {
            Some(name) => Err(Error::Shape(format!(
                "gradient does not match tensor `{name}`"
            ))),
            None => Ok(()),
        }
    }
}
