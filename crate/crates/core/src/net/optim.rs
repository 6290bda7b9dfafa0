use serde::{Deserialize, Serialize};

use super::graph::Grads;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05, warmup_steps: 0 }
    }
}

impl AdamWConfig {
    /// Warmup length as a fraction of the total step count.
    pub fn with_warmup_fraction(mut self, fraction: f64, total_steps: u64) -> Self {
        self.warmup_steps = (fraction * total_steps as f64).round() as u64;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("AdamW betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based step `t`: linear ramp `lr * t / warmup`
    /// below the warmup length, constant after.
    pub fn lr_at(&self, t: u64) -> f64 {
        if t < self.warmup_steps {
            self.lr * t as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Moment estimates, one slot per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T> Default for AdamWState<T> {
    fn default() -> Self {
        Self { step: 0, m: Vec::new(), v: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    pub state: AdamWState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state: AdamWState::default() })
    }

    /// Applies one update from `grads`; parameters without a gradient are
    /// left untouched. Decoupled weight decay applies to `.w` matrices only.
    /// Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<f64> {
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let c = &self.config;
        let st = &mut self.state;
        st.step += 1;
        st.m.resize(store.len(), None);
        st.v.resize(store.len(), None);
        let lr = c.lr_at(st.step);
        let bc1 = 1.0 - c.beta1.powi(st.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(st.step.min(i32::MAX as u64) as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for pid in 0..store.len() {
            let Some(g) = grads.get(pid) else { continue };
            let decay = if store.name(pid).ends_with(".w") { T::lit(1.0 - lr * c.weight_decay) } else { T::one() };
            let (rows, cols) = g.shape();
            let m = st.m[pid].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let v = st.v[pid].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let p = store.tensor_mut(pid);
            for k in 0..g.len() {
                let gk = g.data[k];
                m.data[k] = b1 * m.data[k] + (T::one() - b1) * gk;
                v.data[k] = b2 * v.data[k] + (T::one() - b2) * gk * gk;
                let denom = v.data[k].sqrt() / bc2_sqrt + eps;
                p.data[k] = p.data[k] * decay - step_size * m.data[k] / denom;
            }
        }
        Ok(lr)
    }
}
