use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Static,
    PlateauAdaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightPolicy {
    pub mode: WeightMode,
    pub window: usize,
    pub up_factor: f64,
    pub down_factor: f64,
    pub epsilon: f64,
    pub min_weight: f64,
    pub max_weight: f64,
}

impl Default for WeightPolicy {
    fn default() -> Self {
        Self {
            mode: WeightMode::Static,
            window: 200,
            up_factor: 1.25,
            down_factor: 0.8,
            epsilon: 1e-4,
            min_weight: 0.1,
            max_weight: 10.0,
        }
    }
}

impl WeightPolicy {
    pub fn plateau() -> Self {
        Self { mode: WeightMode::PlateauAdaptive, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.up_factor >= 1.0 && self.down_factor <= 1.0 && self.down_factor > 0.0) {
            return Err(Error::Config(format!(
                "weight factors need up >= 1 >= down > 0, got up {} down {}",
                self.up_factor, self.down_factor
            )));
        }
        if !(self.min_weight > 0.0 && self.min_weight <= self.max_weight) {
            return Err(Error::Config(format!("weight bounds [{}, {}] invalid", self.min_weight, self.max_weight)));
        }
        if self.window < 2 {
            return Err(Error::Config("slope window needs at least two points".into()));
        }
        Ok(())
    }
}

/// Per-dataset loss trajectories, one entry per logged step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

/// Least-squares slope of `y` against its index.
pub fn ls_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let (num, den) = y.iter().enumerate().fold((0.0, 0.0), |(a, b), (i, v)| {
        let dx = i as f64 - xm;
        (a + dx * (v - ym), b + dx * dx)
    });
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn tail(v: &[f64], window: usize) -> Result<&[f64]> {
    if v.len() < window {
        return Err(Error::InsufficientHistory { window, available: v.len() });
    }
    Ok(&v[v.len() - window..])
}

/// Plateau-adaptive reweighting. Over the last `window` entries, a dataset
/// whose validation loss rises while its training loss falls is scaled by
/// `down_factor`; otherwise one whose validation slope is `>= -epsilon` is
/// scaled by `up_factor`. Results are clamped to the policy bounds.
pub fn update_weights(weights: &[f64], histories: &[LossHistory], policy: &WeightPolicy) -> Result<Vec<f64>> {
    if policy.mode == WeightMode::Static {
        return Ok(weights.to_vec());
    }
    policy.validate()?;
    if histories.len() != weights.len() {
        return Err(Error::Config(format!("{} histories for {} weights", histories.len(), weights.len())));
    }
    weights
        .iter()
        .zip(histories)
        .map(|(&w, h)| {
            let val = ls_slope(tail(&h.val, policy.window)?);
            let diverging = !h.train.is_empty() && {
                let train = ls_slope(tail(&h.train, policy.window)?);
                val > policy.epsilon && train < -policy.epsilon
            };
            let w = if diverging {
                w * policy.down_factor
            } else if val >= -policy.epsilon {
                w * policy.up_factor
            } else {
                w
            };
            Ok(w.clamp(policy.min_weight, policy.max_weight))
        })
        .collect()
}
