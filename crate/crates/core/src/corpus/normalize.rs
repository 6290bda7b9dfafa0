use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::IqWaveform;

/// Peak measure used by absolute-magnitude normalization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Largest absolute value over both rails.
    #[default]
    Component,
    /// Largest complex modulus.
    Modulus,
}

/// Divides the waveform by its peak (component-wise by default). All-zero
/// input passes through unchanged.
pub fn normalize_iq<T: Scalar>(w: &IqWaveform<T>, mode: NormMode) -> IqWaveform<T> {
    let peak = match mode {
        NormMode::Component => w.peak_component(),
        NormMode::Modulus => w.samples().iter().fold(T::zero(), |m, s| m.max(s.norm())),
    };
    if peak > T::zero() {
        w.map_samples(|s| s / peak)
    } else {
        w.clone()
    }
}

/// Affine map of `[lo, hi]` onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub lo: f64,
    pub hi: f64,
}

impl MinMax {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("min-max range requires lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }

    #[inline]
    pub fn denormalize(&self, v: f64) -> f64 {
        v * (self.hi - self.lo) + self.lo
    }
}

pub fn minmax_normalize(values: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    let m = MinMax::new(lo, hi)?;
    Ok(values.iter().map(|&v| m.normalize(v)).collect())
}

pub fn minmax_denormalize(values: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    let m = MinMax::new(lo, hi)?;
    Ok(values.iter().map(|&v| m.denormalize(v)).collect())
}
