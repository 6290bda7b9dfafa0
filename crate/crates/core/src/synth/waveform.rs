use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One complex baseband signal `s[n] = I[n] + jQ[n]` sampled at `sample_rate_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct IqWaveform<T = f32> {
    samples: Vec<Complex<T>>,
    sample_rate_hz: f64,
}

impl<T: Scalar> IqWaveform<T> {
    pub fn new(samples: Vec<Complex<T>>, sample_rate_hz: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("waveform must hold at least one sample".into()));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::Parameter(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        if let Some(n) = samples.iter().position(|s| !(s.re.is_finite() && s.im.is_finite())) {
            return Err(Error::Numeric(format!("non-finite sample at index {n}")));
        }
        Ok(Self { samples, sample_rate_hz })
    }

    /// Builds a waveform from interleaved `[i0, q0, i1, q1, ...]` values.
    pub fn from_interleaved(values: &[T], sample_rate_hz: f64) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::Shape(format!("odd interleaved length {}", values.len())));
        }
        let samples = values.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect();
        Self::new(samples, sample_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Complex<T>] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex<T>> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Mean `|s[n]|^2`, accumulated in double precision.
    pub fn power(&self) -> f64 {
        let sum: f64 = self.samples.iter().map(|s| s.re.as_f64().powi(2) + s.im.as_f64().powi(2)).sum();
        sum / self.samples.len() as f64
    }

    /// Largest absolute value over both rails.
    pub fn peak_component(&self) -> T {
        self.samples.iter().fold(T::zero(), |m, s| m.max(s.re.abs()).max(s.im.abs()))
    }

    pub fn interleaved(&self) -> Vec<T> {
        self.samples.iter().flat_map(|s| [s.re, s.im]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> IqWaveform<U> {
        IqWaveform {
            samples: self.samples.iter().map(|s| Complex::new(U::lit(s.re.as_f64()), U::lit(s.im.as_f64()))).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub(crate) fn from_parts_unchecked(samples: Vec<Complex<T>>, sample_rate_hz: f64) -> Self {
        Self { samples, sample_rate_hz }
    }

    pub(crate) fn map_samples(&self, f: impl FnMut(&Complex<T>) -> Complex<T>) -> Self {
        Self { samples: self.samples.iter().map(f).collect(), sample_rate_hz: self.sample_rate_hz }
    }
}
