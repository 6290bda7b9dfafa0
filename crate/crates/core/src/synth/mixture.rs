use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::{apply_awgn, stream, IqWaveform, RadarKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub source_count: usize,
    pub source_kinds: Vec<RadarKind>,
    pub snr_db: f64,
    pub gains: Vec<f64>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.source_count) {
            return Err(Error::Parameter(format!("source count {} not in {{1, 2}}", self.source_count)));
        }
        if self.source_kinds.len() != self.source_count || self.gains.len() != self.source_count {
            return Err(Error::Shape(format!(
                "source count {} but {} kinds and {} gains",
                self.source_count,
                self.source_kinds.len(),
                self.gains.len()
            )));
        }
        if self.gains.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::Parameter("mixing gains must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture<T> {
    pub mixture: IqWaveform<T>,
    /// Noiseless scaled sources, `gains[k] * sources[k]`.
    pub references: Vec<IqWaveform<T>>,
}

pub fn mix_sources<T: Scalar>(sources: &[IqWaveform<T>], spec: &MixtureSpec, seed: u64) -> Result<Mixture<T>> {
    spec.validate()?;
    if sources.len() != spec.source_count {
        return Err(Error::Shape(format!("{} sources supplied for source count {}", sources.len(), spec.source_count)));
    }
    let (len, fs) = (sources[0].len(), sources[0].sample_rate_hz());
    if sources.iter().any(|s| s.len() != len || s.sample_rate_hz() != fs) {
        return Err(Error::Shape("mixture sources must share length and sample rate".into()));
    }
    let references: Vec<IqWaveform<T>> = sources
        .iter()
        .zip(&spec.gains)
        .map(|(s, &g)| {
            let g = T::lit(g);
            s.map_samples(|x| x * g)
        })
        .collect();
    let mut sum = vec![Complex::new(T::zero(), T::zero()); len];
    for r in &references {
        for (acc, x) in sum.iter_mut().zip(r.samples()) {
            *acc += x;
        }
    }
    let clean = IqWaveform::from_parts_unchecked(sum, fs);
    let mixture = apply_awgn(&clean, spec.snr_db, crate::rng::derive(seed, &[stream::MIXTURE]))?;
    Ok(Mixture { mixture, references })
}
