use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::str::FromStr;

use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{stream, IqWaveform};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Linear modulation schemes. Pulse shaping is rectangular: every symbol is
/// held for `sps` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModScheme {
    Bpsk,
    Qpsk,
    Psk8,
    Qam16,
}

impl ModScheme {
    pub const ALL: [ModScheme; 4] = [ModScheme::Bpsk, ModScheme::Qpsk, ModScheme::Psk8, ModScheme::Qam16];

    pub fn order(self) -> usize {
        match self {
            ModScheme::Bpsk => 2,
            ModScheme::Qpsk => 4,
            ModScheme::Psk8 => 8,
            ModScheme::Qam16 => 16,
        }
    }

    /// Constellation with unit average energy.
    pub fn constellation(self) -> Vec<Complex<f64>> {
        match self {
            ModScheme::Bpsk => vec![Complex::new(1.0, 0.0), Complex::new(-1.0, 0.0)],
            ModScheme::Qpsk => (0..4)
                .map(|k| {
                    let i = if k & 1 == 0 { 1.0 } else { -1.0 };
                    let q = if k & 2 == 0 { 1.0 } else { -1.0 };
                    Complex::new(i * FRAC_1_SQRT_2, q * FRAC_1_SQRT_2)
                })
                .collect(),
            ModScheme::Psk8 => (0..8).map(|k| Complex::from_polar(1.0, 2.0 * PI * k as f64 / 8.0)).collect(),
            ModScheme::Qam16 => {
                let levels = [-3.0, -1.0, 1.0, 3.0];
                let norm = 10f64.sqrt();
                (0..16).map(|k| Complex::new(levels[k % 4] / norm, levels[k / 4] / norm)).collect()
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModScheme::Bpsk => "bpsk",
            ModScheme::Qpsk => "qpsk",
            ModScheme::Psk8 => "psk8",
            ModScheme::Qam16 => "qam16",
        }
    }
}

impl FromStr for ModScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bpsk" => Ok(ModScheme::Bpsk),
            "qpsk" => Ok(ModScheme::Qpsk),
            "psk8" | "8psk" => Ok(ModScheme::Psk8),
            "qam16" | "16qam" => Ok(ModScheme::Qam16),
            other => Err(Error::Config(format!("unsupported modulation scheme {other:?}"))),
        }
    }
}

/// The symbol index sequence `synth_linear_mod` draws for `seed`.
pub fn random_symbols(scheme: ModScheme, num_symbols: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::rng(seed, &[stream::SYMBOLS]);
    (0..num_symbols).map(|_| rng.random_range(0..scheme.order())).collect()
}

/// Maps symbol indices onto the constellation, holding each for `sps` samples.
pub fn modulate<T: Scalar>(scheme: ModScheme, symbols: &[usize], sps: usize, sample_rate_hz: f64) -> Result<IqWaveform<T>> {
    if symbols.is_empty() || sps == 0 {
        return Err(Error::Parameter(format!(
            "need at least one symbol and one sample per symbol (symbols={}, sps={sps})",
            symbols.len()
        )));
    }
    let points = scheme.constellation();
    let mut samples = Vec::with_capacity(symbols.len() * sps);
    for &s in symbols {
        let p = points
            .get(s)
            .ok_or_else(|| Error::Parameter(format!("symbol {s} outside {} constellation", scheme.name())))?;
        let c = Complex::new(T::lit(p.re), T::lit(p.im));
        samples.extend(std::iter::repeat_n(c, sps));
    }
    IqWaveform::new(samples, sample_rate_hz)
}

pub fn synth_linear_mod<T: Scalar>(
    scheme: ModScheme,
    num_symbols: usize,
    sps: usize,
    sample_rate_hz: f64,
    seed: u64,
) -> Result<IqWaveform<T>> {
    modulate(scheme, &random_symbols(scheme, num_symbols, seed), sps, sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpsk_bit_zero_is_positive_real() {
        let w: IqWaveform<f64> = modulate(ModScheme::Bpsk, &[0], 4, 1e6).unwrap();
        assert_eq!(w.len(), 4);
        assert!(w.samples().iter().all(|s| *s == Complex::new(1.0, 0.0)));
    }

    #[test]
    fn qpsk_canonical_short_length() {
        let w: IqWaveform<f32> = synth_linear_mod(ModScheme::Qpsk, 16, 8, 1e6, 7).unwrap();
        assert_eq!(w.len(), 128);
        let again: IqWaveform<f32> = synth_linear_mod(ModScheme::Qpsk, 16, 8, 1e6, 7).unwrap();
        assert_eq!(w, again);
    }

    #[test]
    fn constellations_have_unit_energy() {
        for scheme in ModScheme::ALL {
            let pts = scheme.constellation();
            let e: f64 = pts.iter().map(|p| p.norm_sqr()).sum::<f64>() / pts.len() as f64;
            assert!((e - 1.0).abs() < 1e-12, "{scheme:?} energy {e}");
        }
    }

    #[test]
    fn qam16_nearest_point_demodulation_recovers_symbols() {
        // Oracle: integrate each symbol period, then pick the nearest grid
        // point of an independently written 16-QAM table.
        let (sps, n) = (2, 64);
        let w: IqWaveform<f64> = synth_linear_mod(ModScheme::Qam16, n, sps, 1e6, 3).unwrap();
        let sent = random_symbols(ModScheme::Qam16, n, 3);
        let grid: Vec<(usize, f64, f64)> = (0..16)
            .map(|k| {
                let lv = |j: usize| (2.0 * j as f64 - 3.0) / 10f64.sqrt();
                (k, lv(k % 4), lv(k / 4))
            })
            .collect();
        for (sym, chunk) in w.samples().chunks(sps).enumerate() {
            let i = chunk.iter().map(|c| c.re).sum::<f64>() / sps as f64;
            let q = chunk.iter().map(|c| c.im).sum::<f64>() / sps as f64;
            let best = grid
                .iter()
                .min_by(|a, b| {
                    let da = (a.1 - i).powi(2) + (a.2 - q).powi(2);
                    let db = (b.1 - i).powi(2) + (b.2 - q).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap()
                .0;
            assert_eq!(best, sent[sym], "symbol {sym}");
        }
    }

    #[test]
    fn unknown_scheme_is_config_error() {
        assert!(matches!("ofdm".parse::<ModScheme>(), Err(Error::Config(_))));
        assert_eq!("QAM16".parse::<ModScheme>().unwrap(), ModScheme::Qam16);
    }

    #[test]
    fn zero_symbols_rejected() {
        assert!(synth_linear_mod::<f32>(ModScheme::Bpsk, 0, 4, 1e6, 1).is_err());
        assert!(synth_linear_mod::<f32>(ModScheme::Bpsk, 4, 0, 1e6, 1).is_err());
    }
}
