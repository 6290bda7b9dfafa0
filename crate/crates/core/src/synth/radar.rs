use std::f64::consts::PI;
use std::ops::Range;
use std::str::FromStr;

use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{stream, IqWaveform};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

pub const BARKER_13: [i8; 13] = [1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadarKind {
    Rectangular,
    Lfm,
    Barker,
}

impl RadarKind {
    pub const ALL: [RadarKind; 3] = [RadarKind::Rectangular, RadarKind::Lfm, RadarKind::Barker];

    pub fn name(self) -> &'static str {
        match self {
            RadarKind::Rectangular => "rectangular",
            RadarKind::Lfm => "lfm",
            RadarKind::Barker => "barker",
        }
    }
}

impl FromStr for RadarKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rectangular" | "rect" => Ok(RadarKind::Rectangular),
            "lfm" => Ok(RadarKind::Lfm),
            "barker" => Ok(RadarKind::Barker),
            other => Err(Error::Config(format!("unsupported radar waveform {other:?}"))),
        }
    }
}

/// Pulse-train timing. All times are in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarParams {
    pub kind: RadarKind,
    pub n_p: u32,
    pub t_pw_us: f64,
    pub t_pri_us: f64,
    pub t_d_us: f64,
    /// Swept bandwidth of LFM pulses; ignored by the other kinds.
    pub lfm_bandwidth_hz: f64,
}

impl RadarParams {
    pub fn new(kind: RadarKind, n_p: u32, t_pw_us: f64, t_pri_us: f64, t_d_us: f64) -> Self {
        Self { kind, n_p, t_pw_us, t_pri_us, t_d_us, lfm_bandwidth_hz: 1.0e6 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_p < 1 {
            return Err(Error::Parameter("pulse count must be at least 1".into()));
        }
        if !(self.t_pw_us > 0.0 && self.t_pw_us < self.t_pri_us) {
            return Err(Error::Parameter(format!(
                "pulse width {} us must lie in (0, PRI {} us)",
                self.t_pw_us, self.t_pri_us
            )));
        }
        if !(self.t_d_us >= 0.0) {
            return Err(Error::Parameter(format!("pulse delay {} us must be non-negative", self.t_d_us)));
        }
        if !(self.lfm_bandwidth_hz.is_finite() && self.lfm_bandwidth_hz >= 0.0) {
            return Err(Error::Parameter("LFM bandwidth must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Time at which the last pulse ends, in microseconds.
    pub fn span_us(&self) -> f64 {
        self.t_d_us + f64::from(self.n_p - 1) * self.t_pri_us + self.t_pw_us
    }
}

#[inline]
fn to_index(t_us: f64, sample_rate_hz: f64) -> usize {
    // Tolerance absorbs representation error in products like 20us * 3.2MHz.
    (t_us * sample_rate_hz / 1e6 + 1e-9).floor() as usize
}

/// Half-open sample ranges occupied by each pulse, mapped by `floor(t * fs)`.
pub fn pulse_support(params: &RadarParams, sample_rate_hz: f64) -> Vec<Range<usize>> {
    (0..params.n_p)
        .map(|k| {
            let start_us = params.t_d_us + f64::from(k) * params.t_pri_us;
            to_index(start_us, sample_rate_hz)..to_index(start_us + params.t_pw_us, sample_rate_hz)
        })
        .collect()
}

/// Noiseless unit-envelope pulse train with a seed-drawn carrier phase.
pub fn synth_radar_pulse_train<T: Scalar>(
    params: &RadarParams,
    sample_rate_hz: f64,
    length: usize,
    seed: u64,
) -> Result<IqWaveform<T>> {
    params.validate()?;
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(Error::Parameter(format!("sample rate must be positive, got {sample_rate_hz}")));
    }
    let duration_us = length as f64 / sample_rate_hz * 1e6;
    if params.span_us() > duration_us + 1e-9 {
        return Err(Error::Parameter(format!(
            "pulse train spans {:.3} us but waveform lasts {duration_us:.3} us",
            params.span_us()
        )));
    }
    let phase0 = rng::rng(seed, &[stream::RADAR_PHASE]).random_range(0.0..2.0 * PI);
    let mut samples = vec![Complex::new(T::zero(), T::zero()); length];
    let t_pw_s = params.t_pw_us * 1e-6;
    for pulse in pulse_support(params, sample_rate_hz) {
        let width = pulse.len();
        for (offset, n) in pulse.clone().enumerate() {
            let tau = offset as f64 / sample_rate_hz;
            let phase = match params.kind {
                RadarKind::Rectangular => 0.0,
                RadarKind::Lfm => {
                    let b = params.lfm_bandwidth_hz;
                    2.0 * PI * (-0.5 * b * tau + 0.5 * b / t_pw_s * tau * tau)
                }
                RadarKind::Barker => {
                    let chip = offset * BARKER_13.len() / width;
                    if BARKER_13[chip] > 0 {
                        0.0
                    } else {
                        PI
                    }
                }
            };
            let s = Complex::from_polar(1.0, phase0 + phase);
            samples[n] = Complex::new(T::lit(s.re), T::lit(s.im));
        }
    }
    IqWaveform::new(samples, sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangular_support_matches_floor_index_arithmetic() {
        let p = RadarParams::new(RadarKind::Rectangular, 2, 10.0, 20.0, 0.0);
        let w: IqWaveform<f64> = synth_radar_pulse_train(&p, 3.2e6, 512, 1).unwrap();
        // floor(10us * 3.2MHz) = 32, floor(20us * 3.2MHz) = 64, floor(30us * 3.2MHz) = 96
        for (n, s) in w.samples().iter().enumerate() {
            let inside = (0..32).contains(&n) || (64..96).contains(&n);
            assert_eq!(s.norm() > 0.5, inside, "sample {n}");
        }
    }

    #[test]
    fn pulse_width_must_be_below_pri() {
        let p = RadarParams::new(RadarKind::Lfm, 2, 25.0, 20.0, 0.0);
        assert!(matches!(synth_radar_pulse_train::<f32>(&p, 3.2e6, 512, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn train_longer_than_waveform_rejected() {
        let p = RadarParams::new(RadarKind::Rectangular, 6, 16.0, 23.0, 10.0);
        assert!(synth_radar_pulse_train::<f32>(&p, 3.2e6, 256, 1).is_err());
        assert!(synth_radar_pulse_train::<f32>(&p, 3.2e6, 512, 1).is_ok());
    }

    #[test]
    fn envelope_is_binary_for_every_kind() {
        for kind in RadarKind::ALL {
            let p = RadarParams::new(kind, 4, 13.0, 21.0, 3.5);
            let w: IqWaveform<f64> = synth_radar_pulse_train(&p, 3.2e6, 512, 9).unwrap();
            for s in w.samples() {
                let m = s.norm();
                assert!(m.abs() < 1e-12 || (m - 1.0).abs() < 1e-12, "{kind:?} envelope {m}");
            }
        }
    }

    #[test]
    fn lfm_instantaneous_frequency_is_linear() {
        let mut p = RadarParams::new(RadarKind::Lfm, 1, 10.0, 20.0, 0.0);
        p.lfm_bandwidth_hz = 0.8e6;
        let fs = 3.2e6;
        let w: IqWaveform<f64> = synth_radar_pulse_train(&p, fs, 64, 2).unwrap();
        let s = &w.samples()[..32];
        let freqs: Vec<f64> = s.windows(2).map(|p| (p[1] * p[0].conj()).arg() * fs / (2.0 * PI)).collect();
        let steps: Vec<f64> = freqs.windows(2).map(|f| f[1] - f[0]).collect();
        let expected = p.lfm_bandwidth_hz / (p.t_pw_us * 1e-6) / fs;
        for d in steps {
            assert!((d - expected).abs() < 1e-3 * expected, "step {d} vs {expected}");
        }
        assert!(freqs[0] < 0.0 && *freqs.last().unwrap() > 0.0);
    }

    #[test]
    fn barker_chips_follow_code() {
        let p = RadarParams::new(RadarKind::Barker, 1, 13.0 * 10.0 / 3.2, 60.0, 0.0);
        let w: IqWaveform<f64> = synth_radar_pulse_train(&p, 3.2e6, 256, 4).unwrap();
        let reference = w.samples()[0];
        for (chip, code) in BARKER_13.iter().enumerate() {
            let s = w.samples()[chip * 10 + 5];
            let sign = (s * reference.conj()).re.signum() as i8;
            assert_eq!(sign, *code, "chip {chip}");
        }
    }

    #[test]
    fn radchar_style_extremes_fit_512_samples() {
        let p = RadarParams::new(RadarKind::Barker, 6, 16.0, 23.0, 10.0);
        assert!(synth_radar_pulse_train::<f32>(&p, 3.2e6, 512, 5).is_ok());
        let p = RadarParams::new(RadarKind::Rectangular, 2, 10.0, 17.0, 1.0);
        assert!(synth_radar_pulse_train::<f32>(&p, 3.2e6, 512, 5).is_ok());
    }
}
