use std::f64::consts::PI;

use num_complex::Complex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{stream, IqWaveform};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Adds circular complex white Gaussian noise at `snr_db` relative to the
/// input's own empirical power. Returns `(noisy, noise)` with
/// `noisy[n] = input[n] + noise[n]` evaluated once per sample.
pub fn apply_awgn_parts<T: Scalar>(w: &IqWaveform<T>, snr_db: f64, seed: u64) -> Result<(IqWaveform<T>, IqWaveform<T>)> {
    let power = w.power();
    if power <= 0.0 {
        return Err(Error::Degenerate("cannot set SNR against a zero-power signal".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Parameter(format!("SNR must be finite, got {snr_db}")));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut rng = rng::rng(seed, &[stream::AWGN]);
    let noise: Vec<Complex<T>> = (0..w.len())
        .map(|_| Complex::new(T::lit(normal.sample(&mut rng)), T::lit(normal.sample(&mut rng))))
        .collect();
    let noisy = w.samples().iter().zip(&noise).map(|(s, n)| s + n).collect();
    Ok((
        IqWaveform::from_parts_unchecked(noisy, w.sample_rate_hz()),
        IqWaveform::from_parts_unchecked(noise, w.sample_rate_hz()),
    ))
}

pub fn apply_awgn<T: Scalar>(w: &IqWaveform<T>, snr_db: f64, seed: u64) -> Result<IqWaveform<T>> {
    apply_awgn_parts(w, snr_db, seed).map(|(noisy, _)| noisy)
}

/// Static front-end impairments: carrier frequency offset plus receiver IQ
/// gain/phase imbalance on the Q rail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentProfile {
    pub freq_offset_hz: f64,
    /// Linear gain of the Q rail relative to I.
    pub iq_amp_imbalance: f64,
    pub iq_phase_imbalance_rad: f64,
}

impl ImpairmentProfile {
    pub const IDENTITY: ImpairmentProfile =
        ImpairmentProfile { freq_offset_hz: 0.0, iq_amp_imbalance: 1.0, iq_phase_imbalance_rad: 0.0 };

    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        if !(self.freq_offset_hz.abs() < sample_rate_hz / 2.0) {
            return Err(Error::Aliasing(format!(
                "|offset| {} Hz must stay below fs/2 = {} Hz",
                self.freq_offset_hz.abs(),
                sample_rate_hz / 2.0
            )));
        }
        if !(self.iq_amp_imbalance > 0.0 && self.iq_amp_imbalance.is_finite()) {
            return Err(Error::Parameter(format!("amplitude imbalance {} must be positive", self.iq_amp_imbalance)));
        }
        if !(self.iq_phase_imbalance_rad.abs() < PI / 2.0) {
            return Err(Error::Parameter(format!(
                "phase imbalance {} rad makes the Q rail non-invertible",
                self.iq_phase_imbalance_rad
            )));
        }
        Ok(())
    }
}

/// `out[n] = G(exp(j 2 pi df n / fs) * in[n])` with
/// `G(I + jQ) = I + j g (Q cos(phi) - I sin(phi))`.
pub fn apply_impairments<T: Scalar>(w: &IqWaveform<T>, p: &ImpairmentProfile) -> Result<IqWaveform<T>> {
    p.validate(w.sample_rate_hz())?;
    let step = 2.0 * PI * p.freq_offset_hz / w.sample_rate_hz();
    let (sin_phi, cos_phi) = p.iq_phase_imbalance_rad.sin_cos();
    let g = p.iq_amp_imbalance;
    let samples = w
        .samples()
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let x = Complex::new(s.re.as_f64(), s.im.as_f64()) * Complex::from_polar(1.0, step * n as f64);
            let q = g * (x.im * cos_phi - x.re * sin_phi);
            Complex::new(T::lit(x.re), T::lit(q))
        })
        .collect();
    Ok(IqWaveform::from_parts_unchecked(samples, w.sample_rate_hz()))
}

/// Inverse of [`apply_impairments`] for a valid profile.
pub fn invert_impairments<T: Scalar>(w: &IqWaveform<T>, p: &ImpairmentProfile) -> Result<IqWaveform<T>> {
    p.validate(w.sample_rate_hz())?;
    let step = 2.0 * PI * p.freq_offset_hz / w.sample_rate_hz();
    let (sin_phi, cos_phi) = p.iq_phase_imbalance_rad.sin_cos();
    let g = p.iq_amp_imbalance;
    let samples = w
        .samples()
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let i = s.re.as_f64();
            let q = (s.im.as_f64() / g + i * sin_phi) / cos_phi;
            let x = Complex::new(i, q) * Complex::from_polar(1.0, -step * n as f64);
            Complex::new(T::lit(x.re), T::lit(x.im))
        })
        .collect();
    Ok(IqWaveform::from_parts_unchecked(samples, w.sample_rate_hz()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_linear_mod, ModScheme};

    fn tone(n: usize, fs: f64) -> IqWaveform<f64> {
        let samples = (0..n).map(|k| Complex::from_polar(1.0, 2.0 * PI * 0.013 * k as f64)).collect();
        IqWaveform::new(samples, fs).unwrap()
    }

    #[test]
    fn huge_snr_leaves_signal_intact() {
        let w = tone(512, 1e6);
        let out = apply_awgn(&w, 200.0, 3).unwrap();
        for (a, b) in w.samples().iter().zip(out.samples()) {
            assert!((a - b).norm() <= 1e-9 * a.norm());
        }
    }

    #[test]
    fn zero_db_noise_power_matches_signal_power() {
        let w = tone(4096, 1e6);
        let (_, noise) = apply_awgn_parts(&w, 0.0, 1).unwrap();
        let ratio = noise.power() / w.power();
        assert!((0.89..=1.12).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn measured_snr_tracks_request() {
        let w: IqWaveform<f64> = synth_linear_mod(ModScheme::Qpsk, 256, 8, 1e6, 2).unwrap();
        for (seed, snr) in [(1, -3.0), (2, 6.0), (3, 12.0), (4, 20.0)] {
            let (_, noise) = apply_awgn_parts(&w, snr, seed).unwrap();
            let measured = 10.0 * (w.power() / noise.power()).log10();
            assert!((measured - snr).abs() < 0.5, "{snr} dB measured {measured}");
        }
    }

    #[test]
    fn noisy_is_signal_plus_noise_bitwise() {
        let w: IqWaveform<f32> = synth_linear_mod(ModScheme::Psk8, 128, 4, 1e6, 5).unwrap();
        let (noisy, noise) = apply_awgn_parts(&w, 12.0, 8).unwrap();
        for ((s, n), y) in w.samples().iter().zip(noise.samples()).zip(noisy.samples()) {
            assert_eq!((s + n).re.to_bits(), y.re.to_bits());
            assert_eq!((s + n).im.to_bits(), y.im.to_bits());
        }
        assert_eq!(noisy, apply_awgn(&w, 12.0, 8).unwrap());
    }

    #[test]
    fn zero_power_is_degenerate() {
        let w = IqWaveform::<f32>::new(vec![Complex::new(0.0, 0.0); 16], 1e6).unwrap();
        assert!(matches!(apply_awgn(&w, 10.0, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn identity_profile_is_exact() {
        let w: IqWaveform<f32> = synth_linear_mod(ModScheme::Qam16, 32, 4, 1e6, 5).unwrap();
        assert_eq!(apply_impairments(&w, &ImpairmentProfile::IDENTITY).unwrap(), w);
    }

    #[test]
    fn quarter_rate_offset_rotates_by_quarter_turns() {
        let fs = 1e6;
        let w = IqWaveform::new(vec![Complex::new(1.0f64, 0.0); 8], fs).unwrap();
        let p = ImpairmentProfile { freq_offset_hz: fs / 4.0, ..ImpairmentProfile::IDENTITY };
        let out = apply_impairments(&w, &p).unwrap();
        let cycle = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        for (n, s) in out.samples().iter().enumerate() {
            let (i, q) = cycle[n % 4];
            assert!((s.re - i).abs() < 1e-12 && (s.im - q).abs() < 1e-12, "n={n} got {s}");
        }
    }

    #[test]
    fn impairments_invert() {
        let w: IqWaveform<f64> = synth_linear_mod(ModScheme::Qpsk, 64, 4, 1e6, 5).unwrap();
        let p = ImpairmentProfile { freq_offset_hz: 50e3, iq_amp_imbalance: 1.07, iq_phase_imbalance_rad: -0.08 };
        let back = invert_impairments(&apply_impairments(&w, &p).unwrap(), &p).unwrap();
        for (a, b) in w.samples().iter().zip(back.samples()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn offset_beyond_nyquist_is_aliasing_error() {
        let w = tone(16, 1e6);
        let p = ImpairmentProfile { freq_offset_hz: 0.5e6, ..ImpairmentProfile::IDENTITY };
        assert!(matches!(apply_impairments(&w, &p), Err(Error::Aliasing(_))));
    }
}
