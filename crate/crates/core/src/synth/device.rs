use rand::seq::SliceRandom;
use rand::Rng;

use super::{apply_impairments, stream, ImpairmentProfile, IqWaveform};
use crate::error::Result;
use crate::rng;
use crate::scalar::Scalar;

/// Number of 100 Hz frequency-offset slots spanning [-50 kHz, +50 kHz].
/// Device ids below this bound receive pairwise distinct slots.
pub const DEVICE_SLOTS: u64 = 1001;

/// The fixed impairment signature of `device_id` in registry `registry_seed`.
pub fn device_profile(device_id: u64, registry_seed: u64) -> ImpairmentProfile {
    let mut slots: Vec<u64> = (0..DEVICE_SLOTS).collect();
    slots.shuffle(&mut rng::rng(registry_seed, &[stream::DEVICE_SLOT]));
    let slot = slots[(device_id % DEVICE_SLOTS) as usize];
    let mut rng = rng::rng(registry_seed, &[stream::DEVICE_PROFILE, device_id]);
    ImpairmentProfile {
        freq_offset_hz: -50_000.0 + 100.0 * slot as f64,
        iq_amp_imbalance: rng.random_range(0.9..=1.1),
        iq_phase_imbalance_rad: rng.random_range(-0.1..=0.1),
    }
}

/// Applies the device's signature to `base`. Fails only if the base sample
/// rate cannot represent a +-50 kHz offset.
pub fn synth_device_record<T: Scalar>(device_id: u64, base: &IqWaveform<T>, registry_seed: u64) -> Result<IqWaveform<T>> {
    apply_impairments(base, &device_profile(device_id, registry_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_linear_mod, ModScheme};

    #[test]
    fn same_id_is_bitwise_identical() {
        let base: IqWaveform<f32> = synth_linear_mod(ModScheme::Qpsk, 64, 4, 1e6, 1).unwrap();
        assert_eq!(synth_device_record(5, &base, 11).unwrap(), synth_device_record(5, &base, 11).unwrap());
    }

    #[test]
    fn neighbouring_ids_differ_in_phase_trajectory() {
        let base: IqWaveform<f64> = synth_linear_mod(ModScheme::Bpsk, 64, 4, 1e6, 1).unwrap();
        let a = synth_device_record(5, &base, 11).unwrap();
        let b = synth_device_record(6, &base, 11).unwrap();
        let (pa, pb) = (device_profile(5, 11), device_profile(6, 11));
        assert_ne!(pa.freq_offset_hz, pb.freq_offset_hz);
        // Rotation between the two outputs drifts at the offset difference.
        let last = base.len() - 1;
        let drift = (a.samples()[last] * a.samples()[0].conj()).arg() - (b.samples()[last] * b.samples()[0].conj()).arg();
        assert!(drift.abs() > 1e-6);
    }

    #[test]
    fn registry_of_198_devices_is_separated() {
        let profiles: Vec<ImpairmentProfile> = (0..198).map(|id| device_profile(id, 42)).collect();
        let mut offsets: Vec<f64> = profiles.iter().map(|p| p.freq_offset_hz).collect();
        offsets.sort_by(f64::total_cmp);
        let min_gap = offsets.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        assert!(min_gap >= 100.0 - 1e-9, "min gap {min_gap}");
        for p in &profiles {
            assert!(p.freq_offset_hz.abs() <= 50_000.0);
            assert!((0.9..=1.1).contains(&p.iq_amp_imbalance));
            assert!(p.iq_phase_imbalance_rad.abs() <= 0.1);
        }
    }
}
