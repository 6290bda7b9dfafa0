//! Synthetic IQ generation: linear modulations, radar pulse trains, channel
//! effects, device fingerprints and source mixtures.
//!
//! Every seeded operation is a pure function of its arguments.

mod channel;
pub mod datasets;
mod device;
mod mixture;
mod modulation;
mod radar;
mod waveform;

pub use channel::{apply_awgn, apply_awgn_parts, apply_impairments, invert_impairments, ImpairmentProfile};
pub use device::{device_profile, synth_device_record, DEVICE_SLOTS};
pub use mixture::{mix_sources, Mixture, MixtureSpec};
pub use modulation::{modulate, random_symbols, synth_linear_mod, ModScheme};
pub use radar::{pulse_support, synth_radar_pulse_train, RadarKind, RadarParams, BARKER_13};
pub use waveform::IqWaveform;

/// Random stream identifiers, one per generator, so seeds never collide
/// between operations that share a user seed.
pub(crate) mod stream {
    pub const SYMBOLS: u64 = 0x5359_4D42;
    pub const RADAR_PHASE: u64 = 0x5241_4450;
    pub const AWGN: u64 = 0x4157_474E;
    pub const DEVICE_SLOT: u64 = 0x4445_5653;
    pub const DEVICE_PROFILE: u64 = 0x4445_5650;
    pub const MIXTURE: u64 = 0x4D49_5854;
}
