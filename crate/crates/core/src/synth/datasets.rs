//! Builders for the synthetic corpora that stand in for real collections:
//! modulation recognition, radar characterization, radar mixtures and
//! device fingerprinting.

use std::f64::consts::PI;

use num_complex::Complex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    apply_awgn, mix_sources, modulate, random_symbols, synth_device_record, synth_radar_pulse_train, IqWaveform,
    MixtureSpec, ModScheme, RadarKind, RadarParams,
};
use crate::corpus::{IqRecord, SegmentationType};
use crate::error::Result;
use crate::rng;

const STREAM_MOD_DATASET: u64 = 0x4d4f_4444;
const STREAM_RADAR_DATASET: u64 = 0x5241_4444;
const STREAM_MIX_DATASET: u64 = 0x4d49_5844;
const STREAM_DEVICE_DATASET: u64 = 0x4445_5644;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationCorpusSpec {
    pub dataset_name: String,
    pub schemes: Vec<ModScheme>,
    pub records_per_class: usize,
    /// Candidate record lengths in complex samples; each must be a multiple of `sps`.
    pub lengths: Vec<usize>,
    pub sps: usize,
    pub sample_rate_hz: f64,
    /// SNR levels in dB, cycled through per class.
    pub snr_db: Vec<f64>,
    /// Rotate each record by a uniformly drawn carrier phase.
    pub random_phase: bool,
    pub seed: u64,
}

impl Default for ModulationCorpusSpec {
    fn default() -> Self {
        Self {
            dataset_name: "SynComm".into(),
            schemes: ModScheme::ALL.to_vec(),
            records_per_class: 100,
            lengths: vec![128],
            sps: 8,
            sample_rate_hz: 1e6,
            snr_db: vec![10.0],
            random_phase: false,
            seed: 0,
        }
    }
}

/// Records carry `modulation_type`, `snr_db` and `infer_class` (scheme index).
pub fn modulation_records(spec: &ModulationCorpusSpec) -> Result<Vec<IqRecord>> {
    let mut out = Vec::with_capacity(spec.schemes.len() * spec.records_per_class);
    for i in 0..spec.records_per_class {
        for (class, &scheme) in spec.schemes.iter().enumerate() {
            let id = (i * spec.schemes.len() + class) as u64;
            let mut r = rng::rng(spec.seed, &[STREAM_MOD_DATASET, id]);
            let len = spec.lengths[r.random_range(0..spec.lengths.len())];
            let snr = spec.snr_db[i % spec.snr_db.len()];
            let symbols = random_symbols(scheme, len / spec.sps, r.random());
            let clean: IqWaveform<f64> = modulate(scheme, &symbols, spec.sps, spec.sample_rate_hz)?;
            let clean = if spec.random_phase {
                let rot = Complex::from_polar(1.0, r.random_range(0.0..2.0 * PI));
                clean.map_samples(|s| s * rot)
            } else {
                clean
            };
            let noisy = apply_awgn(&clean, snr, r.random())?;
            let mut rec = IqRecord::new(noisy.cast(), spec.dataset_name.clone());
            rec.modulation_type = Some(scheme);
            rec.snr_db = Some(snr);
            rec.infer_class = Some(class as i64);
            out.push(rec);
        }
    }
    Ok(out)
}

/// Parameter ranges of a radar characterization corpus, in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarCorpusSpec {
    pub dataset_name: String,
    pub kinds: Vec<RadarKind>,
    pub records_per_class: usize,
    pub length: usize,
    pub sample_rate_hz: f64,
    pub n_p: (u32, u32),
    pub t_pw_us: (f64, f64),
    pub t_pri_us: (f64, f64),
    pub t_d_us: (f64, f64),
    pub lfm_bandwidth_hz: (f64, f64),
    pub snr_db: Vec<f64>,
    pub seed: u64,
}

impl Default for RadarCorpusSpec {
    fn default() -> Self {
        Self {
            dataset_name: "SynRadChar".into(),
            kinds: RadarKind::ALL.to_vec(),
            records_per_class: 100,
            length: 512,
            sample_rate_hz: 3.2e6,
            n_p: (2, 6),
            t_pw_us: (10.0, 16.0),
            t_pri_us: (17.0, 23.0),
            t_d_us: (1.0, 10.0),
            lfm_bandwidth_hz: (0.4e6, 1.2e6),
            snr_db: vec![10.0],
            seed: 0,
        }
    }
}

impl RadarCorpusSpec {
    pub fn draw_params(&self, kind: RadarKind, r: &mut impl Rng) -> RadarParams {
        let mut p = RadarParams::new(
            kind,
            r.random_range(self.n_p.0..=self.n_p.1),
            r.random_range(self.t_pw_us.0..=self.t_pw_us.1),
            r.random_range(self.t_pri_us.0..=self.t_pri_us.1),
            r.random_range(self.t_d_us.0..=self.t_d_us.1),
        );
        p.lfm_bandwidth_hz = r.random_range(self.lfm_bandwidth_hz.0..=self.lfm_bandwidth_hz.1);
        p
    }
}

/// Records carry the waveform kind as `infer_class` plus all four pulse
/// parameters.
pub fn radar_records(spec: &RadarCorpusSpec) -> Result<Vec<IqRecord>> {
    let mut out = Vec::with_capacity(spec.kinds.len() * spec.records_per_class);
    for i in 0..spec.records_per_class {
        for (class, &kind) in spec.kinds.iter().enumerate() {
            let id = (i * spec.kinds.len() + class) as u64;
            let mut r = rng::rng(spec.seed, &[STREAM_RADAR_DATASET, id]);
            let params = spec.draw_params(kind, &mut r);
            let snr = spec.snr_db[i % spec.snr_db.len()];
            let clean: IqWaveform<f64> = synth_radar_pulse_train(&params, spec.sample_rate_hz, spec.length, r.random())?;
            let noisy = apply_awgn(&clean, snr, r.random())?;
            let mut rec = IqRecord::new(noisy.cast(), spec.dataset_name.clone());
            rec.radar_waveform_type = Some(kind);
            rec.infer_class = Some(class as i64);
            rec.snr_db = Some(snr);
            rec.num_pulses = Some(i64::from(params.n_p));
            rec.pulse_width_us = Some(params.t_pw_us);
            rec.pri_us = Some(params.t_pri_us);
            rec.pulse_time_delay_us = Some(params.t_d_us);
            rec.band_width_hz = (kind == RadarKind::Lfm).then_some(params.lfm_bandwidth_hz);
            rec.radar_segmentation_type = Some(SegmentationType::Pulse);
            out.push(rec);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureCorpusSpec {
    pub dataset_name: String,
    pub kinds: Vec<RadarKind>,
    pub count: usize,
    pub length: usize,
    pub sample_rate_hz: f64,
    pub snr_db: f64,
    /// Probability that a mixture holds two sources rather than one.
    pub pair_probability: f64,
    /// Pulse timing ranges used for every source.
    pub radar: RadarCorpusSpec,
    pub seed: u64,
}

impl Default for MixtureCorpusSpec {
    fn default() -> Self {
        Self {
            dataset_name: "SynRadarMix".into(),
            kinds: RadarKind::ALL.to_vec(),
            count: 2000,
            length: 1024,
            sample_rate_hz: 5e6,
            snr_db: 12.0,
            pair_probability: 1.0,
            radar: RadarCorpusSpec {
                n_p: (2, 5),
                t_pw_us: (10.0, 16.0),
                t_pri_us: (30.0, 40.0),
                t_d_us: (1.0, 20.0),
                ..RadarCorpusSpec::default()
            },
            seed: 0,
        }
    }
}

/// A mixture record and its noiseless per-source references.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub record: IqRecord,
    pub references: Vec<IqWaveform<f32>>,
}

pub fn mixture_records(spec: &MixtureCorpusSpec) -> Result<Vec<MixtureSample>> {
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut r = rng::rng(spec.seed, &[STREAM_MIX_DATASET, i as u64]);
        let source_count = if r.random_bool(spec.pair_probability.clamp(0.0, 1.0)) { 2 } else { 1 };
        let kinds: Vec<RadarKind> = (0..source_count).map(|_| spec.kinds[r.random_range(0..spec.kinds.len())]).collect();
        let sources = kinds
            .iter()
            .map(|&k| {
                let p = spec.radar.draw_params(k, &mut r);
                synth_radar_pulse_train::<f64>(&p, spec.sample_rate_hz, spec.length, r.random())
            })
            .collect::<Result<Vec<_>>>()?;
        let gains: Vec<f64> = (0..source_count).map(|_| r.random_range(0.5..=1.0)).collect();
        let mix = mix_sources(
            &sources,
            &MixtureSpec { source_count, source_kinds: kinds.clone(), snr_db: spec.snr_db, gains },
            r.random(),
        )?;
        let mut rec = IqRecord::new(mix.mixture.cast(), spec.dataset_name.clone());
        rec.snr_db = Some(spec.snr_db);
        rec.infer_class = Some(source_count as i64);
        rec.radar_waveform_type = Some(kinds[0]);
        rec.radar_segmentation_type = Some(SegmentationType::Interference);
        out.push(MixtureSample { record: rec, references: mix.references.iter().map(IqWaveform::cast).collect() });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceCorpusSpec {
    pub dataset_name: String,
    pub devices: u64,
    pub records_per_device: usize,
    pub length: usize,
    pub sample_rate_hz: f64,
    pub snr_db: f64,
    pub registry_seed: u64,
    pub seed: u64,
}

impl Default for DeviceCorpusSpec {
    fn default() -> Self {
        Self {
            dataset_name: "SynDevice".into(),
            devices: 8,
            records_per_device: 50,
            length: 256,
            sample_rate_hz: 1e6,
            snr_db: 20.0,
            registry_seed: 0,
            seed: 0,
        }
    }
}

/// QPSK bursts passed through each device's fixed impairment signature.
pub fn device_records(spec: &DeviceCorpusSpec) -> Result<Vec<IqRecord>> {
    let mut out = Vec::new();
    for i in 0..spec.records_per_device {
        for device in 0..spec.devices {
            let mut r = rng::rng(spec.seed, &[STREAM_DEVICE_DATASET, device, i as u64]);
            let base: IqWaveform<f64> =
                modulate(ModScheme::Qpsk, &random_symbols(ModScheme::Qpsk, spec.length / 4, r.random()), 4, spec.sample_rate_hz)?;
            let impaired = synth_device_record(device, &base, spec.registry_seed)?;
            let noisy = apply_awgn(&impaired, spec.snr_db, r.random())?;
            let mut rec = IqRecord::new(noisy.cast(), spec.dataset_name.clone());
            rec.device_id = Some(device as i64);
            rec.transmission_id = Some(i as i64);
            rec.infer_class = Some(device as i64);
            rec.snr_db = Some(spec.snr_db);
            rec.modulation_type = Some(ModScheme::Qpsk);
            out.push(rec);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modulation_corpus_is_balanced_and_labelled() {
        let spec = ModulationCorpusSpec { records_per_class: 5, lengths: vec![128, 256], ..Default::default() };
        let recs = modulation_records(&spec).unwrap();
        assert_eq!(recs.len(), 20);
        for c in 0..4 {
            assert_eq!(recs.iter().filter(|r| r.infer_class == Some(c)).count(), 5);
        }
        assert!(recs.iter().all(|r| r.len() % 8 == 0 && r.snr_db == Some(10.0)));
        assert_eq!(recs, modulation_records(&spec).unwrap());
    }

    #[test]
    fn radar_corpus_parameters_stay_in_range() {
        let spec = RadarCorpusSpec { records_per_class: 20, ..Default::default() };
        for r in radar_records(&spec).unwrap() {
            assert!((2..=6).contains(&r.num_pulses.unwrap()));
            assert!((10.0..=16.0).contains(&r.pulse_width_us.unwrap()));
            assert!((17.0..=23.0).contains(&r.pri_us.unwrap()));
            assert!((1.0..=10.0).contains(&r.pulse_time_delay_us.unwrap()));
            assert_eq!(r.len(), 512);
        }
    }

    #[test]
    fn mixtures_carry_two_references() {
        let spec = MixtureCorpusSpec { count: 6, ..Default::default() };
        for m in mixture_records(&spec).unwrap() {
            assert_eq!(m.references.len(), 2);
            assert_eq!(m.record.len(), 1024);
            assert_eq!(m.record.sampling_rate(), 5e6);
        }
    }

    #[test]
    fn device_corpus_labels_devices() {
        let spec = DeviceCorpusSpec { devices: 3, records_per_device: 2, ..Default::default() };
        let recs = device_records(&spec).unwrap();
        assert_eq!(recs.len(), 6);
        assert_eq!(recs[4].device_id, Some(1));
    }
}
