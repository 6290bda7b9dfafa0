//! The desk-scale setup: a small mixed corpus and the settings that train
//! the tiny preset on it in minutes on one core.

use serde::{Deserialize, Serialize};

use super::pretrain::{Dataset, PretrainConfig};
use crate::corpus::{normalize_iq, IqRecord, NormMode};
use crate::error::{Error, Result};
use crate::net::{ModelConfig, Preset};
use crate::synth::datasets::{mixture_records, modulation_records, radar_records, MixtureCorpusSpec, MixtureSample, ModulationCorpusSpec, RadarCorpusSpec};
use crate::synth::{IqWaveform, ModScheme, RadarKind};

/// Symbols span two patches, so masked patches are partly predictable from
/// their neighbours.
pub const TOY_SPS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpus {
    pub modulation: ModulationCorpusSpec,
    pub radar: RadarCorpusSpec,
    /// Records per dataset held out for evaluation.
    pub holdout: usize,
}

impl ToyCorpus {
    /// Four modulations and two radar waveforms, 2,000 records in total.
    pub fn new(seed: u64) -> Self {
        Self {
            modulation: ModulationCorpusSpec {
                dataset_name: "ToyComm".into(),
                schemes: ModScheme::ALL.to_vec(),
                records_per_class: 300,
                lengths: vec![128, 256],
                sps: TOY_SPS,
                snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
                seed,
                ..ModulationCorpusSpec::default()
            },
            radar: RadarCorpusSpec {
                dataset_name: "ToyRadar".into(),
                kinds: vec![RadarKind::Rectangular, RadarKind::Lfm],
                records_per_class: 400,
                seed: seed.wrapping_add(1),
                ..RadarCorpusSpec::default()
            },
            holdout: 48,
        }
    }

    pub fn records(&self) -> Result<Vec<Vec<IqRecord>>> {
        Ok(vec![modulation_records(&self.modulation)?, radar_records(&self.radar)?])
    }

    /// Normalized training and holdout sets, one per source.
    pub fn datasets(&self) -> Result<(Vec<Dataset>, Vec<Dataset>)> {
        split_holdout(&self.records()?, self.holdout)
    }
}

/// Normalizes each dataset and moves its last `holdout` records aside.
pub fn split_holdout(sets: &[Vec<IqRecord>], holdout: usize) -> Result<(Vec<Dataset>, Vec<Dataset>)> {
    let mut train = Vec::with_capacity(sets.len());
    let mut held = Vec::with_capacity(sets.len());
    for recs in sets {
        let name = recs.first().map(|r| r.dataset_name.clone()).unwrap_or_default();
        if recs.len() <= holdout {
            return Err(Error::InsufficientData(format!("dataset {name:?} has {} records, holdout needs {holdout}", recs.len())));
        }
        let mut ws: Vec<IqWaveform<f32>> = recs.iter().map(|r| normalize_iq(&r.waveform, NormMode::Component)).collect();
        let tail = ws.split_off(ws.len() - holdout);
        train.push(Dataset::new(name.clone(), ws));
        held.push(Dataset::new(name, tail));
    }
    Ok((train, held))
}

/// Tiny preset, one 512-token pack per step, 2,000 steps.
pub fn toy_pretrain_config(seed: u64) -> PretrainConfig {
    PretrainConfig {
        model: ModelConfig::preset(Preset::Tiny),
        steps: 2000,
        capacity: 512,
        packs_per_step: 1,
        lr: 2e-3,
        warmup_fraction: 0.1,
        eval_every: 400,
        seed,
        workers: 1,
        deterministic: true,
        ..PretrainConfig::default()
    }
}

/// Four-class modulation task at a single SNR, for probing.
pub fn modulation_task(records_per_class: usize, snr_db: f64, seed: u64) -> ModulationCorpusSpec {
    ModulationCorpusSpec {
        dataset_name: "ToyCommTask".into(),
        records_per_class,
        lengths: vec![128],
        sps: TOY_SPS,
        snr_db: vec![snr_db],
        seed,
        ..ModulationCorpusSpec::default()
    }
}

/// Three-waveform radar characterization set at a single SNR.
pub fn radar_task(records_per_class: usize, snr_db: f64, seed: u64) -> RadarCorpusSpec {
    RadarCorpusSpec { dataset_name: "ToyRadChar".into(), records_per_class, snr_db: vec![snr_db], seed, ..RadarCorpusSpec::default() }
}

/// Two-source radar mixtures at 12 dB, 256 samples with one to three pulses
/// per source.
pub fn mixture_task(count: usize, seed: u64) -> MixtureCorpusSpec {
    MixtureCorpusSpec {
        count,
        length: 256,
        sample_rate_hz: 3.2e6,
        radar: RadarCorpusSpec { n_p: (1, 3), t_pw_us: (4.0, 10.0), t_pri_us: (20.0, 25.0), t_d_us: (1.0, 10.0), ..RadarCorpusSpec::default() },
        seed,
        ..MixtureCorpusSpec::default()
    }
}

/// Reference records for `samples`, each tagged with its mixture index in
/// `transmission_id` so they can be regrouped after a round trip through a
/// corpus file.
pub fn reference_records(samples: &[MixtureSample]) -> Vec<IqRecord> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.references.iter().map(move |w| {
                let mut r = IqRecord::new(w.clone(), format!("{}Refs", s.record.dataset_name));
                r.transmission_id = Some(i as i64);
                r
            })
        })
        .collect()
}

/// Inverse of splitting samples into mixture and reference records.
pub fn regroup_mixtures(mixtures: Vec<IqRecord>, references: &[IqRecord]) -> Result<Vec<MixtureSample>> {
    let mut out: Vec<MixtureSample> = mixtures.into_iter().map(|record| MixtureSample { record, references: Vec::new() }).collect();
    for r in references {
        let i = r
            .transmission_id
            .and_then(|i| usize::try_from(i).ok())
            .filter(|&i| i < out.len())
            .ok_or_else(|| Error::Contract(format!("reference record points at mixture {:?}", r.transmission_id)))?;
        out[i].references.push(r.waveform.clone());
    }
    if let Some(i) = out.iter().position(|s| s.references.is_empty()) {
        return Err(Error::InsufficientData(format!("mixture {i} has no reference")));
    }
    Ok(out)
}

pub fn toy_mixtures(count: usize, seed: u64) -> Result<Vec<MixtureSample>> {
    mixture_records(&mixture_task(count, seed))
}
