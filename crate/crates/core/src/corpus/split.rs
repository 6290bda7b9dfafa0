use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::emr1::CorpusManifest;
use super::schema::{Attribute, IqRecord};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    /// Records whose SNR is known and not strictly above this are dropped.
    pub min_snr_db: Option<f64>,
    pub stratify_by: Option<Attribute>,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        Self { train_fraction, seed, min_snr_db: None, stratify_by: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction {} must lie in (0, 1)", self.train_fraction)));
        }
        Ok(())
    }
}

/// Per-record facts the partitioner needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordMeta {
    pub index: usize,
    pub snr_db: Option<f64>,
    pub stratum: Option<String>,
}

impl RecordMeta {
    pub fn from_manifest(manifest: &CorpusManifest) -> Vec<RecordMeta> {
        manifest
            .records
            .iter()
            .enumerate()
            .map(|(index, r)| RecordMeta { index, snr_db: r.snr_db, stratum: None })
            .collect()
    }

    pub fn from_records(records: &[IqRecord], stratify_by: Option<Attribute>) -> Vec<RecordMeta> {
        records
            .iter()
            .enumerate()
            .map(|(index, r)| RecordMeta {
                index,
                snr_db: r.snr_db,
                stratum: stratify_by.and_then(|a| r.attribute(a)).map(|v| v.to_string()),
            })
            .collect()
    }
}

/// Seeded train/validation split. Stratified splits allocate the global
/// training count across strata by largest remainder, so the overall ratio
/// stays within one record of `train_fraction`.
pub fn partition(metas: &[RecordMeta], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    if metas.is_empty() {
        return Err(Error::Config("cannot partition an empty corpus".into()));
    }
    let kept: Vec<&RecordMeta> = metas
        .iter()
        .filter(|m| match (spec.min_snr_db, m.snr_db) {
            (Some(min), Some(snr)) => snr > min,
            _ => true,
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Config(format!("no records survive the SNR filter {:?}", spec.min_snr_db)));
    }
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for m in &kept {
        let key = if spec.stratify_by.is_some() { m.stratum.clone().unwrap_or_default() } else { String::new() };
        strata.entry(key).or_default().push(m.index);
    }
    let total = kept.len();
    let target = (spec.train_fraction * total as f64).round() as usize;
    let mut quotas: Vec<(usize, f64)> = strata
        .values()
        .map(|ids| {
            let exact = spec.train_fraction * ids.len() as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(target.saturating_sub(assigned)) {
        quotas[i].0 += 1;
    }

    let mut train = Vec::with_capacity(target);
    let mut val = Vec::with_capacity(total - target);
    for (s, (key, mut ids)) in strata.into_iter().enumerate() {
        let mut rng = rng::rng(spec.seed, &[rng::fnv1a(key.bytes())]);
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let cut = quotas[s].0.min(ids.len());
        train.extend_from_slice(&ids[..cut]);
        val.extend_from_slice(&ids[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}
