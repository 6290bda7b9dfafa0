use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::schema::{Attribute, IqRecord};
use crate::error::{Error, Result};
use crate::rng;

/// Draws exactly `k` training ids per class (or per class and SNR level when
/// `snr_attr` is given). `records` is indexed by id. Returned ids are sorted.
pub fn few_shot_select(
    records: &[IqRecord],
    train_ids: &[usize],
    k: usize,
    class_attr: Attribute,
    snr_attr: Option<Attribute>,
    seed: u64,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("few-shot k must be at least 1".into()));
    }
    let mut cells: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &id in train_ids {
        let rec = records.get(id).ok_or_else(|| Error::Contract(format!("train id {id} outside the corpus")))?;
        let class = rec
            .attribute(class_attr)
            .ok_or_else(|| Error::Config(format!("record {id} lacks class attribute {}", class_attr.name())))?;
        let key = match snr_attr {
            Some(a) => {
                let snr = rec.attribute(a).ok_or_else(|| Error::Config(format!("record {id} lacks {}", a.name())))?;
                format!("{}={class}, {}={snr}", class_attr.name(), a.name())
            }
            None => format!("{}={class}", class_attr.name()),
        };
        cells.entry(key).or_default().push(id);
    }
    let mut support = Vec::with_capacity(cells.len() * k);
    for (key, mut ids) in cells {
        if ids.len() < k {
            return Err(Error::InsufficientData(format!("cell [{key}] has {} members, need {k}", ids.len())));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng::rng(seed, &[rng::fnv1a(key.bytes())]));
        support.extend_from_slice(&ids[..k]);
    }
    support.sort_unstable();
    Ok(support)
}
