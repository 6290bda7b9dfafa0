//! Length-adaptive multi-signal packing.
//!
//! Records are inserted in arrival order into fixed-capacity token sequences;
//! a new sequence opens exactly when the next record no longer fits. Each
//! record occupies `samples / patch_size + 2` tokens: a sampling-rate token, a
//! classification token, then one token per patch.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling-rate token + classification token.
pub const SPECIAL_TOKENS: usize = 2;

pub type RecordId = u64;

pub fn token_count(samples: usize, patch_size: usize) -> Result<usize> {
    if patch_size == 0 || samples == 0 || samples % patch_size != 0 {
        return Err(Error::Shape(format!("record length {samples} is not a positive multiple of patch size {patch_size}")));
    }
    Ok(samples / patch_size + SPECIAL_TOKENS)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub record_ids: Vec<RecordId>,
    /// Half-open token intervals, one per record, contiguous from 0.
    pub boundaries: Vec<Range<usize>>,
    pub total_tokens: usize,
    pub capacity: usize,
}

impl PackedSequence {
    pub fn new(capacity: usize) -> Self {
        Self { record_ids: Vec::new(), boundaries: Vec::new(), total_tokens: 0, capacity }
    }

    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.total_tokens
    }

    /// Appends a record if it fits; returns whether it was placed.
    pub fn try_push(&mut self, id: RecordId, tokens: usize) -> bool {
        if tokens > self.remaining() {
            return false;
        }
        self.record_ids.push(id);
        self.boundaries.push(self.total_tokens..self.total_tokens + tokens);
        self.total_tokens += tokens;
        true
    }

    /// Number of patch tokens of record `i`.
    pub fn patch_count(&self, i: usize) -> usize {
        self.boundaries[i].len() - SPECIAL_TOKENS
    }

    pub fn utilization(&self) -> f64 {
        self.total_tokens as f64 / self.capacity as f64
    }

    /// Checks contiguity, ordering and capacity.
    pub fn validate(&self) -> Result<()> {
        if self.boundaries.len() != self.record_ids.len() {
            return Err(Error::Shape("boundary table and record ids differ in length".into()));
        }
        let mut next = 0;
        for b in &self.boundaries {
            if b.start != next || b.len() <= SPECIAL_TOKENS {
                return Err(Error::Shape(format!("boundary {b:?} breaks contiguity at token {next}")));
            }
            next = b.end;
        }
        if next != self.total_tokens || self.total_tokens > self.capacity {
            return Err(Error::Shape(format!("{} tokens recorded, capacity {}", self.total_tokens, self.capacity)));
        }
        Ok(())
    }
}

/// Greedy sequential packing. `records` yields `(id, sample_count)` in
/// arrival order.
pub fn pack_greedy<I>(records: I, capacity: usize, patch_size: usize) -> Result<Vec<PackedSequence>>
where
    I: IntoIterator<Item = (RecordId, usize)>,
{
    let mut packs = Vec::new();
    let mut current = PackedSequence::new(capacity);
    for (id, samples) in records {
        let tokens = token_count(samples, patch_size)?;
        if tokens > capacity {
            return Err(Error::Oversize { id, tokens, capacity });
        }
        if !current.try_push(id, tokens) {
            packs.push(std::mem::replace(&mut current, PackedSequence::new(capacity)));
            current.try_push(id, tokens);
        }
    }
    if !current.is_empty() {
        packs.push(current);
    }
    Ok(packs)
}

/// Per-token block ids: tokens attend to each other iff their ids match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionBlockMask {
    pub block_ids: Vec<usize>,
}

impl AttentionBlockMask {
    #[inline]
    pub fn attends(&self, a: usize, b: usize) -> bool {
        self.block_ids[a] == self.block_ids[b]
    }
}

pub fn block_mask(p: &PackedSequence) -> AttentionBlockMask {
    let mut block_ids = Vec::with_capacity(p.total_tokens);
    for (i, b) in p.boundaries.iter().enumerate() {
        block_ids.extend(std::iter::repeat_n(i, b.len()));
    }
    AttentionBlockMask { block_ids }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub packs: usize,
    pub records: usize,
    pub tokens: usize,
    /// Sum of tokens over `packs * capacity`.
    pub mean_utilization: f64,
    /// Unused token slots across all packs.
    pub pack_waste_tokens: usize,
    /// Utilization had every record been padded to the longest one.
    pub pad_to_max_utilization: f64,
    /// Padding slots pad-to-max batching would have spent.
    pub padding_equivalent_waste: usize,
}

pub fn utilization_report(packs: &[PackedSequence]) -> Result<UtilizationReport> {
    if packs.is_empty() {
        return Err(Error::Config("utilization report needs at least one pack".into()));
    }
    let lengths: Vec<usize> = packs.iter().flat_map(|p| p.boundaries.iter().map(|b| b.len())).collect();
    let tokens: usize = lengths.iter().sum();
    let slots: usize = packs.iter().map(|p| p.capacity).sum();
    let longest = lengths.iter().copied().max().unwrap_or(0);
    let padded = longest * lengths.len();
    Ok(UtilizationReport {
        packs: packs.len(),
        records: lengths.len(),
        tokens,
        mean_utilization: tokens as f64 / slots as f64,
        pack_waste_tokens: slots - tokens,
        pad_to_max_utilization: if padded == 0 { 0.0 } else { tokens as f64 / padded as f64 },
        padding_equivalent_waste: padded - tokens,
    })
}

impl UtilizationReport {
    pub const CSV_HEADER: &'static str =
        "packs,records,tokens,mean_utilization,pack_waste_tokens,pad_to_max_utilization,padding_equivalent_waste";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{},{:.6},{}",
            self.packs,
            self.records,
            self.tokens,
            self.mean_utilization,
            self.pack_waste_tokens,
            self.pad_to_max_utilization,
            self.padding_equivalent_waste
        )
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn samples_for(tokens: usize) -> usize {
        (tokens - SPECIAL_TOKENS) * 8
    }

    #[test]
    fn token_counts() {
        assert_eq!(token_count(128, 8).unwrap(), 18);
        assert_eq!(token_count(4096, 8).unwrap(), 514);
        assert!(matches!(token_count(100, 8), Err(Error::Shape(_))));
    }

    #[test]
    fn greedy_opens_new_pack_when_full() {
        let recs = [(0, samples_for(18)), (1, samples_for(34)), (2, samples_for(66))];
        let packs = pack_greedy(recs, 100, 8).unwrap();
        assert_eq!(packs.len(), 2);
        assert_eq!(packs[0].record_ids, vec![0, 1]);
        assert_eq!(packs[0].boundaries, vec![0..18, 18..52]);
        assert_eq!(packs[1].record_ids, vec![2]);
        let report = utilization_report(&packs).unwrap();
        assert!((report.mean_utilization - 0.59).abs() < 1e-12);
    }

    #[test]
    fn single_small_record() {
        let packs = pack_greedy([(7, 128)], 6000, 8).unwrap();
        assert_eq!(packs.len(), 1);
        assert!((packs[0].utilization() - 18.0 / 6000.0).abs() < 1e-15);
    }

    #[test]
    fn oversize_record_rejected() {
        let err = pack_greedy([(3, samples_for(7000))], 6000, 8).unwrap_err();
        assert!(matches!(err, Error::Oversize { id: 3, tokens: 7000, capacity: 6000 }));
    }

    #[test]
    fn full_pack_has_unit_utilization() {
        let packs = pack_greedy([(0, samples_for(50)), (1, samples_for(50))], 100, 8).unwrap();
        assert_eq!(utilization_report(&packs).unwrap().mean_utilization, 1.0);
    }

    #[test]
    fn block_mask_follows_boundaries() {
        let packs = pack_greedy([(0, samples_for(18)), (1, samples_for(34))], 100, 8).unwrap();
        let m = block_mask(&packs[0]);
        assert!(m.block_ids[..18].iter().all(|&b| b == 0));
        assert!(m.block_ids[18..52].iter().all(|&b| b == 1));
        let single = pack_greedy([(0, 128)], 100, 8).unwrap();
        let m = block_mask(&single[0]);
        assert!((0..18).all(|a| (0..18).all(|b| m.attends(a, b))));
    }

    #[test]
    fn mixed_lengths_beat_pad_to_max() {
        let recs: Vec<(RecordId, usize)> = (0..64).map(|i| (i, if i % 5 == 0 { 4096 } else { 128 })).collect();
        let report = utilization_report(&pack_greedy(recs, 6000, 8).unwrap()).unwrap();
        assert!(report.pack_waste_tokens < report.padding_equivalent_waste);
        assert!(report.mean_utilization > report.pad_to_max_utilization);
    }

    proptest! {
        #[test]
        fn packing_is_lossless_and_bounded(lens in prop::collection::vec(16usize..=512, 1..200)) {
            let recs: Vec<(RecordId, usize)> = lens.iter().enumerate().map(|(i, l)| (i as u64, l * 8)).collect();
            let packs = pack_greedy(recs.clone(), 6000, 8).unwrap();
            let ids: Vec<u64> = packs.iter().flat_map(|p| p.record_ids.clone()).collect();
            prop_assert_eq!(ids, (0..lens.len() as u64).collect::<Vec<_>>());
            for p in &packs {
                p.validate().unwrap();
                for (k, b) in p.boundaries.iter().enumerate() {
                    prop_assert_eq!(b.len(), lens[p.record_ids[k] as usize] + SPECIAL_TOKENS);
                }
            }
            // A pack closes only when the next record did not fit.
            for w in packs.windows(2) {
                let next = w[1].boundaries[0].len();
                prop_assert!(w[0].remaining() < next);
            }
        }

        #[test]
        fn block_mask_matches_pairwise_predicate(lens in prop::collection::vec(1usize..12, 1..64)) {
            let recs: Vec<(RecordId, usize)> = lens.iter().enumerate().map(|(i, l)| (i as u64, l * 8)).collect();
            for p in pack_greedy(recs, 1000, 8).unwrap() {
                let m = block_mask(&p);
                let owner = |t: usize| p.boundaries.iter().position(|b| b.contains(&t)).unwrap();
                for a in 0..p.total_tokens {
                    for b in 0..p.total_tokens {
                        prop_assert_eq!(m.attends(a, b), owner(a) == owner(b));
                    }
                }
            }
        }
    }
}
