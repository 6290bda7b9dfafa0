//! Dataset-weighted record sampling and the prefetch pipeline feeding the
//! trainer.

mod pipeline;
mod policy;

pub use pipeline::{run_pipeline, PipelineItem, PipelineReport, PrefetchBuffer};
pub use policy::{ls_slope, update_weights, LossHistory, WeightMode, WeightPolicy};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packer::{token_count, PackedSequence, RecordId};
use crate::rng;

/// Position of one dataset's pointer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetCursor {
    pub size: usize,
    pub weight: f64,
    pub epoch: u64,
    pub position: usize,
    permutation: Vec<u32>,
}

impl DatasetCursor {
    /// Epochs elapsed, fractional.
    pub fn cursor(&self) -> f64 {
        self.epoch as f64 + self.position as f64 / self.size as f64
    }
}

/// Per-dataset pointers advanced at speeds proportional to their weights.
///
/// Each draw adds the normalized weight to every accumulator, emits from the
/// dataset with the largest accumulator (lowest index on ties) and subtracts
/// one from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerState {
    pub datasets: Vec<DatasetCursor>,
    accumulators: Vec<f64>,
    pub draws: u64,
    seed: u64,
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::Config(format!("sampling weight {w} must be positive and finite")));
    }
    Ok(())
}

impl SamplerState {
    pub fn new(sizes: &[usize], weights: &[f64], seed: u64) -> Result<Self> {
        if sizes.is_empty() || sizes.len() != weights.len() {
            return Err(Error::Config(format!("{} datasets but {} weights", sizes.len(), weights.len())));
        }
        if let Some(d) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("dataset {d} is empty")));
        }
        check_weights(weights)?;
        let datasets = sizes
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(d, (&size, &weight))| DatasetCursor {
                size,
                weight,
                epoch: 0,
                position: 0,
                permutation: epoch_permutation(seed, d, 0, size),
            })
            .collect();
        Ok(Self { datasets, accumulators: vec![0.0; sizes.len()], draws: 0, seed })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.datasets.iter().map(|d| d.weight).collect()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.datasets.iter().map(|d| d.weight).sum();
        self.datasets.iter().map(|d| d.weight / total).collect()
    }

    pub fn set_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.datasets.len() {
            return Err(Error::Config(format!("{} weights for {} datasets", weights.len(), self.datasets.len())));
        }
        check_weights(weights)?;
        for (d, &w) in self.datasets.iter_mut().zip(weights) {
            d.weight = w;
        }
        Ok(())
    }

    fn pick(&mut self) -> usize {
        let p = self.normalized_weights();
        let mut best = 0;
        for (d, a) in self.accumulators.iter_mut().enumerate() {
            *a += p[d];
        }
        for d in 1..p.len() {
            if self.accumulators[d] > self.accumulators[best] {
                best = d;
            }
        }
        self.accumulators[best] -= 1.0;
        best
    }

    /// Draws one `(dataset, record index within dataset)` pair.
    pub fn next(&mut self) -> (usize, u64) {
        let d = self.pick();
        let seed = self.seed;
        let c = &mut self.datasets[d];
        let id = c.permutation[c.position];
        c.position += 1;
        if c.position == c.size {
            c.position = 0;
            c.epoch += 1;
            c.permutation = epoch_permutation(seed, d, c.epoch, c.size);
        }
        self.draws += 1;
        (d, u64::from(id))
    }

    pub fn next_indices(&mut self, n: usize) -> Result<Vec<(usize, u64)>> {
        if n == 0 {
            return Err(Error::Config("must draw at least one index".into()));
        }
        Ok((0..n).map(|_| self.next()).collect())
    }

    /// Applies `update_weights` under `policy` to this state's weights.
    pub fn adapt(&mut self, histories: &[LossHistory], policy: &WeightPolicy) -> Result<Vec<f64>> {
        let w = update_weights(&self.weights(), histories, policy)?;
        self.set_weights(&w)?;
        Ok(w)
    }
}

const SAMPLER_STREAM: u64 = 0x5341_4D50;

fn epoch_permutation(seed: u64, dataset: usize, epoch: u64, size: usize) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..size as u32).collect();
    perm.shuffle(&mut rng::rng(seed, &[SAMPLER_STREAM, dataset as u64, epoch]));
    perm
}

/// Draws records from a sampler and packs them greedily. A record that does
/// not fit is held back and opens the next pack.
#[derive(Debug, Clone)]
pub struct PackAssembler {
    /// Sample counts per dataset, indexed by record position.
    lengths: Vec<Vec<usize>>,
    capacity: usize,
    patch_size: usize,
    pending: Option<(RecordId, usize)>,
}

/// Global record id used inside packs: dataset in the high 16 bits.
pub fn global_id(dataset: usize, index: u64) -> RecordId {
    ((dataset as u64) << 48) | index
}

pub fn split_id(id: RecordId) -> (usize, u64) {
    ((id >> 48) as usize, id & ((1 << 48) - 1))
}

impl PackAssembler {
    pub fn new(lengths: Vec<Vec<usize>>, capacity: usize, patch_size: usize) -> Result<Self> {
        for (d, ls) in lengths.iter().enumerate() {
            for (i, &l) in ls.iter().enumerate() {
                let t = token_count(l, patch_size)?;
                if t > capacity {
                    return Err(Error::Oversize { id: global_id(d, i as u64), tokens: t, capacity });
                }
            }
        }
        Ok(Self { lengths, capacity, patch_size, pending: None })
    }

    /// Builds the next pack, drawing as many records as fit.
    pub fn next_pack(&mut self, sampler: &mut SamplerState) -> PackedSequence {
        self.next_pack_limited(sampler, usize::MAX)
    }

    /// Packs with at most `max_records` records each; useful when the
    /// per-step token budget rather than capacity is the constraint.
    pub fn next_pack_limited(&mut self, sampler: &mut SamplerState, max_records: usize) -> PackedSequence {
        let mut pack = PackedSequence::new(self.capacity);
        while pack.len() < max_records {
            let (id, tokens) = match self.pending.take() {
                Some(p) => p,
                None => {
                    let (d, i) = sampler.next();
                    let len = self.lengths[d][i as usize];
                    (global_id(d, i), len / self.patch_size + crate::packer::SPECIAL_TOKENS)
                }
            };
            if !pack.try_push(id, tokens) {
                self.pending = Some((id, tokens));
                break;
            }
        }
        pack
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(draws: &[(usize, u64)], d: usize) -> Vec<usize> {
        (0..d).map(|k| draws.iter().filter(|x| x.0 == k).count()).collect()
    }

    #[test]
    fn equal_weights_split_evenly() {
        let mut s = SamplerState::new(&[50, 50], &[1.0, 1.0], 0).unwrap();
        assert_eq!(counts(&s.next_indices(10).unwrap(), 2), vec![5, 5]);
    }

    #[test]
    fn one_to_half() {
        let mut s = SamplerState::new(&[50, 50], &[1.0, 0.5], 0).unwrap();
        assert_eq!(counts(&s.next_indices(9).unwrap(), 2), vec![6, 3]);
    }

    #[test]
    fn fourteen_way_vector_frequencies() {
        let w = [1.0, 0.5, 1.0, 1.0, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5];
        let sizes: Vec<usize> = (0..14).map(|d| 100 + 37 * d).collect();
        let mut s = SamplerState::new(&sizes, &w, 4).unwrap();
        let n = 100_000;
        let c = counts(&s.next_indices(n).unwrap(), 14);
        for (k, p) in s.normalized_weights().iter().enumerate() {
            assert!((c[k] as f64 / n as f64 - p).abs() < 0.01 * p, "dataset {k}");
        }
    }

    #[test]
    fn epoch_covers_every_record_once() {
        let sizes = [7, 13, 5];
        let mut s = SamplerState::new(&sizes, &[1.0, 1.0, 1.0], 2).unwrap();
        let draws = s.next_indices(39).unwrap();
        for (d, &size) in sizes.iter().enumerate() {
            let mut ids: Vec<u64> = draws.iter().filter(|x| x.0 == d).map(|x| x.1).take(size).collect();
            ids.sort_unstable();
            assert_eq!(ids, (0..size as u64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(SamplerState::new(&[3, 0], &[1.0, 1.0], 0), Err(Error::Config(_))));
        assert!(SamplerState::new(&[3], &[0.0], 0).is_err());
    }

    #[test]
    fn assembler_conserves_records() {
        let lengths = vec![vec![128; 10], vec![1024; 4]];
        let mut asm = PackAssembler::new(lengths, 300, 8).unwrap();
        let mut s = SamplerState::new(&[10, 4], &[1.0, 1.0], 1).unwrap();
        let packs: Vec<_> = (0..20).map(|_| asm.next_pack(&mut s)).collect();
        let placed: usize = packs.iter().map(|p| p.len()).sum();
        assert_eq!(placed as u64 + 1, s.draws);
        for p in &packs {
            p.validate().unwrap();
            for &id in &p.record_ids {
                let (d, i) = split_id(id);
                assert!(d < 2 && i < [10, 4][d]);
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let mut a = SamplerState::new(&[9, 4], &[1.0, 0.3], 8).unwrap();
        let mut b = SamplerState::new(&[9, 4], &[1.0, 0.3], 8).unwrap();
        assert_eq!(a.next_indices(200).unwrap(), b.next_indices(200).unwrap());
    }
}
