//! Per-record masking inside packed sequences.
//!
//! Every record in a pack is laid out as `[sr, cls, patch_0 .. patch_{P-1}]`.
//! The two special tokens are never masked. Each patch gets a key from a
//! counter hash of `(seed, record_id, patch_index)`; sorting a record's
//! patches by key gives its shuffle permutation and the first
//! `masked_count(P)` entries of that permutation are masked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packer::{PackedSequence, SPECIAL_TOKENS};
use crate::rng::derive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    SampleRate,
    Cls,
    Visible,
    Masked,
}

/// Evenly spaced patch coordinates `i / (l - 1)`; a single patch sits at 0.
pub fn normalized_positions(patch_count: usize) -> Vec<f64> {
    match patch_count {
        0 => Vec::new(),
        1 => vec![0.0],
        l => (0..l).map(|i| i as f64 / (l - 1) as f64).collect(),
    }
}

/// `round(ratio * P)` clamped to `[1, P - 1]`. A single-patch record is left
/// visible since there is nothing to reconstruct it from.
pub fn masked_count(patches: usize, ratio: f64) -> usize {
    if patches < 2 {
        return 0;
    }
    ((ratio * patches as f64).round() as usize).clamp(1, patches - 1)
}

#[inline]
fn patch_key(seed: u64, record_id: u64, patch: usize) -> u64 {
    derive(seed, &[record_id, patch as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub roles: Vec<TokenRole>,
    /// Per-record shuffle of local patch indices; the leading
    /// `masked[r]` entries are the masked patches.
    pub permutations: Vec<Vec<u32>>,
    pub masked: Vec<usize>,
    pub mask_ratio: f64,
    pub seed: u64,
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    Ok(())
}

fn special_roles(pack: &PackedSequence, fill: TokenRole) -> Vec<TokenRole> {
    let mut roles = vec![fill; pack.total_tokens];
    for b in &pack.boundaries {
        roles[b.start] = TokenRole::SampleRate;
        roles[b.start + 1] = TokenRole::Cls;
    }
    roles
}

/// Plans masks for every record of `pack` in one pass: a single global sort
/// of `(record, key, patch)` triples followed by a rank comparison.
pub fn plan_masks(pack: &PackedSequence, ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let n_rec = pack.len();
    let counts: Vec<usize> = (0..n_rec).map(|r| pack.patch_count(r)).collect();
    let masked: Vec<usize> = counts.iter().map(|&p| masked_count(p, ratio)).collect();

    let mut triples: Vec<(u32, u64, u32)> = Vec::with_capacity(counts.iter().sum());
    for (r, &p) in counts.iter().enumerate() {
        let id = pack.record_ids[r];
        triples.extend((0..p).map(|i| (r as u32, patch_key(seed, id, i), i as u32)));
    }
    triples.sort_unstable();

    let mut roles = special_roles(pack, TokenRole::Visible);
    let mut offsets = vec![0usize; n_rec + 1];
    for r in 0..n_rec {
        offsets[r + 1] = offsets[r] + counts[r];
    }
    for (g, &(r, _, i)) in triples.iter().enumerate() {
        let r = r as usize;
        if g - offsets[r] < masked[r] {
            roles[pack.boundaries[r].start + SPECIAL_TOKENS + i as usize] = TokenRole::Masked;
        }
    }
    let permutations = (0..n_rec)
        .map(|r| triples[offsets[r]..offsets[r + 1]].iter().map(|t| t.2).collect())
        .collect();
    Ok(MaskPlan { roles, permutations, masked, mask_ratio: ratio, seed })
}

/// Straightforward per-record loop; the reference the batched planner is
/// checked against.
pub fn plan_masks_reference(pack: &PackedSequence, ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let mut roles = special_roles(pack, TokenRole::Visible);
    let mut permutations = Vec::with_capacity(pack.len());
    let mut masked = Vec::with_capacity(pack.len());
    for (r, b) in pack.boundaries.iter().enumerate() {
        let p = pack.patch_count(r);
        let id = pack.record_ids[r];
        let mut perm: Vec<u32> = (0..p as u32).collect();
        perm.sort_by_key(|&i| (patch_key(seed, id, i as usize), i));
        let m = masked_count(p, ratio);
        for &i in &perm[..m] {
            roles[b.start + SPECIAL_TOKENS + i as usize] = TokenRole::Masked;
        }
        permutations.push(perm);
        masked.push(m);
    }
    Ok(MaskPlan { roles, permutations, masked, mask_ratio: ratio, seed })
}

/// Plan with nothing masked, used for fine-tuning and inference.
pub fn all_visible(pack: &PackedSequence) -> MaskPlan {
    MaskPlan {
        roles: special_roles(pack, TokenRole::Visible),
        permutations: (0..pack.len()).map(|r| (0..pack.patch_count(r) as u32).collect()).collect(),
        masked: vec![0; pack.len()],
        mask_ratio: 0.0,
        seed: 0,
    }
}

impl MaskPlan {
    pub fn total_tokens(&self) -> usize {
        self.roles.len()
    }

    pub fn masked_total(&self) -> usize {
        self.masked.iter().sum()
    }

    pub fn is_visible(&self, t: usize) -> bool {
        self.roles[t] != TokenRole::Masked
    }

    /// Checks that the plan was built for `pack`.
    pub fn check(&self, pack: &PackedSequence) -> Result<()> {
        if self.roles.len() != pack.total_tokens || self.masked.len() != pack.len() {
            return Err(Error::Shape(format!(
                "mask plan covers {} tokens / {} records, pack has {} / {}",
                self.roles.len(),
                self.masked.len(),
                pack.total_tokens,
                pack.len()
            )));
        }
        for b in &pack.boundaries {
            if self.roles[b.start] != TokenRole::SampleRate || self.roles[b.start + 1] != TokenRole::Cls {
                return Err(Error::Shape(format!("mask plan special tokens misaligned at token {}", b.start)));
            }
        }
        Ok(())
    }

    /// Token indices split into `(visible, masked)`, both in pack order.
    pub fn partition(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.roles.len()).partition(|&t| self.is_visible(t))
    }
}

/// Maps a compacted visible stream back to pack positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScatterMap {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl ScatterMap {
    pub fn total(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Rebuilds the full token order, filling masked slots with `placeholder`.
    pub fn scatter<V: Clone>(&self, visible: &[V], placeholder: V) -> Result<Vec<V>> {
        if visible.len() != self.visible.len() {
            return Err(Error::Shape(format!("{} visible items, map expects {}", visible.len(), self.visible.len())));
        }
        let mut out = vec![placeholder; self.total()];
        for (v, &t) in visible.iter().zip(&self.visible) {
            out[t] = v.clone();
        }
        Ok(out)
    }
}

/// Keeps special tokens and visible patches in pack order.
pub fn select_visible<V: Clone>(tokens: &[V], plan: &MaskPlan) -> Result<(Vec<V>, ScatterMap)> {
    if tokens.len() != plan.total_tokens() {
        return Err(Error::Shape(format!("{} tokens, mask plan covers {}", tokens.len(), plan.total_tokens())));
    }
    let (visible, masked) = plan.partition();
    let stream = visible.iter().map(|&t| tokens[t].clone()).collect();
    Ok((stream, ScatterMap { visible, masked }))
}
