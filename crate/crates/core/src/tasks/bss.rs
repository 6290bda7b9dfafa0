//! Bottleneck autoencoder head for blind source separation and denoising.

use serde::{Deserialize, Serialize};

use super::heads::Dense;
use crate::error::{Error, Result};
use crate::net::{Graph, MaeModel, NodeId, PackInput, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Bottleneck widths of the full-scale model, for a 768-wide encoder.
pub const FULL_WIDTHS: [usize; 4] = [4096, 2048, 1536, 1024];
pub const FULL_EMBED_DIM: usize = 768;
/// Latent width per separated channel.
pub const LATENT_PER_SOURCE: usize = 16;
/// Largest source count the exhaustive permutation search accepts.
pub const MAX_PIT_SOURCES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationTarget {
    /// Each channel reconstructs one reference source, matched by PIT.
    #[default]
    Sources,
    /// The channel sum reconstructs the input mixture.
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BssConfig {
    pub widths: Vec<usize>,
    pub sources: usize,
    pub latent_per_source: usize,
    /// Complex samples per record; every record in a batch has this length.
    pub record_len: usize,
}

impl BssConfig {
    /// Full-scale widths scaled by `embed_dim / 768`.
    pub fn scaled(embed_dim: usize, sources: usize, record_len: usize) -> Self {
        let s = embed_dim as f64 / FULL_EMBED_DIM as f64;
        Self {
            widths: FULL_WIDTHS.iter().map(|&w| ((w as f64 * s).round() as usize).max(1)).collect(),
            sources,
            latent_per_source: LATENT_PER_SOURCE,
            record_len,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_per_source * self.sources
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 || self.latent_per_source == 0 || self.record_len == 0 {
            return Err(Error::Config("separation sizes must be positive".into()));
        }
        let chain: Vec<usize> = self.widths.iter().copied().chain([self.latent_dim()]).collect();
        if chain.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!("bottleneck widths {chain:?} are not strictly decreasing")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BssHead {
    pub config: BssConfig,
    pub layers: Vec<Dense>,
    pub expand: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct SeparationOutput {
    /// One `R x 2L` interleaved I/Q estimate per channel.
    pub estimates: Vec<NodeId>,
    /// `R x 16K` bottleneck.
    pub latent: NodeId,
}

impl BssHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, config: BssConfig, model: &MaeModel, seed: u64) -> Result<Self> {
        config.validate()?;
        let patches = config.record_len / model.config.patch_size;
        let mut inputs = patches * model.config.embed_dim;
        let mut layers = Vec::new();
        for (i, &w) in config.widths.iter().chain([&config.latent_dim()]).enumerate() {
            layers.push(Dense::new(store, &format!("{prefix}.l{i}"), inputs, w, seed)?);
            inputs = w;
        }
        let expand = (0..config.sources)
            .map(|k| Dense::new(store, &format!("{prefix}.x{k}"), config.latent_per_source, 2 * config.record_len, seed))
            .collect::<Result<_>>()?;
        Ok(Self { config, layers, expand })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, prefix: &str, config: BssConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..=config.widths.len()).map(|i| Dense::attach(store, &format!("{prefix}.l{i}"))).collect::<Result<_>>()?;
        let expand = (0..config.sources).map(|k| Dense::attach(store, &format!("{prefix}.x{k}"))).collect::<Result<_>>()?;
        Ok(Self { config, layers, expand })
    }

    pub fn pids(&self) -> Vec<usize> {
        self.layers.iter().chain(&self.expand).flat_map(Dense::pids).collect()
    }
}

/// Encodes every record with nothing masked, flattens the patch latents and
/// runs the bottleneck and per-channel expansion.
pub fn bss_forward<T: Scalar>(g: &mut Graph<'_, T>, model: &MaeModel, head: &BssHead, input: &PackInput<T>) -> Result<SeparationOutput> {
    let cfg = &head.config;
    let patches = cfg.record_len / model.config.patch_size;
    for r in 0..input.records() {
        if input.pack.patch_count(r) != patches {
            return Err(Error::Shape(format!(
                "record {r} has {} patches, separation head expects {patches}",
                input.pack.patch_count(r)
            )));
        }
    }
    let enc = model.encode_all(g, input)?;
    let rows: Vec<usize> = enc.patch_blocks().into_iter().flatten().collect();
    let flat = g.gather_rows(enc.latents, rows)?;
    let d = model.config.embed_dim;
    let mut x = g.reshape(flat, input.records(), patches * d)?;
    let last = head.layers.len() - 1;
    for (i, layer) in head.layers.iter().enumerate() {
        x = layer.forward(g, x)?;
        if i < last {
            x = g.gelu(x);
        }
    }
    let latent = x;
    let per = cfg.latent_per_source;
    let estimates = head
        .expand
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let z = g.slice_cols(latent, k * per..(k + 1) * per)?;
            e.forward(g, z)
        })
        .collect::<Result<_>>()?;
    Ok(SeparationOutput { estimates, latent })
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

fn guard(k: usize) -> Result<()> {
    if k == 0 || k > MAX_PIT_SOURCES {
        return Err(Error::Config(format!("permutation search over {k} sources (limit {MAX_PIT_SOURCES})")));
    }
    Ok(())
}

/// Best assignment for a `k x k` cost matrix: minimum of the mean cost over
/// permutations, first in lexicographic order on ties.
fn best_permutation(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let k = cost.len();
    let mut best = (f64::INFINITY, Vec::new());
    for p in permutations(k) {
        let mut s = 0.0;
        for (i, &j) in p.iter().enumerate() {
            s += cost[i][j];
        }
        let s = s / k as f64;
        if s < best.0 {
            best = (s, p);
        }
    }
    best
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Permutation-invariant MSE for one record: `min_pi mean_k MSE(e_k, r_pi(k))`.
/// The returned permutation maps estimate `k` to reference `pi[k]`.
pub fn pit_mse(estimates: &[&[f64]], references: &[&[f64]]) -> Result<(f64, Vec<usize>)> {
    guard(estimates.len())?;
    if estimates.len() != references.len() {
        return Err(Error::Shape(format!("{} estimates for {} references", estimates.len(), references.len())));
    }
    let n = estimates[0].len();
    if estimates.iter().chain(references).any(|s| s.len() != n) {
        return Err(Error::Shape("estimates and references differ in length".into()));
    }
    let cost: Vec<Vec<f64>> = estimates.iter().map(|e| references.iter().map(|r| mse(e, r)).collect()).collect();
    Ok(best_permutation(&cost))
}

#[derive(Debug, Clone)]
pub struct PitOutput {
    pub loss: NodeId,
    /// Chosen permutation per record.
    pub permutations: Vec<Vec<usize>>,
}

/// Batched PIT loss: each record picks its own best permutation and the
/// per-record minima are averaged. `references[k]` is `R x 2L`.
pub fn pit_loss<T: Scalar>(g: &mut Graph<'_, T>, estimates: &[NodeId], references: &[Tensor<T>]) -> Result<PitOutput> {
    let k = estimates.len();
    guard(k)?;
    if references.len() != k {
        return Err(Error::Shape(format!("{k} estimates for {} references", references.len())));
    }
    let refs: Vec<NodeId> = references.iter().map(|r| g.leaf(r.clone())).collect();
    let mut pair = vec![vec![0; k]; k];
    for i in 0..k {
        for j in 0..k {
            pair[i][j] = g.row_mse(estimates[i], refs[j])?;
        }
    }
    let rows = g.value(estimates[0]).rows;
    let coeff = T::lit(1.0 / (rows * k) as f64);
    let mut terms = Vec::with_capacity(rows * k);
    let mut perms = Vec::with_capacity(rows);
    for r in 0..rows {
        let cost: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| g.value(pair[i][j]).data[r].as_f64()).collect()).collect();
        let (_, p) = best_permutation(&cost);
        for (i, &j) in p.iter().enumerate() {
            terms.push((pair[i][j], r, coeff));
        }
        perms.push(p);
    }
    let loss = g.weighted_sum(terms);
    Ok(PitOutput { loss, permutations: perms })
}

/// Mixture-reconstruction loss: MSE between the channel sum and the input.
pub fn mixture_loss<T: Scalar>(g: &mut Graph<'_, T>, estimates: &[NodeId], mixture: &Tensor<T>) -> Result<NodeId> {
    let mut sum = estimates[0];
    for &e in &estimates[1..] {
        sum = g.add(sum, e)?;
    }
    let t = g.leaf(mixture.clone());
    let w = T::lit(1.0 / mixture.len() as f64);
    g.weighted_sq_err(sum, t, vec![w; mixture.rows])
}
