//! Training loops shared by the downstream tasks.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::heads::{pooled_features, predictions, Dense};
use crate::error::{Error, Result};
use crate::net::{AdamW, AdamWConfig, Graph, MaeModel, NodeId, PackInput, ParamStore, Tensor};
use crate::rng;
use crate::scalar::Scalar;
use crate::synth::IqWaveform;

/// How the pretrained backbone takes part in downstream training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    /// Backbone initialized from the checkpoint and updated.
    #[default]
    FineTune,
    /// Backbone initialized from the checkpoint and held fixed.
    Frozen,
    /// Backbone randomly initialized and updated.
    Scratch,
}

impl std::str::FromStr for BackboneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" | "fine_tune" => Ok(Self::FineTune),
            "frozen" => Ok(Self::Frozen),
            "scratch" => Ok(Self::Scratch),
            _ => Err(Error::Config(format!("unknown backbone mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { steps: 500, batch: 16, lr: 1e-3, warmup_fraction: 0.1, weight_decay: 0.0, seed: 0 }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("fit needs at least one step and a non-empty batch".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
            .with_warmup_fraction(self.warmup_fraction, self.steps as u64)
    }
}

/// Trainable flags: everything in `heads`, plus the backbone unless frozen.
pub fn trainable_mask(store_len: usize, backbone: Range<usize>, heads: &[usize], mode: BackboneMode) -> Vec<bool> {
    let mut mask = vec![false; store_len];
    if mode != BackboneMode::Frozen {
        for p in backbone {
            mask[p] = true;
        }
    }
    for &p in heads {
        mask[p] = true;
    }
    mask
}

/// Shuffled mini-batches over `0..n`, reshuffled every pass.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl Batches {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut b = Self { order: (0..n).collect(), pos: 0, epoch: 0, seed };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.order.shuffle(&mut rng::rng(self.seed, &[0x4241_5443, self.epoch]));
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.pos = 0;
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mini-batch AdamW over `n` items. `loss_fn` builds the loss for a batch of
/// item indices; only parameters flagged in `trainable` move. Returns the
/// loss trace.
pub fn fit<T, F>(store: &mut ParamStore<T>, trainable: &[bool], n: usize, cfg: &FitConfig, mut loss_fn: F) -> Result<Vec<f64>>
where
    T: Scalar,
    F: FnMut(&mut Graph<'_, T>, &[usize]) -> Result<NodeId>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InsufficientData("no training items".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer())?;
    let mut batches = Batches::new(n, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next_batch(cfg.batch);
        let (loss, grads) = {
            let mut g = Graph::with_trainable(store, trainable);
            let l = loss_fn(&mut g, &idx)?;
            let v = g.value(l).item().as_f64();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("task loss is {v} at step {step}")));
            }
            (v, g.backward(l)?)
        };
        opt.step(store, &grads)?;
        trace.push(loss);
    }
    Ok(trace)
}

/// Pooled backbone features for every waveform, computed in batches with no
/// gradient tracking.
pub fn extract_features<T: Scalar>(model: &MaeModel, store: &ParamStore<T>, waveforms: &[&IqWaveform<f32>], batch: usize) -> Result<Tensor<T>> {
    let d = super::heads::feature_dim(model);
    let mut out = Tensor::zeros(waveforms.len(), d);
    for (c, chunk) in waveforms.chunks(batch.max(1)).enumerate() {
        let input = PackInput::<T>::from_waveforms(chunk, model.config.patch_size)?;
        let frozen = vec![false; store.len()];
        let mut g = Graph::with_trainable(store, &frozen);
        let f = pooled_features(&mut g, model, &input)?;
        let v = g.value(f);
        let start = c * batch.max(1) * d;
        out.data[start..start + v.len()].copy_from_slice(&v.data);
    }
    Ok(out)
}

/// Per-column standardization fitted on training features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    pub fn fit(x: &Tensor<T>) -> Self {
        let n = T::lit(x.rows.max(1) as f64);
        let mut mean = vec![T::zero(); x.cols];
        for r in 0..x.rows {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n;
            }
        }
        let mut var = vec![T::zero(); x.cols];
        for r in 0..x.rows {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let inv_std = var.into_iter().map(|v| (v + T::lit(1e-8)).sqrt().recip()).collect();
        Self { mean, inv_std }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = x.clone();
        for r in 0..out.rows {
            for ((v, &m), &s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }
}

/// A linear classifier trained on frozen features.
#[derive(Debug, Clone)]
pub struct LinearProbe<T = f32> {
    pub store: ParamStore<T>,
    pub head: Dense,
    pub scaler: Standardizer<T>,
    pub train_accuracy: f64,
    pub trace: Vec<f64>,
}

impl<T: Scalar> LinearProbe<T> {
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store);
        let x = g.leaf(self.scaler.apply(features));
        let l = self.head.forward(&mut g, x)?;
        Ok(g.value(l).clone())
    }

    pub fn predict(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(predictions(&self.logits(features)?))
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Trains only a linear layer on precomputed features; the backbone that
/// produced them is never touched.
pub fn linear_probe<T: Scalar>(features: &Tensor<T>, labels: &[usize], classes: usize, cfg: &FitConfig) -> Result<LinearProbe<T>> {
    if features.rows != labels.len() {
        return Err(Error::Shape(format!("{} feature rows for {} labels", features.rows, labels.len())));
    }
    let scaler = Standardizer::fit(features);
    let x = scaler.apply(features);
    let mut store = ParamStore::new();
    let head = Dense::new(&mut store, "probe", features.cols, classes, cfg.seed)?;
    let mask = vec![true; store.len()];
    let trace = fit(&mut store, &mask, labels.len(), cfg, |g, idx| {
        let all = g.leaf(x.clone());
        let rows = g.gather_rows(all, idx.to_vec())?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let logits = head.forward(g, rows)?;
        g.softmax_ce(logits, y)
    })?;
    let mut probe = LinearProbe { store, head, scaler, train_accuracy: 0.0, trace };
    probe.train_accuracy = accuracy(&probe.predict(features)?, labels);
    Ok(probe)
}
