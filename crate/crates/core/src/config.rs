//! Run configuration: a TOML document with one table per concern.
//!
//! Every field has a default, and `snapshot` writes the fully resolved
//! document back out, so a run directory always records exactly what ran.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::PretrainConfig;
use crate::net::{ModelConfig, Preset};
use crate::sampler::WeightPolicy;
use crate::tasks::{BackboneMode, FitConfig, SeparationTarget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub mask_ratio: f64,
    /// Producer threads feeding the trainer.
    pub workers: usize,
    pub prefetch: usize,
    pub deterministic: bool,
    pub corpus: CorpusSection,
    pub pretrain: PretrainSection,
    pub policy: WeightPolicy,
    pub task: TaskSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// EMR1 files, one dataset each.
    pub paths: Vec<PathBuf>,
    /// Draw weights, one per path; empty means equal.
    pub weights: Vec<f64>,
    /// Share of each dataset held out for evaluation.
    pub holdout_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { paths: Vec::new(), weights: Vec::new(), holdout_fraction: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub capacity: usize,
    /// Packs per optimizer update.
    pub batch: usize,
    /// 0 leaves the pack size to capacity alone.
    pub max_records_per_pack: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            capacity: 6000,
            batch: 40,
            max_records_per_pack: 0,
            lr: 1e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.05,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Classification by `infer_class`.
    #[default]
    Classify,
    /// Radar waveform class plus pulse parameter regression.
    Joint,
    /// Source separation on mixtures; one source means denoising.
    Separate,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Self::Classify),
            "joint" => Ok(Self::Joint),
            "separate" => Ok(Self::Separate),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub backbone: BackboneMode,
    /// Pretrained checkpoint for `fine_tune` and `frozen`.
    pub init: Option<PathBuf>,
    pub train: PathBuf,
    pub test: PathBuf,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Regression weight of the joint loss.
    pub lambda: f64,
    /// Latent penalty of the separation head.
    pub lambda_z: f64,
    pub sources: usize,
    pub target: SeparationTarget,
    /// Records per class for few-shot runs.
    pub shots: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::Classify,
            backbone: BackboneMode::FineTune,
            init: None,
            train: PathBuf::new(),
            test: PathBuf::new(),
            steps: 500,
            batch: 16,
            lr: 1e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.0,
            lambda: 1.0,
            lambda_z: 1e-4,
            sources: 2,
            target: SeparationTarget::Sources,
            shots: 50,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::Full,
            mask_ratio: 0.75,
            workers: 2,
            prefetch: 8,
            deterministic: false,
            corpus: CorpusSection::default(),
            pretrain: PretrainSection::default(),
            policy: WeightPolicy::default(),
            task: TaskSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The fully resolved configuration as TOML.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { mask_ratio: self.mask_ratio, ..ModelConfig::preset(self.preset) }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            model: self.model(),
            steps: p.steps,
            capacity: p.capacity,
            packs_per_step: p.batch,
            max_records_per_pack: p.max_records_per_pack,
            lr: p.lr,
            warmup_fraction: p.warmup_fraction,
            weight_decay: p.weight_decay,
            weights: self.corpus.weights.clone(),
            policy: self.policy.clone(),
            eval_every: p.eval_every,
            seed: self.seed,
            workers: self.workers,
            prefetch: self.prefetch,
            deterministic: self.deterministic,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        let t = &self.task;
        FitConfig {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            warmup_fraction: t.warmup_fraction,
            weight_decay: t.weight_decay,
            seed: self.seed,
        }
    }

    /// Checks every section against the invariants of the modules it feeds.
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.workers == 0 || self.prefetch == 0 {
            return Err(Error::Config("workers and prefetch must be at least 1".into()));
        }
        let c = &self.corpus;
        if !c.weights.is_empty() && c.weights.len() != c.paths.len() {
            return Err(Error::Config(format!("{} corpus weights for {} paths", c.weights.len(), c.paths.len())));
        }
        if c.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config("corpus weights must be positive and finite".into()));
        }
        if !(0.0..1.0).contains(&c.holdout_fraction) {
            return Err(Error::Config(format!("holdout fraction {} outside [0, 1)", c.holdout_fraction)));
        }
        self.pretrain_config().validate(c.paths.len().max(c.weights.len()))?;
        self.fit_config().validate()?;
        let t = &self.task;
        if t.lambda < 0.0 || t.lambda_z < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if t.sources == 0 || t.sources > crate::tasks::MAX_PIT_SOURCES {
            return Err(Error::Config(format!("source count {} outside 1..={}", t.sources, crate::tasks::MAX_PIT_SOURCES)));
        }
        if t.shots == 0 {
            return Err(Error::Config("few-shot runs need at least one record per class".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.mask_ratio, 0.75);
        assert_eq!(c.pretrain.capacity, 6000);
        assert_eq!(c.pretrain.lr, 1e-4);
        assert_eq!(c.pretrain.warmup_fraction, 0.1);
        assert_eq!(c.pretrain.batch, 40);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.preset = Preset::Tiny;
        c.corpus.paths = vec!["a.emr1".into(), "b.emr1".into()];
        c.corpus.weights = vec![1.0, 0.5];
        c.task.init = Some("ckpt.iqfc".into());
        let back = RunConfig::from_toml(&c.snapshot().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_toml("seed = 3\npreset = \"tiny\"\n[pretrain]\nsteps = 20\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.pretrain.steps, 20);
        assert_eq!(c.pretrain.batch, 40);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        let mut c = RunConfig { mask_ratio: 1.0, ..RunConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.mask_ratio = 0.75;
        c.corpus.weights = vec![1.0];
        assert!(c.validate().is_err());
        c.corpus.weights.clear();
        c.pretrain.capacity = 100_000;
        assert!(c.validate().is_err());
    }
}
