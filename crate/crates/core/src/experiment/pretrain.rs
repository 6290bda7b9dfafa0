use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masker::{plan_masks, MaskPlan};
use crate::net::{mae_eval, mae_grads, AdamW, AdamWConfig, AdamWState, Grads, MaeModel, ModelConfig, PackInput, ParamStore, Preset};
use crate::packer::{pack_greedy, PackedSequence};
use crate::rng;
use crate::sampler::{run_pipeline, split_id, LossHistory, PackAssembler, PrefetchBuffer, SamplerState, WeightMode, WeightPolicy};
use crate::synth::IqWaveform;

const MASK_STREAM: u64 = 0x4d41_534b;
const EVAL_STREAM: u64 = 0x4556_414c;
const INIT_STREAM: u64 = 0x494e_4954;

/// Normalized waveforms of one pretraining source.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub waveforms: Vec<IqWaveform<f32>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, waveforms: Vec<IqWaveform<f32>>) -> Self {
        Self { name: name.into(), waveforms }
    }

    pub fn len(&self) -> usize {
        self.waveforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waveforms.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    /// Token capacity of one pack.
    pub capacity: usize,
    /// Packs whose gradients are averaged into one update.
    pub packs_per_step: usize,
    /// Caps records per pack; 0 means no cap.
    pub max_records_per_pack: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Relative draw weights, one per dataset; empty means equal.
    pub weights: Vec<f64>,
    pub policy: WeightPolicy,
    /// Steps between held-out evaluations (and policy updates).
    pub eval_every: usize,
    pub seed: u64,
    pub workers: usize,
    pub prefetch: usize,
    pub deterministic: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::preset(Preset::Full),
            steps: 1000,
            capacity: 6000,
            packs_per_step: 40,
            max_records_per_pack: 0,
            lr: 1e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.05,
            weights: Vec::new(),
            policy: WeightPolicy::default(),
            eval_every: 100,
            seed: 0,
            workers: 2,
            prefetch: 8,
            deterministic: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, datasets: usize) -> Result<()> {
        self.model.validate()?;
        self.policy.validate()?;
        self.optimizer().validate()?;
        if self.steps == 0 || self.packs_per_step == 0 || self.eval_every == 0 {
            return Err(Error::Config("steps, packs_per_step and eval_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        if self.capacity > self.model.max_tokens {
            return Err(Error::Config(format!(
                "capacity {} exceeds the model's positional range {}",
                self.capacity, self.model.max_tokens
            )));
        }
        if !self.weights.is_empty() && self.weights.len() != datasets {
            return Err(Error::Config(format!("{} weights for {datasets} datasets", self.weights.len())));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
            .with_warmup_fraction(self.warmup_fraction, self.steps as u64)
    }

    fn weights_for(&self, datasets: usize) -> Vec<f64> {
        if self.weights.is_empty() {
            vec![1.0; datasets]
        } else {
            self.weights.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub records: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    /// Held-out reconstruction loss per dataset.
    pub per_dataset: Vec<f64>,
    pub mean: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub model: MaeModel,
    pub store: ParamStore<f32>,
    pub optimizer: AdamWState<f32>,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
}

/// A pack with its masks, ready for the model.
struct Work {
    input: PackInput<f32>,
    plan: MaskPlan,
}

fn build_work(datasets: &[Dataset], pack: PackedSequence, cfg: &PretrainConfig, step: usize, slot: usize) -> Result<Work> {
    let ws: Vec<&IqWaveform<f32>> = pack
        .record_ids
        .iter()
        .map(|&id| {
            let (d, i) = split_id(id);
            &datasets[d].waveforms[i as usize]
        })
        .collect();
    let plan = plan_masks(&pack, cfg.model.mask_ratio, rng::derive(cfg.seed, &[MASK_STREAM, step as u64, slot as u64]))?;
    let input = PackInput::new(pack, &ws, cfg.model.patch_size)?;
    Ok(Work { input, plan })
}

/// Mean masked-reconstruction loss over `waveforms`, packed in order with
/// masks fixed by `seed`. Each record counts once.
pub fn reconstruction_loss(model: &MaeModel, store: &ParamStore<f32>, waveforms: &[IqWaveform<f32>], capacity: usize, seed: u64) -> Result<f64> {
    let items = waveforms.iter().enumerate().map(|(i, w)| (i as u64, w.len()));
    let packs = pack_greedy(items, capacity, model.config.patch_size)?;
    let (mut total, mut n) = (0.0, 0usize);
    for (k, pack) in packs.into_iter().enumerate() {
        let ws: Vec<&IqWaveform<f32>> = pack.record_ids.iter().map(|&i| &waveforms[i as usize]).collect();
        let plan = plan_masks(&pack, model.config.mask_ratio, rng::derive(seed, &[EVAL_STREAM, k as u64]))?;
        let input = PackInput::new(pack, &ws, model.config.patch_size)?;
        for r in mae_eval(model, store, &input, &plan)?.per_record.into_iter().flatten() {
            total += r;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InsufficientData("no maskable records to evaluate".into()));
    }
    Ok(total / n as f64)
}

/// Masked-autoencoder pretraining over weighted datasets.
///
/// `holdout` holds one evaluation set per dataset (may be empty sets); it is
/// scored before the first step and every `eval_every` steps, and feeds the
/// plateau policy when that mode is on. `on_step` sees every update.
pub fn pretrain(
    datasets: &[Dataset],
    holdout: &[Dataset],
    cfg: &PretrainConfig,
    init: Option<ParamStore<f32>>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<PretrainRun> {
    cfg.validate(datasets.len())?;
    if datasets.is_empty() || datasets.iter().any(Dataset::is_empty) {
        return Err(Error::InsufficientData("every pretraining dataset needs records".into()));
    }
    if holdout.len() != datasets.len() {
        return Err(Error::Config(format!("{} holdout sets for {} datasets", holdout.len(), datasets.len())));
    }
    let (model, mut store) = match init {
        Some(store) => (MaeModel::attach(cfg.model.clone(), &store)?, store),
        None => {
            let mut store = ParamStore::new();
            let model = MaeModel::new(cfg.model.clone(), &mut store, rng::derive(cfg.seed, &[INIT_STREAM]))?;
            (model, store)
        }
    };
    let mut opt = AdamW::new(cfg.optimizer())?;
    let sizes: Vec<usize> = datasets.iter().map(Dataset::len).collect();
    let sampler = SamplerState::new(&sizes, &cfg.weights_for(datasets.len()), cfg.seed)?;
    let lengths = datasets.iter().map(|d| d.waveforms.iter().map(IqWaveform::len).collect()).collect();
    let assembler = PackAssembler::new(lengths, cfg.capacity, cfg.model.patch_size)?;
    let source = Mutex::new((sampler, assembler));
    let max_records = if cfg.max_records_per_pack == 0 { usize::MAX } else { cfg.max_records_per_pack };

    let draw = |step: usize, slot: usize| -> Result<Work> {
        let pack = {
            let mut guard = source.lock().map_err(|_| Error::Pipeline("sampler lock poisoned".into()))?;
            let (sampler, assembler) = &mut *guard;
            assembler.next_pack_limited(sampler, max_records)
        };
        build_work(datasets, pack, cfg, step, slot)
    };

    let mut trainer = Trainer {
        model: &model,
        store: &mut store,
        opt: &mut opt,
        cfg,
        datasets: datasets.len(),
        holdout,
        pending: Vec::new(),
        grads: None,
        histories: vec![LossHistory::default(); datasets.len()],
        interval: vec![(0.0, 0); datasets.len()],
        steps: Vec::with_capacity(cfg.steps),
        evals: Vec::new(),
        step: 0,
    };
    let weights = source.lock().map(|g| g.0.weights()).unwrap_or_default();
    trainer.evaluate(weights)?;

    let total = cfg.steps * cfg.packs_per_step;
    if cfg.deterministic || cfg.workers <= 1 {
        for k in 0..total {
            let work = draw(k / cfg.packs_per_step, k % cfg.packs_per_step)?;
            if trainer.consume(work, &mut on_step)? {
                apply_policy(&source, &mut trainer)?;
            }
        }
    } else {
        let counter = std::sync::atomic::AtomicUsize::new(0);
        let mut failure = None;
        let buf = PrefetchBuffer { producers: cfg.workers, capacity: cfg.prefetch.max(1) };
        run_pipeline(
            buf,
            |_, _| {
                let k = counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= total {
                    return Ok(None);
                }
                draw(k / cfg.packs_per_step, k % cfg.packs_per_step).map(Some)
            },
            |item| {
                let outcome = trainer
                    .consume(item.value, &mut on_step)
                    .and_then(|eval| if eval { apply_policy(&source, &mut trainer) } else { Ok(()) });
                match outcome {
                    Ok(()) => trainer.step < cfg.steps,
                    Err(e) => {
                        failure = Some(e);
                        false
                    }
                }
            },
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    let (steps, evals) = (trainer.steps, trainer.evals);
    Ok(PretrainRun { model, store, optimizer: opt.state, steps, evals })
}

/// Scores the holdout and, under the plateau policy, re-weights the sampler.
fn apply_policy(source: &Mutex<(SamplerState, PackAssembler)>, trainer: &mut Trainer<'_>) -> Result<()> {
    let mut guard = source.lock().map_err(|_| Error::Pipeline("sampler lock poisoned".into()))?;
    if trainer.cfg.policy.mode == WeightMode::PlateauAdaptive {
        let ready = trainer.histories.iter().all(|h| h.val.len() >= trainer.cfg.policy.window);
        if ready {
            guard.0.adapt(&trainer.histories, &trainer.cfg.policy)?;
        }
    }
    let weights = guard.0.weights();
    drop(guard);
    trainer.evaluate(weights)
}

struct Trainer<'a> {
    model: &'a MaeModel,
    store: &'a mut ParamStore<f32>,
    opt: &'a mut AdamW<f32>,
    cfg: &'a PretrainConfig,
    datasets: usize,
    holdout: &'a [Dataset],
    pending: Vec<(f64, usize, usize)>,
    grads: Option<Grads<f32>>,
    histories: Vec<LossHistory>,
    interval: Vec<(f64, usize)>,
    steps: Vec<StepLog>,
    evals: Vec<EvalLog>,
    step: usize,
}

impl Trainer<'_> {
    /// Folds one pack into the current update. Returns true when an
    /// evaluation point was reached.
    fn consume(&mut self, work: Work, on_step: &mut impl FnMut(&StepLog)) -> Result<bool> {
        let (out, grads) = mae_grads(self.model, self.store, &work.input, &work.plan)?;
        for (r, loss) in out.per_record.iter().enumerate() {
            if let Some(l) = loss {
                let (d, _) = split_id(work.input.pack.record_ids[r]);
                self.interval[d].0 += l;
                self.interval[d].1 += 1;
            }
        }
        let scale = 1.0 / self.cfg.packs_per_step as f32;
        match &mut self.grads {
            Some(acc) => acc.accumulate(&grads, scale),
            None => {
                let mut acc = Grads { params: Vec::new() };
                acc.accumulate(&grads, scale);
                self.grads = Some(acc);
            }
        }
        self.pending.push((out.loss, work.input.records(), work.input.pack.total_tokens));
        if self.pending.len() < self.cfg.packs_per_step {
            return Ok(false);
        }
        let grads = self.grads.take().expect("accumulated above");
        let lr = self.opt.step(self.store, &grads)?;
        let log = StepLog {
            step: self.step,
            loss: self.pending.iter().map(|p| p.0).sum::<f64>() / self.pending.len() as f64,
            lr,
            records: self.pending.iter().map(|p| p.1).sum(),
            tokens: self.pending.iter().map(|p| p.2).sum(),
        };
        self.pending.clear();
        self.step += 1;
        on_step(&log);
        self.steps.push(log);
        Ok(self.step % self.cfg.eval_every == 0 || self.step == self.cfg.steps)
    }

    fn evaluate(&mut self, weights: Vec<f64>) -> Result<()> {
        let mut per_dataset = Vec::with_capacity(self.datasets);
        for (d, set) in self.holdout.iter().enumerate() {
            let v = if set.is_empty() {
                f64::NAN
            } else {
                reconstruction_loss(self.model, self.store, &set.waveforms, self.cfg.capacity, self.cfg.seed)?
            };
            per_dataset.push(v);
            let (sum, n) = std::mem::take(&mut self.interval[d]);
            if self.step > 0 {
                if n > 0 {
                    self.histories[d].train.push(sum / n as f64);
                } else if let Some(&last) = self.histories[d].train.last() {
                    self.histories[d].train.push(last);
                }
                if v.is_finite() {
                    self.histories[d].val.push(v);
                }
            }
        }
        let finite: Vec<f64> = per_dataset.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 };
        self.evals.push(EvalLog { step: self.step, per_dataset, mean, weights });
        Ok(())
    }
}
