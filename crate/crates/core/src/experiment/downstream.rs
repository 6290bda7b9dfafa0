use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_iq, IqRecord, MinMax, NormMode};
use crate::error::{Error, Result};
use crate::metrics::{bss_eval, kappa, overall_accuracy, ConfusionMatrix};
use crate::net::{Graph, MaeModel, ModelConfig, PackInput, ParamStore, Tensor};
use crate::rng;
use crate::synth::datasets::{MixtureSample, RadarCorpusSpec};
use crate::synth::IqWaveform;
use crate::tasks::{
    bss_forward, classify_loss, extract_features, fit, joint_loss, latent_reg, linear_probe, mixture_loss, pit_loss, pit_mse,
    pooled_features, trainable_mask, BackboneMode, BssConfig, BssHead, Dense, FitConfig, JointHead,
    LinearProbe, SeparationTarget, REGRESSION_TARGETS,
};

const HEAD_STREAM: u64 = 0x4845_4144;
const SCRATCH_STREAM: u64 = 0x5343_5254;
/// Records per forward pass when only predictions are needed.
const EVAL_BATCH: usize = 64;

fn normalized(records: &[IqRecord]) -> Vec<IqWaveform<f32>> {
    records.iter().map(|r| normalize_iq(&r.waveform, NormMode::Component)).collect()
}

/// Backbone for a downstream run. `FineTune` and `Frozen` copy the
/// pretrained parameters; `Scratch` draws a fresh initialization.
pub fn backbone(config: &ModelConfig, pretrained: Option<&ParamStore<f32>>, mode: BackboneMode, seed: u64) -> Result<(MaeModel, ParamStore<f32>)> {
    match (mode, pretrained) {
        (BackboneMode::Scratch, _) => {
            let mut store = ParamStore::new();
            let model = MaeModel::new(config.clone(), &mut store, rng::derive(seed, &[SCRATCH_STREAM]))?;
            Ok((model, store))
        }
        (_, Some(p)) => {
            let store = p.clone();
            Ok((MaeModel::attach(config.clone(), &store)?, store))
        }
        (mode, None) => Err(Error::Config(format!("backbone mode {mode:?} needs a pretrained checkpoint"))),
    }
}

/// Normalized waveforms with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub waveforms: Vec<IqWaveform<f32>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Labeled {
    /// Labels come from `infer_class`; the class count is one past the
    /// largest label unless given.
    pub fn from_records(records: &[IqRecord], classes: Option<usize>) -> Result<Self> {
        let labels = records
            .iter()
            .enumerate()
            .map(|(i, r)| match r.infer_class {
                Some(c) if c >= 0 => Ok(c as usize),
                _ => Err(Error::InsufficientData(format!("record {i} has no class label"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let seen = labels.iter().max().map_or(0, |m| m + 1);
        let classes = classes.unwrap_or(seen);
        if seen > classes {
            return Err(Error::Contract(format!("label {} outside {classes} classes", seen - 1)));
        }
        Ok(Self { waveforms: normalized(records), labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Vec<&IqWaveform<f32>> {
        idx.iter().map(|&i| &self.waveforms[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub confusion: ConfusionMatrix,
}

impl ClassReport {
    pub fn new(pred: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        let confusion = ConfusionMatrix::from_predictions(truth, pred, classes)?;
        Ok(Self { accuracy: overall_accuracy(&confusion)?, kappa: kappa(&confusion)?, confusion })
    }
}

/// Linear probe on frozen features of `train`, scored on `test`.
pub fn probe_run(model: &MaeModel, store: &ParamStore<f32>, train: &Labeled, test: &Labeled, cfg: &FitConfig) -> Result<(LinearProbe, ClassReport)> {
    let fa = extract_features(model, store, &train.batch(&(0..train.len()).collect::<Vec<_>>()), EVAL_BATCH)?;
    let fb = extract_features(model, store, &test.batch(&(0..test.len()).collect::<Vec<_>>()), EVAL_BATCH)?;
    let probe = linear_probe(&fa, &train.labels, train.classes, cfg)?;
    let report = ClassReport::new(&probe.predict(&fb)?, &test.labels, train.classes)?;
    Ok((probe, report))
}

/// Runs `f` over `waveforms` in chunks without gradient tracking and
/// concatenates the row outputs.
fn batched_rows<F>(store: &ParamStore<f32>, waveforms: &[IqWaveform<f32>], patch: usize, mut f: F) -> Result<Vec<Vec<f32>>>
where
    F: FnMut(&mut Graph<'_, f32>, &PackInput<f32>) -> Result<Vec<Vec<f32>>>,
{
    let frozen = vec![false; store.len()];
    let mut out = Vec::with_capacity(waveforms.len());
    for chunk in waveforms.chunks(EVAL_BATCH) {
        let refs: Vec<&IqWaveform<f32>> = chunk.iter().collect();
        let input = PackInput::from_waveforms(&refs, patch)?;
        let mut g = Graph::with_trainable(store, &frozen);
        out.extend(f(&mut g, &input)?);
    }
    Ok(out)
}

fn rows_of(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

/// Backbone plus linear classification head trained end to end (or with
/// the backbone frozen).
#[derive(Debug, Clone)]
pub struct Classifier {
    pub model: MaeModel,
    pub store: ParamStore<f32>,
    pub head: Dense,
    pub classes: usize,
    pub trace: Vec<f64>,
}

pub fn train_classifier(model: MaeModel, mut store: ParamStore<f32>, mode: BackboneMode, train: &Labeled, cfg: &FitConfig) -> Result<Classifier> {
    let dim = crate::tasks::feature_dim(&model);
    let head = Dense::new(&mut store, "cls_head", dim, train.classes, rng::derive(cfg.seed, &[HEAD_STREAM]))?;
    let mask = trainable_mask(store.len(), model.encoder_params(), &head.pids(), mode);
    let patch = model.config.patch_size;
    let trace = fit(&mut store, &mask, train.len(), cfg, |g, idx| {
        let input = PackInput::from_waveforms(&train.batch(idx), patch)?;
        let feats = pooled_features(g, &model, &input)?;
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        Ok(classify_loss(g, feats, &labels, &head)?.1)
    })?;
    Ok(Classifier { model, store, head, classes: train.classes, trace })
}

impl Classifier {
    pub fn predict(&self, waveforms: &[IqWaveform<f32>]) -> Result<Vec<usize>> {
        let rows = batched_rows(&self.store, waveforms, self.model.config.patch_size, |g, input| {
            let feats = pooled_features(g, &self.model, input)?;
            let logits = self.head.forward(g, feats)?;
            Ok(rows_of(g.value(logits)))
        })?;
        Ok(rows.iter().map(|r| crate::tasks::argmax(r)).collect())
    }

    pub fn evaluate(&self, test: &Labeled) -> Result<ClassReport> {
        ClassReport::new(&self.predict(&test.waveforms)?, &test.labels, self.classes)
    }
}

/// Column names of the regressed radar parameters.
pub const RADAR_PARAMS: [&str; REGRESSION_TARGETS] = ["n_p", "t_pw_us", "t_pri_us", "t_d_us"];

/// Min-max ranges of the regressed parameters, taken from the corpus spec.
pub fn radar_scales(spec: &RadarCorpusSpec) -> Result<[MinMax; REGRESSION_TARGETS]> {
    Ok([
        MinMax::new(f64::from(spec.n_p.0), f64::from(spec.n_p.1))?,
        MinMax::new(spec.t_pw_us.0, spec.t_pw_us.1)?,
        MinMax::new(spec.t_pri_us.0, spec.t_pri_us.1)?,
        MinMax::new(spec.t_d_us.0, spec.t_d_us.1)?,
    ])
}

/// Radar records with waveform labels and raw pulse parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSet {
    pub data: Labeled,
    pub params: Vec<[f64; REGRESSION_TARGETS]>,
}

impl JointSet {
    pub fn from_records(records: &[IqRecord], classes: Option<usize>) -> Result<Self> {
        let params = records
            .iter()
            .enumerate()
            .map(|(i, r)| match (r.num_pulses, r.pulse_width_us, r.pri_us, r.pulse_time_delay_us) {
                (Some(n), Some(pw), Some(pri), Some(d)) => Ok([n as f64, pw, pri, d]),
                _ => Err(Error::InsufficientData(format!("record {i} lacks pulse parameters"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { data: Labeled::from_records(records, classes)?, params })
    }

    fn targets(&self, idx: &[usize], scales: &[MinMax; REGRESSION_TARGETS]) -> Tensor<f32> {
        let data = idx
            .iter()
            .flat_map(|&i| self.params[i].iter().zip(scales).map(|(&v, s)| s.normalize(v) as f32).collect::<Vec<_>>())
            .collect();
        Tensor { rows: idx.len(), cols: REGRESSION_TARGETS, data }
    }
}

#[derive(Debug, Clone)]
pub struct JointModel {
    pub model: MaeModel,
    pub store: ParamStore<f32>,
    pub head: JointHead,
    pub scales: [MinMax; REGRESSION_TARGETS],
    pub classes: usize,
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub class: ClassReport,
    /// Mean absolute error per parameter in its own unit.
    pub mae: [f64; REGRESSION_TARGETS],
}

pub fn train_joint(
    model: MaeModel,
    mut store: ParamStore<f32>,
    mode: BackboneMode,
    train: &JointSet,
    scales: [MinMax; REGRESSION_TARGETS],
    lambda: f64,
    cfg: &FitConfig,
) -> Result<JointModel> {
    let dim = crate::tasks::feature_dim(&model);
    let classes = train.data.classes;
    let head = JointHead::new(&mut store, "joint", dim, classes, rng::derive(cfg.seed, &[HEAD_STREAM]))?;
    let mask = trainable_mask(store.len(), model.encoder_params(), &head.pids(), mode);
    let patch = model.config.patch_size;
    let trace = fit(&mut store, &mask, train.data.len(), cfg, |g, idx| {
        let input = PackInput::from_waveforms(&train.data.batch(idx), patch)?;
        let feats = pooled_features(g, &model, &input)?;
        let labels: Vec<usize> = idx.iter().map(|&i| train.data.labels[i]).collect();
        Ok(joint_loss(g, feats, &labels, &train.targets(idx, &scales), &head, lambda)?.loss)
    })?;
    Ok(JointModel { model, store, head, scales, classes, trace })
}

impl JointModel {
    /// Predicted classes and denormalized parameters.
    pub fn predict(&self, waveforms: &[IqWaveform<f32>]) -> Result<(Vec<usize>, Vec<[f64; REGRESSION_TARGETS]>)> {
        let rows = batched_rows(&self.store, waveforms, self.model.config.patch_size, |g, input| {
            let feats = pooled_features(g, &self.model, input)?;
            let logits = self.head.class.forward(g, feats)?;
            let reg = self.head.regression(g, feats)?;
            let (l, r) = (g.value(logits), g.value(reg));
            Ok((0..l.rows).map(|i| l.row(i).iter().chain(r.row(i)).copied().collect()).collect())
        })?;
        let c = self.classes;
        let classes = rows.iter().map(|r| crate::tasks::argmax(&r[..c])).collect();
        let params = rows
            .iter()
            .map(|r| {
                let mut p = [0.0; REGRESSION_TARGETS];
                for (k, s) in self.scales.iter().enumerate() {
                    p[k] = s.denormalize(f64::from(r[c + k]));
                }
                p
            })
            .collect();
        Ok((classes, params))
    }

    pub fn evaluate(&self, test: &JointSet) -> Result<JointReport> {
        let (pred, params) = self.predict(&test.data.waveforms)?;
        let class = ClassReport::new(&pred, &test.data.labels, self.classes)?;
        let mut mae = [0.0; REGRESSION_TARGETS];
        for (p, t) in params.iter().zip(&test.params) {
            for k in 0..REGRESSION_TARGETS {
                mae[k] += (p[k] - t[k]).abs() / test.params.len().max(1) as f64;
            }
        }
        Ok(JointReport { class, mae })
    }
}

/// Mixtures scaled to unit component peak, with references scaled by the
/// same factor and zero-padded to `sources` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationSet {
    pub mixtures: Vec<IqWaveform<f32>>,
    /// Per mixture, `sources` interleaved I/Q references.
    pub references: Vec<Vec<Vec<f32>>>,
    /// True source count per mixture.
    pub active: Vec<usize>,
    pub sources: usize,
}

impl SeparationSet {
    pub fn from_samples(samples: &[MixtureSample], sources: usize) -> Result<Self> {
        let mut set = Self { mixtures: Vec::new(), references: Vec::new(), active: Vec::new(), sources };
        for (i, s) in samples.iter().enumerate() {
            if s.references.len() > sources {
                return Err(Error::Contract(format!("mixture {i} holds {} sources, head has {sources}", s.references.len())));
            }
            let w = &s.record.waveform;
            let peak = w.peak_component();
            let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
            let samples = w.samples().iter().map(|c| c * scale).collect();
            set.mixtures.push(IqWaveform::new(samples, w.sample_rate_hz())?);
            let mut refs: Vec<Vec<f32>> = s.references.iter().map(|r| r.interleaved().iter().map(|v| v * scale).collect()).collect();
            refs.resize(sources, vec![0.0; 2 * w.len()]);
            set.references.push(refs);
            set.active.push(s.references.len());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.mixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixtures.is_empty()
    }

    fn reference_tensors(&self, idx: &[usize]) -> Vec<Tensor<f32>> {
        (0..self.sources)
            .map(|k| {
                let data: Vec<f32> = idx.iter().flat_map(|&i| self.references[i][k].iter().copied()).collect();
                Tensor { rows: idx.len(), cols: data.len() / idx.len().max(1), data }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Separator {
    pub model: MaeModel,
    pub store: ParamStore<f32>,
    pub head: BssHead,
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationOptions {
    pub target: SeparationTarget,
    pub lambda_z: f64,
}

impl Default for SeparationOptions {
    fn default() -> Self {
        Self { target: SeparationTarget::Sources, lambda_z: 1e-4 }
    }
}

pub fn train_separation(
    model: MaeModel,
    mut store: ParamStore<f32>,
    mode: BackboneMode,
    train: &SeparationSet,
    opts: SeparationOptions,
    cfg: &FitConfig,
) -> Result<Separator> {
    let len = train.mixtures.first().map(IqWaveform::len).ok_or_else(|| Error::InsufficientData("no mixtures".into()))?;
    let bss = BssConfig::scaled(model.config.embed_dim, train.sources, len);
    let head = BssHead::new(&mut store, "bss", bss, &model, rng::derive(cfg.seed, &[HEAD_STREAM]))?;
    let mask = trainable_mask(store.len(), model.encoder_params(), &head.pids(), mode);
    let patch = model.config.patch_size;
    let trace = fit(&mut store, &mask, train.len(), cfg, |g, idx| {
        let ws: Vec<&IqWaveform<f32>> = idx.iter().map(|&i| &train.mixtures[i]).collect();
        let input = PackInput::from_waveforms(&ws, patch)?;
        let out = bss_forward(g, &model, &head, &input)?;
        let recon = match opts.target {
            SeparationTarget::Sources => pit_loss(g, &out.estimates, &train.reference_tensors(idx))?.loss,
            SeparationTarget::Mixture => {
                let data = ws.iter().flat_map(|w| w.interleaved()).collect();
                let mix = Tensor { rows: ws.len(), cols: 2 * len, data };
                mixture_loss(g, &out.estimates, &mix)?
            }
        };
        if opts.lambda_z == 0.0 {
            return Ok(recon);
        }
        let reg = latent_reg(g, out.latent, opts.lambda_z)?;
        Ok(g.sum(&[recon, reg]))
    })?;
    Ok(Separator { model, store, head, trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// SDR of every true source in the test set, in dB.
    pub sdr_db: Vec<f64>,
    pub si_sdr_db: Vec<f64>,
    pub median_sdr_db: f64,
    pub mean_sdr_db: f64,
    pub mean_si_sdr_db: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Separator {
    /// Per mixture, one interleaved estimate per channel.
    pub fn separate(&self, mixtures: &[IqWaveform<f32>]) -> Result<Vec<Vec<Vec<f32>>>> {
        let k = self.head.config.sources;
        let rows = batched_rows(&self.store, mixtures, self.model.config.patch_size, |g, input| {
            let out = bss_forward(g, &self.model, &self.head, input)?;
            let ests: Vec<&Tensor<f32>> = out.estimates.iter().map(|&e| g.value(e)).collect();
            Ok((0..input.records()).map(|r| ests.iter().flat_map(|t| t.row(r).iter().copied()).collect()).collect())
        })?;
        Ok(rows.into_iter().map(|r| r.chunks(r.len() / k).map(<[f32]>::to_vec).collect()).collect())
    }

    /// Estimates are matched to references by PIT and scored against the
    /// true sources only.
    pub fn evaluate(&self, test: &SeparationSet) -> Result<SeparationReport> {
        let estimates = self.separate(&test.mixtures)?;
        let (mut sdr, mut si) = (Vec::new(), Vec::new());
        for ((est, refs), &active) in estimates.iter().zip(&test.references).zip(&test.active) {
            let e64: Vec<Vec<f64>> = est.iter().map(|e| e.iter().map(|&v| f64::from(v)).collect()).collect();
            let r64: Vec<Vec<f64>> = refs.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
            let es: Vec<&[f64]> = e64.iter().map(Vec::as_slice).collect();
            let rs: Vec<&[f64]> = r64.iter().map(Vec::as_slice).collect();
            let (_, perm) = pit_mse(&es, &rs)?;
            for (k, &j) in perm.iter().enumerate() {
                if j >= active {
                    continue;
                }
                let score = bss_eval(es[k], &rs[..active], j)?;
                sdr.push(score.sdr_db);
                si.push(score.si_sdr_db);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok(SeparationReport {
            median_sdr_db: median(&sdr),
            mean_sdr_db: mean(&sdr),
            mean_si_sdr_db: mean(&si),
            sdr_db: sdr,
            si_sdr_db: si,
        })
    }
}
