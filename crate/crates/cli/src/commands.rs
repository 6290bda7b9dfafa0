use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use iqfm::config::{RunConfig, TaskKind};
use iqfm::corpus::{few_shot_select, partition, write_records, Attribute, CorpusReader, IqRecord, RecordMeta, SplitSpec};
use iqfm::experiment::{
    backbone, pretrain, probe_run, radar_scales, radar_task, reconstruction_loss, reference_records, regroup_mixtures,
    split_holdout, train_classifier, train_joint, train_separation, Dataset, JointSet, Labeled, SeparationOptions,
    SeparationSet, ToyCorpus, RADAR_PARAMS,
};
use iqfm::net::{AdamWState, Checkpoint, MaeModel, ModelConfig, ParamStore};
use iqfm::packer::{pack_greedy, utilization_report, UtilizationReport};
use iqfm::synth::datasets::{device_records, mixture_records, modulation_records, radar_records, DeviceCorpusSpec};
use iqfm::synth::IqWaveform;
use iqfm::tasks::BackboneMode;
use iqfm::{Error, Result};
use log::info;
use serde_json::json;

use crate::rundir::RunDir;
use crate::{Command, Common, SynthKind, TaskArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { kind, count, snr_db, sources, common } => synth(kind, count, snr_db, sources, &common),
        Command::PackStats { corpora, capacity, common } => pack_stats(&corpora, capacity, &common),
        Command::Pretrain { corpora, weights, steps, capacity, batch, lr, init, common } => {
            let mut cfg = resolve(&common)?;
            if !corpora.is_empty() {
                cfg.corpus.paths = corpora;
            }
            if !weights.is_empty() {
                cfg.corpus.weights = weights;
            }
            set(&mut cfg.pretrain.steps, steps);
            set(&mut cfg.pretrain.capacity, capacity);
            set(&mut cfg.pretrain.batch, batch);
            set(&mut cfg.pretrain.lr, lr);
            pretrain_cmd(cfg, init, &common)
        }
        Command::Finetune { task, task_args, common } => {
            let mut cfg = resolve_task(&common, &task_args)?;
            set(&mut cfg.task.kind, task);
            finetune_cmd(cfg, &common)
        }
        Command::Probe { task_args, random_init, common } => {
            let cfg = resolve_task(&common, &task_args)?;
            probe_cmd(cfg, random_init, &common)
        }
        Command::Fewshot { k, by_snr, task_args, common } => {
            let mut cfg = resolve_task(&common, &task_args)?;
            set(&mut cfg.task.shots, k);
            fewshot_cmd(cfg, by_snr, &common)
        }
        Command::Separate { task_args, from_scratch, frozen, target, lambda_z, common } => {
            let mut cfg = resolve_task(&common, &task_args)?;
            cfg.task.kind = TaskKind::Separate;
            if from_scratch && frozen {
                return Err(Error::Config("--from-scratch and --frozen are exclusive".into()));
            }
            if from_scratch {
                cfg.task.backbone = BackboneMode::Scratch;
            } else if frozen {
                cfg.task.backbone = BackboneMode::Frozen;
            }
            set(&mut cfg.task.target, target.map(Into::into));
            set(&mut cfg.task.lambda_z, lambda_z);
            separate_cmd(cfg, &common)
        }
        Command::Eval { checkpoint, corpora, common } => eval_cmd(&checkpoint, &corpora, &common),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Defaults, then the config file, then flags; validated before use.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.preset, common.preset);
    set(&mut cfg.workers, common.workers);
    if common.deterministic {
        cfg.deterministic = true;
        cfg.workers = 1;
    }
    Ok(cfg)
}

fn resolve_task(common: &Common, args: &TaskArgs) -> Result<RunConfig> {
    let mut cfg = resolve(common)?;
    let t = &mut cfg.task;
    set(&mut t.train, args.train.clone());
    set(&mut t.test, args.test.clone());
    if args.init.is_some() {
        t.init = args.init.clone();
    }
    set(&mut t.backbone, args.backbone);
    set(&mut t.steps, args.steps);
    set(&mut t.batch, args.batch);
    set(&mut t.lr, args.lr);
    Ok(cfg)
}

fn open_run(cfg: &RunConfig, common: &Common, command: &str) -> Result<RunDir> {
    cfg.validate()?;
    let root = common.run_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
    let dir = RunDir::create(root)?;
    dir.write_snapshot(cfg)?;
    info!("run directory {}", dir.root.display());
    Ok(dir)
}

fn read_corpus(path: &Path) -> Result<Vec<IqRecord>> {
    if path.as_os_str().is_empty() {
        return Err(Error::Config("a corpus path is required".into()));
    }
    CorpusReader::open(path)?.read_all()
}

fn required<'a>(path: &'a Path, what: &str) -> Result<&'a Path> {
    if path.as_os_str().is_empty() {
        Err(Error::Config(format!("--{what} is required")))
    } else {
        Ok(path)
    }
}

fn save_records(dir: &RunDir, name: &str, records: &[IqRecord]) -> Result<PathBuf> {
    let path = dir.artifact(name);
    write_records(records, &path)?;
    info!("wrote {} records to {}", records.len(), path.display());
    Ok(path)
}

fn synth(kind: SynthKind, count: Option<usize>, snr_db: Option<f64>, sources: Option<usize>, common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let dir = open_run(&cfg, common, "synth")?;
    let seed = cfg.seed;
    let snr = snr_db.unwrap_or(10.0);
    match kind {
        SynthKind::Toy => {
            let mut toy = ToyCorpus::new(seed);
            if let Some(n) = count {
                toy.modulation.records_per_class = n;
                toy.radar.records_per_class = n;
            }
            dir.write_json(&dir.artifact("synth_spec.json"), &toy)?;
            let sets = toy.records()?;
            save_records(&dir, "toy_comm.emr1", &sets[0])?;
            save_records(&dir, "toy_radar.emr1", &sets[1])?;
        }
        SynthKind::Modulation => {
            let spec = iqfm::experiment::modulation_task(count.unwrap_or(100), snr, seed);
            dir.write_json(&dir.artifact("synth_spec.json"), &spec)?;
            save_records(&dir, "modulation.emr1", &modulation_records(&spec)?)?;
        }
        SynthKind::Radar => {
            let spec = radar_task(count.unwrap_or(100), snr, seed);
            dir.write_json(&dir.artifact("synth_spec.json"), &spec)?;
            save_records(&dir, "radar.emr1", &radar_records(&spec)?)?;
        }
        SynthKind::Mixture => {
            let mut spec = iqfm::experiment::mixture_task(count.unwrap_or(2000), seed);
            if let Some(s) = snr_db {
                spec.snr_db = s;
            }
            match sources {
                Some(1) => spec.pair_probability = 0.0,
                Some(2) | None => {}
                Some(k) => return Err(Error::Config(format!("mixtures hold one or two sources, not {k}"))),
            }
            dir.write_json(&dir.artifact("synth_spec.json"), &spec)?;
            let samples = mixture_records(&spec)?;
            let mixtures: Vec<IqRecord> = samples.iter().map(|s| s.record.clone()).collect();
            save_records(&dir, "mixtures.emr1", &mixtures)?;
            save_records(&dir, "mixtures.refs.emr1", &reference_records(&samples))?;
        }
        SynthKind::Device => {
            let spec = DeviceCorpusSpec {
                records_per_device: count.unwrap_or(50),
                snr_db: snr_db.unwrap_or(20.0),
                seed,
                ..DeviceCorpusSpec::default()
            };
            dir.write_json(&dir.artifact("synth_spec.json"), &spec)?;
            save_records(&dir, "devices.emr1", &device_records(&spec)?)?;
        }
    }
    Ok(())
}

fn pack_stats(corpora: &[PathBuf], capacity: Option<usize>, common: &Common) -> Result<()> {
    let mut cfg = resolve(common)?;
    set(&mut cfg.pretrain.capacity, capacity);
    cfg.corpus.paths = corpora.to_vec();
    let dir = open_run(&cfg, common, "pack-stats")?;
    let patch = cfg.model().patch_size;
    let mut csv = format!("corpus,{}\n", UtilizationReport::CSV_HEADER);
    let mut all = Vec::new();
    for (d, path) in corpora.iter().enumerate() {
        let reader = CorpusReader::open(path)?;
        let lengths: Vec<(u64, usize)> = reader
            .manifest()
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (iqfm::sampler::global_id(d, i as u64), r.sample_count as usize))
            .collect();
        let report = utilization_report(&pack_greedy(lengths.iter().copied(), cfg.pretrain.capacity, patch)?)?;
        writeln!(csv, "{},{}", path.display(), report.csv_row()).expect("string write");
        all.extend(lengths);
    }
    let report = utilization_report(&pack_greedy(all, cfg.pretrain.capacity, patch)?)?;
    writeln!(csv, "all,{}", report.csv_row()).expect("string write");
    dir.write(&dir.metric("pack_stats.csv"), &csv)?;
    println!(
        "{} records in {} packs: utilization {:.4}, pad-to-max {:.4}",
        report.records, report.packs, report.mean_utilization, report.pad_to_max_utilization
    );
    Ok(())
}

/// Splits each corpus into training and holdout sets by seeded partition.
fn load_datasets(cfg: &RunConfig) -> Result<(Vec<Dataset>, Vec<Dataset>)> {
    if cfg.corpus.paths.is_empty() {
        return Err(Error::Config("pretraining needs at least one --corpus".into()));
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for path in &cfg.corpus.paths {
        let records = read_corpus(path)?;
        let frac = cfg.corpus.holdout_fraction;
        let (tr, ho) = if frac > 0.0 && records.len() > 1 {
            let metas = RecordMeta::from_records(&records, None);
            let (a, b) = partition(&metas, &SplitSpec::new(1.0 - frac, cfg.seed))?;
            (a.iter().map(|&i| records[i].clone()).collect::<Vec<_>>(), b.iter().map(|&i| records[i].clone()).collect())
        } else {
            (records, Vec::new())
        };
        let (mut t, _) = split_holdout(&[tr], 0)?;
        let h = if ho.is_empty() {
            Dataset::new(t[0].name.clone(), Vec::new())
        } else {
            split_holdout(&[ho], 0)?.0.remove(0)
        };
        train.push(t.remove(0));
        held.push(h);
    }
    Ok((train, held))
}

fn pretrain_cmd(cfg: RunConfig, init: Option<PathBuf>, common: &Common) -> Result<()> {
    let dir = open_run(&cfg, common, "pretrain")?;
    let (train, held) = load_datasets(&cfg)?;
    let pcfg = cfg.pretrain_config();
    let init_store = match &init {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            if ck.model != pcfg.model {
                return Err(Error::Config(format!("checkpoint {} was trained with a different model", p.display())));
            }
            Some(ck.store)
        }
        None => None,
    };
    let mut log = String::from("step,loss,lr,records,tokens\n");
    let every = (pcfg.steps / 20).max(1);
    let run = pretrain(&train, &held, &pcfg, init_store, |s| {
        writeln!(log, "{},{:.6e},{:.6e},{},{}", s.step, s.loss, s.lr, s.records, s.tokens).expect("string write");
        if s.step % every == 0 {
            info!("step {} loss {:.5} lr {:.2e}", s.step, s.loss, s.lr);
        }
    })?;
    dir.write(&dir.log("pretrain.csv"), &log)?;
    let mut eval = String::from("step,mean");
    for d in &train {
        write!(eval, ",loss_{0},weight_{0}", d.name).expect("string write");
    }
    eval.push('\n');
    for e in &run.evals {
        write!(eval, "{},{:.6e}", e.step, e.mean).expect("string write");
        for (l, w) in e.per_dataset.iter().zip(&e.weights) {
            write!(eval, ",{l:.6e},{w}").expect("string write");
        }
        eval.push('\n');
    }
    dir.write(&dir.metric("eval.csv"), &eval)?;
    let path = dir.checkpoint("pretrain.iqfc");
    let meta = json!({ "kind": "pretrain", "steps": pcfg.steps, "datasets": train.iter().map(|d| &d.name).collect::<Vec<_>>() });
    Checkpoint { model: pcfg.model.clone(), meta: meta.to_string(), store: run.store, optimizer: run.optimizer }.save(&path)?;
    let last = run.steps.last().map_or(f64::NAN, |s| s.loss);
    println!("final loss {last:.6e}; checkpoint {}", path.display());
    Ok(())
}

/// Backbone from `--init` or, for scratch runs, the configured preset.
fn task_backbone(cfg: &RunConfig, mode: BackboneMode) -> Result<(MaeModel, ParamStore<f32>)> {
    match (&cfg.task.init, mode) {
        (_, BackboneMode::Scratch) => backbone(&cfg.model(), None, mode, cfg.seed),
        (Some(p), _) => {
            let ck = Checkpoint::<f32>::load(p)?;
            backbone(&ck.model, Some(&ck.store), mode, cfg.seed)
        }
        (None, _) => Err(Error::Config("--init <checkpoint> is required unless the backbone is trained from scratch".into())),
    }
}

fn write_trace(dir: &RunDir, name: &str, trace: &[f64]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(s, "{i},{l:.6e}").expect("string write");
    }
    dir.write(&dir.log(name), &s)
}

fn save_task(dir: &RunDir, name: &str, model: &ModelConfig, store: ParamStore<f32>, meta: serde_json::Value) -> Result<()> {
    let path = dir.checkpoint(name);
    Checkpoint { model: model.clone(), meta: meta.to_string(), store, optimizer: AdamWState::default() }.save(&path)?;
    info!("saved {}", path.display());
    Ok(())
}

fn finetune_cmd(cfg: RunConfig, common: &Common) -> Result<()> {
    let dir = open_run(&cfg, common, "finetune")?;
    let train = read_corpus(required(&cfg.task.train, "train")?)?;
    let test = read_corpus(required(&cfg.task.test, "test")?)?;
    let mode = cfg.task.backbone;
    let (model, store) = task_backbone(&cfg, mode)?;
    let fit = cfg.fit_config();
    match cfg.task.kind {
        TaskKind::Classify => {
            let tr = Labeled::from_records(&train, None)?;
            let te = Labeled::from_records(&test, Some(tr.classes))?;
            let clf = train_classifier(model, store, mode, &tr, &fit)?;
            let report = clf.evaluate(&te)?;
            write_trace(&dir, "finetune.csv", &clf.trace)?;
            dir.write(&dir.metric("confusion.csv"), &report.confusion.to_csv())?;
            dir.write_json(&dir.metric("report.json"), &json!({ "accuracy": report.accuracy, "kappa": report.kappa, "backbone": mode }))?;
            println!("accuracy {:.4} kappa {:.4}", report.accuracy, report.kappa);
            save_task(&dir, "finetune.iqfc", &clf.model.config, clf.store, json!({ "kind": "classify", "classes": clf.classes }))
        }
        TaskKind::Joint => {
            let tr = JointSet::from_records(&train, None)?;
            let te = JointSet::from_records(&test, Some(tr.data.classes))?;
            let scales = radar_scales(&radar_task(1, 10.0, 0))?;
            let jm = train_joint(model, store, mode, &tr, scales, cfg.task.lambda, &fit)?;
            let report = jm.evaluate(&te)?;
            write_trace(&dir, "finetune.csv", &jm.trace)?;
            dir.write(&dir.metric("confusion.csv"), &report.class.confusion.to_csv())?;
            let mae: serde_json::Map<String, serde_json::Value> =
                RADAR_PARAMS.iter().zip(report.mae).map(|(k, v)| (k.to_string(), json!(v))).collect();
            dir.write_json(
                &dir.metric("report.json"),
                &json!({ "accuracy": report.class.accuracy, "kappa": report.class.kappa, "mae": mae, "backbone": mode }),
            )?;
            println!("accuracy {:.4} t_pw MAE {:.4} us", report.class.accuracy, report.mae[1]);
            save_task(&dir, "finetune.iqfc", &jm.model.config, jm.store, json!({ "kind": "joint", "classes": jm.classes }))
        }
        TaskKind::Separate => Err(Error::Config("use the separate command for separation tasks".into())),
    }
}

fn probe_cmd(cfg: RunConfig, random_init: bool, common: &Common) -> Result<()> {
    let dir = open_run(&cfg, common, "probe")?;
    let train = Labeled::from_records(&read_corpus(required(&cfg.task.train, "train")?)?, None)?;
    let test = Labeled::from_records(&read_corpus(required(&cfg.task.test, "test")?)?, Some(train.classes))?;
    let mode = if random_init { BackboneMode::Scratch } else { BackboneMode::Frozen };
    let (model, store) = task_backbone(&cfg, mode)?;
    let fingerprint = store.fingerprint(0..store.len());
    let (probe, report) = probe_run(&model, &store, &train, &test, &cfg.fit_config())?;
    write_trace(&dir, "probe.csv", &probe.trace)?;
    dir.write(&dir.metric("confusion.csv"), &report.confusion.to_csv())?;
    dir.write_json(
        &dir.metric("probe.json"),
        &json!({
            "accuracy": report.accuracy,
            "kappa": report.kappa,
            "train_accuracy": probe.train_accuracy,
            "random_init": random_init,
            "backbone_fingerprint": format!("{fingerprint:016x}"),
        }),
    )?;
    println!("probe accuracy {:.4} (train {:.4})", report.accuracy, probe.train_accuracy);
    Ok(())
}

fn fewshot_cmd(cfg: RunConfig, by_snr: bool, common: &Common) -> Result<()> {
    let dir = open_run(&cfg, common, "fewshot")?;
    let records = read_corpus(required(&cfg.task.train, "train")?)?;
    let ids: Vec<usize> = (0..records.len()).collect();
    let snr = by_snr.then_some(Attribute::SnrDb);
    let support = few_shot_select(&records, &ids, cfg.task.shots, Attribute::InferClass, snr, cfg.seed)?;
    let mut manifest = String::from("id\n");
    for id in &support {
        writeln!(manifest, "{id}").expect("string write");
    }
    dir.write(&dir.artifact("support.csv"), &manifest)?;
    println!("support set of {} records", support.len());
    if cfg.task.test.as_os_str().is_empty() {
        return Ok(());
    }
    let chosen: Vec<IqRecord> = support.iter().map(|&i| records[i].clone()).collect();
    let tr = Labeled::from_records(&chosen, None)?;
    let te = Labeled::from_records(&read_corpus(&cfg.task.test)?, Some(tr.classes))?;
    let mode = cfg.task.backbone;
    let (model, store) = task_backbone(&cfg, mode)?;
    let clf = train_classifier(model, store, mode, &tr, &cfg.fit_config())?;
    let report = clf.evaluate(&te)?;
    write_trace(&dir, "fewshot.csv", &clf.trace)?;
    dir.write(&dir.metric("confusion.csv"), &report.confusion.to_csv())?;
    dir.write_json(
        &dir.metric("report.json"),
        &json!({ "accuracy": report.accuracy, "kappa": report.kappa, "support": support.len(), "backbone": mode }),
    )?;
    println!("accuracy {:.4} kappa {:.4}", report.accuracy, report.kappa);
    Ok(())
}

fn refs_path(mixtures: &Path) -> PathBuf {
    let stem = mixtures.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    mixtures.with_file_name(format!("{stem}.refs.emr1"))
}

fn load_separation(path: &Path, sources: usize) -> Result<SeparationSet> {
    let mixtures = read_corpus(path)?;
    let refs = read_corpus(&refs_path(path))?;
    SeparationSet::from_samples(&regroup_mixtures(mixtures, &refs)?, sources)
}

fn separate_cmd(cfg: RunConfig, common: &Common) -> Result<()> {
    let dir = open_run(&cfg, common, "separate")?;
    let k = cfg.task.sources;
    let train = load_separation(required(&cfg.task.train, "train")?, k)?;
    let test = load_separation(required(&cfg.task.test, "test")?, k)?;
    let mode = cfg.task.backbone;
    let (model, store) = task_backbone(&cfg, mode)?;
    let opts = SeparationOptions { target: cfg.task.target, lambda_z: cfg.task.lambda_z };
    let sep = train_separation(model, store, mode, &train, opts, &cfg.fit_config())?;
    let report = sep.evaluate(&test)?;
    write_trace(&dir, "separate.csv", &sep.trace)?;
    let mut rows = String::from("source,sdr_db,si_sdr_db\n");
    for (i, (s, si)) in report.sdr_db.iter().zip(&report.si_sdr_db).enumerate() {
        writeln!(rows, "{i},{s:.6},{si:.6}").expect("string write");
    }
    dir.write(&dir.metric("separation.csv"), &rows)?;
    dir.write_json(
        &dir.metric("summary.json"),
        &json!({
            "backbone": mode,
            "median_sdr_db": report.median_sdr_db,
            "mean_sdr_db": report.mean_sdr_db,
            "mean_si_sdr_db": report.mean_si_sdr_db,
            "sources_scored": report.sdr_db.len(),
        }),
    )?;
    let estimates = sep.separate(&test.mixtures)?;
    let mut out = Vec::new();
    for (i, (chans, mix)) in estimates.iter().zip(&test.mixtures).enumerate() {
        for c in chans {
            let mut r = IqRecord::new(IqWaveform::from_interleaved(c, mix.sample_rate_hz())?, "Separated");
            r.transmission_id = Some(i as i64);
            out.push(r);
        }
    }
    save_records(&dir, "separated.emr1", &out)?;
    println!("median SDR {:.3} dB, mean SI-SDR {:.3} dB", report.median_sdr_db, report.mean_si_sdr_db);
    save_task(&dir, "separate.iqfc", &sep.model.config, sep.store, json!({ "kind": "separate", "sources": k, "backbone": mode }))
}

fn eval_cmd(checkpoint: &Path, corpora: &[PathBuf], common: &Common) -> Result<()> {
    let mut cfg = resolve(common)?;
    cfg.corpus.paths = corpora.to_vec();
    let dir = open_run(&cfg, common, "eval")?;
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let model = MaeModel::attach(ck.model.clone(), &ck.store)?;
    let (params, _) = ck.model.param_counts();
    let mut losses = serde_json::Map::new();
    for path in corpora {
        let (sets, _) = split_holdout(&[read_corpus(path)?], 0)?;
        let capacity = cfg.pretrain.capacity.min(ck.model.max_tokens);
        let loss = reconstruction_loss(&model, &ck.store, &sets[0].waveforms, capacity, cfg.seed)?;
        println!("{}: reconstruction loss {loss:.6e}", path.display());
        losses.insert(path.display().to_string(), json!(loss));
    }
    dir.write_json(&dir.metric("eval.json"), &json!({ "checkpoint": checkpoint, "parameters": params, "reconstruction_loss": losses }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refs_live_next_to_mixtures() {
        assert_eq!(refs_path(Path::new("a/b/mix.emr1")), PathBuf::from("a/b/mix.refs.emr1"));
    }
}
