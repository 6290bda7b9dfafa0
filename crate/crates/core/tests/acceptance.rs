//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.
//!
//! `IQFM_ACCEPT=1,4,13` restricts the run to the listed criteria.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{mpsc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use iqfm::experiment::{
    backbone, median, modulation_task, pretrain, probe_run, radar_scales, radar_task, toy_mixtures,
    toy_pretrain_config, train_joint, train_separation, JointSet, Labeled, PretrainRun, SeparationOptions,
    SeparationSet, ToyCorpus,
};
use iqfm::masker::{masked_count, plan_masks, plan_masks_reference};
use iqfm::metrics::{bss_decompose, kappa, overall_accuracy, si_sdr, ConfusionMatrix};
use iqfm::net::{grad_check, Graph, MaeModel, ModelConfig, PackInput, ParamStore, Preset, Tensor};
use iqfm::packer::{pack_greedy, utilization_report, PackedSequence};
use iqfm::rng;
use iqfm::sampler::{run_pipeline, PrefetchBuffer, SamplerState};
use iqfm::synth::datasets::{modulation_records, radar_records};
use iqfm::synth::IqWaveform;
use iqfm::tasks::{
    bss_forward, classify_loss, joint_loss, latent_reg, pit_loss, pooled_features, BackboneMode, BssConfig, BssHead,
    Dense, FitConfig, JointHead,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        Err(format!("took {:.1}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
    } else {
        Ok(())
    }
}

/// Uniform noise record of `patches` patches drawn from the given range.
fn random_wave(r: &mut impl Rng, patches: std::ops::RangeInclusive<usize>) -> IqWaveform<f32> {
    let n = 8 * r.random_range(patches);
    let v: Vec<f32> = (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect();
    IqWaveform::from_interleaved(&v, 1e6 * (1 + r.random_range(0..8)) as f64).unwrap()
}

fn random_packs(count: usize, seed: u64) -> Vec<PackedSequence> {
    let mut r = rng::rng(seed, &[]);
    let mut packs = Vec::new();
    let mut id = 0u64;
    while packs.len() < count {
        let recs: Vec<(u64, usize)> = (0..40)
            .map(|_| {
                id += 1;
                (id, 8 * r.random_range(16..=512))
            })
            .collect();
        packs.extend(pack_greedy(recs, 6000, 8).unwrap());
    }
    packs.truncate(count);
    packs
}

fn c1_packing() -> Outcome {
    let start = Instant::now();
    let mut r = rng::rng(11, &[]);
    let records: Vec<(u64, usize)> = (0..10_000u64).map(|i| (i, 8 * r.random_range(16..=512))).collect();
    let packs = pack_greedy(records.iter().copied(), 6000, 8).map_err(|e| e.to_string())?;
    let mut ids: Vec<u64> = packs.iter().flat_map(|p| p.record_ids.iter().copied()).collect();
    ids.sort_unstable();
    if ids != (0..10_000).collect::<Vec<_>>() {
        return Err("record multiset changed".into());
    }
    if let Some(p) = packs.iter().find(|p| p.len() > 6000) {
        return Err(format!("pack of {} tokens", p.len()));
    }
    let rep = utilization_report(&packs).map_err(|e| e.to_string())?;
    within(Duration::from_secs(5), start)?;
    ensure(
        rep.mean_utilization > rep.pad_to_max_utilization,
        format!("{} packs, utilization {:.4} vs pad-to-max {:.4}", packs.len(), rep.mean_utilization, rep.pad_to_max_utilization),
    )
}

fn c2_mask_counts() -> Outcome {
    let start = Instant::now();
    let packs = random_packs(1000, 21);
    let mut records = 0;
    for (k, p) in packs.iter().enumerate() {
        let plan = plan_masks(p, 0.75, k as u64).map_err(|e| e.to_string())?;
        for (r, &masked) in plan.masked.iter().enumerate() {
            let n = p.patch_count(r);
            let want = ((0.75 * n as f64).round() as usize).clamp(1, n - 1);
            if masked != want || masked != masked_count(n, 0.75) || masked == 0 || masked == n {
                return Err(format!("pack {k} record {r}: {masked} of {n} masked, want {want}"));
            }
            records += 1;
        }
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!("{records} records over 1000 packs"))
}

fn c3_mask_oracle() -> Outcome {
    for (k, p) in random_packs(1000, 31).iter().enumerate() {
        let fast = plan_masks(p, 0.75, k as u64).map_err(|e| e.to_string())?;
        let slow = plan_masks_reference(p, 0.75, k as u64).map_err(|e| e.to_string())?;
        if fast != slow {
            return Err(format!("plans differ on pack {k}"));
        }
    }
    Ok("1000 packs identical".into())
}

fn latents(model: &MaeModel, store: &ParamStore<f32>, ws: &[&IqWaveform<f32>], seed: u64) -> Vec<f32> {
    let input = PackInput::<f32>::from_waveforms(ws, 8).unwrap();
    let plan = plan_masks(&input.pack, 0.75, seed).unwrap();
    let mut g = Graph::new(store);
    let ts = model.tokenize(&mut g, &input).unwrap();
    let enc = model.encode(&mut g, &ts, &plan, &input.pack).unwrap();
    let v = g.value(enc.latents);
    v.data[enc.blocks[0].start * v.cols..enc.blocks[0].end * v.cols].to_vec()
}

fn c4_block_isolation() -> Outcome {
    let mut store = ParamStore::<f32>::new();
    let model = MaeModel::new(ModelConfig::preset(Preset::Tiny), &mut store, 4).map_err(|e| e.to_string())?;
    let mut r = rng::rng(41, &[]);
    for k in 0..100u64 {
        let a = random_wave(&mut r, 4..=64);
        let b1 = random_wave(&mut r, 4..=64);
        let b2 = random_wave(&mut r, 4..=64);
        // Same patch count for A keeps its mask draw identical across packs.
        if latents(&model, &store, &[&a, &b1], k) != latents(&model, &store, &[&a, &b2], k) {
            return Err(format!("pack {k}: record A changed when B was replaced"));
        }
    }
    Ok("100 packs, latents bitwise equal".into())
}

fn c5_gradients() -> Outcome {
    let start = Instant::now();
    let mut store = ParamStore::<f64>::new();
    let model = MaeModel::new(ModelConfig::preset(Preset::Tiny), &mut store, 5).map_err(|e| e.to_string())?;
    let mut r = rng::rng(51, &[]);
    let ws: Vec<IqWaveform<f32>> = (0..3).map(|_| random_wave(&mut r, 4..=4)).collect();
    let refs: Vec<&IqWaveform<f32>> = ws.iter().collect();
    let input = PackInput::<f64>::from_waveforms(&refs, 8).map_err(|e| e.to_string())?;
    let plan = plan_masks(&input.pack, 0.75, 5).map_err(|e| e.to_string())?;
    let dim = 2 * model.config.embed_dim;
    let cls = Dense::new(&mut store, "cls", dim, 4, 1).map_err(|e| e.to_string())?;
    let joint = JointHead::new(&mut store, "joint", dim, 3, 2).map_err(|e| e.to_string())?;
    let bss = BssHead::new(&mut store, "bss", BssConfig::scaled(model.config.embed_dim, 2, 32), &model, 3).map_err(|e| e.to_string())?;
    let targets = Tensor::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).fract()).collect()).unwrap();
    let random = |seed: u64| {
        let mut r = rng::rng(seed, &[]);
        Tensor::from_vec(3, 64, (0..192).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let bss_refs = [random(52), random(53)];
    let backbone: Vec<usize> = model.encoder_params().collect();
    let mae_pids: Vec<usize> = (0..model.decoder_params().end).collect();
    type LossFn<'a> = Box<dyn Fn(&mut Graph<'_, f64>) -> iqfm::Result<iqfm::net::NodeId> + 'a>;
    let cases: Vec<(&str, Vec<usize>, LossFn)> = vec![
        ("mae", mae_pids, Box::new(|g| Ok(model.forward_mae(g, &input, &plan)?.0))),
        (
            "classify",
            backbone.iter().copied().chain(cls.pids()).collect(),
            Box::new(|g| {
                let f = pooled_features(g, &model, &input)?;
                Ok(classify_loss(g, f, &[0, 2, 3], &cls)?.1)
            }),
        ),
        (
            "joint",
            backbone.iter().copied().chain(joint.pids()).collect(),
            Box::new(|g| {
                let f = pooled_features(g, &model, &input)?;
                Ok(joint_loss(g, f, &[2, 0, 1], &targets, &joint, 1.0)?.loss)
            }),
        ),
        (
            "pit+l2",
            backbone.iter().copied().chain(bss.pids()).collect(),
            Box::new(|g| {
                let out = bss_forward(g, &model, &bss, &input)?;
                let pit = pit_loss(g, &out.estimates, &bss_refs)?;
                let reg = latent_reg(g, out.latent, 1e-4)?;
                Ok(g.sum(&[pit.loss, reg]))
            }),
        ),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, (name, pids, f)) in cases.iter().enumerate() {
        let rep = grad_check(&mut store, pids, f, 100, 1e-5, 500 + i as u64).map_err(|e| e.to_string())?;
        ok &= rep.max_rel_err < 1e-4;
        parts.push(format!("{name} {:.1e}", rep.max_rel_err));
    }
    within(Duration::from_secs(120), start)?;
    ensure(ok, format!("max relative error: {}", parts.join(", ")))
}

/// The toy pretraining run, shared by the transfer and downstream checks.
fn pretrained() -> &'static Result<PretrainRun, String> {
    static RUN: OnceLock<Result<PretrainRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let (train, held) = ToyCorpus::new(6).datasets().map_err(|e| e.to_string())?;
        pretrain(&train, &held, &toy_pretrain_config(6), None, |_| {}).map_err(|e| e.to_string())
    })
}

fn c6_pretrain() -> Outcome {
    let start = Instant::now();
    let toy = ToyCorpus::new(6);
    let records = toy.records().map_err(|e| e.to_string())?.iter().map(Vec::len).sum::<usize>();
    let run = pretrained().as_ref().map_err(Clone::clone)?;
    let (first, last) = (run.evals.first().ok_or("no evaluations")?, run.evals.last().ok_or("no evaluations")?);
    within(Duration::from_secs(600), start)?;
    let drop = 1.0 - last.mean / first.mean;
    ensure(
        records >= 2000 && last.step == 2000 && drop >= 0.5,
        format!("{records} records; held-out loss {:.4} -> {:.4} ({:.0}% drop)", first.mean, last.mean, 100.0 * drop),
    )
}

fn c7_transfer() -> Outcome {
    let run = pretrained().as_ref().map_err(Clone::clone)?;
    let mut gaps = Vec::new();
    let mut parts = Vec::new();
    for s in 0..3u64 {
        let load = |seed| -> iqfm::Result<Labeled> { Labeled::from_records(&modulation_records(&modulation_task(100, 10.0, seed))?, Some(4)) };
        let (train, test) = (load(1000 + s).map_err(|e| e.to_string())?, load(2000 + s).map_err(|e| e.to_string())?);
        let cfg = FitConfig { steps: 1500, batch: 64, lr: 3e-3, seed: s, ..FitConfig::default() };
        let (_, pre) = probe_run(&run.model, &run.store, &train, &test, &cfg).map_err(|e| e.to_string())?;
        let (m, st) = backbone(&run.model.config, None, BackboneMode::Scratch, 77 + s).map_err(|e| e.to_string())?;
        let (_, rnd) = probe_run(&m, &st, &train, &test, &cfg).map_err(|e| e.to_string())?;
        gaps.push(100.0 * (pre.accuracy - rnd.accuracy));
        parts.push(format!("{:.3}/{:.3}", pre.accuracy, rnd.accuracy));
    }
    let gap = median(&gaps);
    ensure(gap >= 10.0, format!("pretrained/random OA per seed {}; median gap {gap:.1} points", parts.join(" ")))
}

fn c8_sampler() -> Outcome {
    let w = [1.0, 0.5, 1.0, 1.0, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5];
    let sizes: Vec<usize> = (0..14).map(|d| 500 + 91 * d).collect();
    let mut s = SamplerState::new(&sizes, &w, 8).map_err(|e| e.to_string())?;
    let n = 100_000;
    let mut counts = [0usize; 14];
    for (d, _) in s.next_indices(n).map_err(|e| e.to_string())? {
        counts[d] += 1;
    }
    let worst = s
        .normalized_weights()
        .iter()
        .zip(counts)
        .map(|(p, c)| (c as f64 / n as f64 - p).abs())
        .fold(0.0, f64::max);
    if worst > 0.01 {
        return Err(format!("draw fraction off by {worst:.5}"));
    }
    let sizes = [17, 40, 9];
    let mut s = SamplerState::new(&sizes, &[1.0; 3], 9).map_err(|e| e.to_string())?;
    let mut seen: Vec<Vec<u64>> = vec![Vec::new(); 3];
    for (d, i) in s.next_indices(3 * 40).map_err(|e| e.to_string())? {
        seen[d].push(i);
    }
    for (d, &size) in sizes.iter().enumerate() {
        for (e, chunk) in seen[d].chunks(size).enumerate() {
            let mut ids = chunk.to_vec();
            ids.sort_unstable();
            if chunk.len() == size && ids != (0..size as u64).collect::<Vec<_>>() {
                return Err(format!("dataset {d} epoch {e} is not a permutation"));
            }
        }
    }
    Ok(format!("max fraction error {worst:.5}; equal-weight epochs are permutations"))
}

fn c9_pipeline() -> Outcome {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let produced = Mutex::new(Vec::new());
        let mut consumed = Vec::new();
        let res = run_pipeline(
            PrefetchBuffer { producers: 4, capacity: 8 },
            |w, k| {
                if k >= 2500 {
                    return Ok(None);
                }
                let packs = random_packs(1, w as u64 * 10_000 + k);
                produced.lock().unwrap().push((w, k));
                Ok(Some((w, k, packs[0].record_ids.len())))
            },
            |item| {
                consumed.push((item.value.0, item.value.1));
                true
            },
        );
        let mut produced = produced.into_inner().unwrap();
        produced.sort_unstable();
        consumed.sort_unstable();
        let _ = tx.send((res.map_err(|e| e.to_string()), produced, consumed));
    });
    match rx.recv_timeout(Duration::from_secs(60)) {
        Err(_) => Err("no completion within the 60 s watchdog".into()),
        Ok((res, produced, consumed)) => {
            let rep = res?;
            ensure(
                produced == consumed && consumed.len() == 10_000 && rep.consumed == 10_000,
                format!("{} produced, {} consumed, multisets equal: {}", produced.len(), consumed.len(), produced == consumed),
            )
        }
    }
}

fn c10_pit_sisdr() -> Outcome {
    let mut r = rng::rng(101, &[]);
    let store = ParamStore::<f64>::new();
    fn random(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }
    for case in 0..100 {
        let est = [random(&mut r, 4, 32), random(&mut r, 4, 32)];
        let refs = [random(&mut r, 4, 32), random(&mut r, 4, 32)];
        let swapped = [refs[1].clone(), refs[0].clone()];
        let loss = |refs: &[Tensor<f64>]| {
            let mut g = Graph::new(&store);
            let e: Vec<_> = est.iter().map(|t| g.leaf(t.clone())).collect();
            let out = pit_loss(&mut g, &e, refs).unwrap();
            g.value(out.loss).data[0]
        };
        if loss(&refs) != loss(&swapped) {
            return Err(format!("case {case}: PIT changed under reference permutation"));
        }
    }
    let mut worst_scale = 0.0f64;
    let mut worst_energy = 0.0f64;
    for _ in 0..100 {
        let n = 64;
        let e: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let r1: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let r2: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let base = si_sdr(&e, &r1).map_err(|x| x.to_string())?;
        for a in [0.1, 10.0] {
            let scaled: Vec<f64> = e.iter().map(|v| a * v).collect();
            worst_scale = worst_scale.max((si_sdr(&scaled, &r1).map_err(|x| x.to_string())? - base).abs());
        }
        let d = bss_decompose(&e, &[&r1, &r2], 0).map_err(|x| x.to_string())?;
        let energy = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let total = energy(&e);
        let parts = energy(&d.s_target) + energy(&d.e_interf) + energy(&d.e_artif);
        worst_energy = worst_energy.max((total - parts).abs() / total);
    }
    ensure(
        worst_scale < 1e-6 && worst_energy < 1e-8,
        format!("PIT exact under swaps; SI-SDR scale drift {worst_scale:.1e} dB; energy identity error {worst_energy:.1e}"),
    )
}

/// Training and scoring settings of the separation comparison.
const BSS_FIT: FitConfig = FitConfig { steps: 3000, batch: 16, lr: 1e-3, warmup_fraction: 0.1, weight_decay: 0.0, seed: 0 };

fn c11_bss() -> Outcome {
    let run = pretrained().as_ref().map_err(Clone::clone)?;
    let mut medians: HashMap<&str, Vec<f64>> = HashMap::new();
    for s in 0..3u64 {
        let train = SeparationSet::from_samples(&toy_mixtures(2000, 10 + s).map_err(|e| e.to_string())?, 2).map_err(|e| e.to_string())?;
        let test = SeparationSet::from_samples(&toy_mixtures(200, 5000 + s).map_err(|e| e.to_string())?, 2).map_err(|e| e.to_string())?;
        for (name, mode) in [("fine-tune", BackboneMode::FineTune), ("frozen", BackboneMode::Frozen), ("scratch", BackboneMode::Scratch)] {
            let (m, st) = backbone(&run.model.config, Some(&run.store), mode, s).map_err(|e| e.to_string())?;
            let cfg = FitConfig { seed: s, ..BSS_FIT };
            let sep = train_separation(m, st, mode, &train, SeparationOptions::default(), &cfg).map_err(|e| e.to_string())?;
            let rep = sep.evaluate(&test).map_err(|e| e.to_string())?;
            medians.entry(name).or_default().push(rep.median_sdr_db);
        }
    }
    let m = |k: &str| median(&medians[k]);
    let (ft, fr, sc) = (m("fine-tune"), m("frozen"), m("scratch"));
    ensure(ft > fr && ft > sc, format!("median SDR over 3 seeds: fine-tune {ft:.2} dB, frozen {fr:.2} dB, scratch {sc:.2} dB"))
}

fn c12_joint() -> Outcome {
    let start = Instant::now();
    let run = pretrained().as_ref().map_err(Clone::clone)?;
    let load = |n, seed| -> iqfm::Result<JointSet> { JointSet::from_records(&radar_records(&radar_task(n, 10.0, seed))?, Some(3)) };
    let train = load(500, 120).map_err(|e| e.to_string())?;
    let test = load(100, 920).map_err(|e| e.to_string())?;
    let scales = radar_scales(&radar_task(1, 10.0, 0)).map_err(|e| e.to_string())?;
    let (m, st) = backbone(&run.model.config, Some(&run.store), BackboneMode::FineTune, 12).map_err(|e| e.to_string())?;
    let cfg = FitConfig { steps: 1500, batch: 32, lr: 2e-3, seed: 12, ..FitConfig::default() };
    let jm = train_joint(m, st, BackboneMode::FineTune, &train, scales, 1.0, &cfg).map_err(|e| e.to_string())?;
    let rep = jm.evaluate(&test).map_err(|e| e.to_string())?;
    within(Duration::from_secs(900), start)?;
    ensure(
        rep.class.accuracy >= 0.95 && rep.mae[1] < 1.0,
        format!("OA {:.3}, t_pw MAE {:.3} us", rep.class.accuracy, rep.mae[1]),
    )
}

fn c13_metrics() -> Outcome {
    let k = kappa(&ConfusionMatrix::from_rows(&[vec![1, 1], vec![1, 1]]).unwrap()).map_err(|e| e.to_string())?;
    let oa = overall_accuracy(&ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]).unwrap()).map_err(|e| e.to_string())?;
    // Hand computation: projection of (1, 0.1) on (1, 0) is (1, 0), residual
    // (0, 0.1), so 10 log10(1 / 0.01) = 20 dB.
    let s = si_sdr(&[1.0, 0.1], &[1.0, 0.0]).map_err(|e| e.to_string())?;
    // Kappa by hand for [[20, 5], [10, 15]]: po = 0.7, pe = 0.5 * 0.6 + 0.5 * 0.4 = 0.5.
    let k2 = kappa(&ConfusionMatrix::from_rows(&[vec![20, 5], vec![10, 15]]).unwrap()).map_err(|e| e.to_string())?;
    ensure(
        k == 0.0 && oa == 1.0 && (s - 20.0).abs() < 1e-9 && (k2 - 0.4).abs() < 1e-12,
        format!("kappa {k}, OA {oa}, SI-SDR {s:.12} dB, kappa [[20,5],[10,15]] {k2:.12}"),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 13] = [
        (1, "packing losslessness and capacity", c1_packing),
        (2, "per-record mask counts", c2_mask_counts),
        (3, "vectorized masking matches reference loop", c3_mask_oracle),
        (4, "block isolation", c4_block_isolation),
        (5, "gradient correctness", c5_gradients),
        (6, "toy pretraining convergence", c6_pretrain),
        (7, "pretraining transfer to a linear probe", c7_transfer),
        (8, "sampler frequency fidelity", c8_sampler),
        (9, "pipeline safety", c9_pipeline),
        (10, "PIT and SI-SDR properties", c10_pit_sisdr),
        (11, "separation ordering", c11_bss),
        (12, "joint radar task", c12_joint),
        (13, "metric oracles", c13_metrics),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("IQFM_ACCEPT").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {n:>2} ({name}): {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n:>2} ({name}): {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
