use rand::Rng;

use super::*;
use crate::net::{grad_check, Graph, MaeModel, ModelConfig, PackInput, ParamStore, Preset, Tensor};
use crate::rng;
use crate::synth::IqWaveform;

fn tiny16() -> ModelConfig {
    ModelConfig { embed_dim: 16, decoder_dim: 16, heads: 2, decoder_heads: 2, ..ModelConfig::preset(Preset::Tiny) }
}

fn wave(n: usize, seed: u64) -> IqWaveform<f32> {
    let mut r = rng::rng(seed, &[]);
    let v: Vec<f32> = (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect();
    IqWaveform::from_interleaved(&v, 1e6).unwrap()
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng::rng(seed, &[7]);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn confident_correct_logits_have_vanishing_loss() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let mut t = Tensor::zeros(2, 4);
    t.data[1] = 800.0;
    t.data[4 + 3] = 800.0;
    let l = g.leaf(t);
    let ce = g.softmax_ce(l, vec![1, 3]).unwrap();
    assert_eq!(g.value(ce).item(), 0.0);
}

#[test]
fn classify_head_shapes_and_uniform_loss() {
    let mut store = ParamStore::<f64>::new();
    let head = Dense::new(&mut store, "amc", 8, 11, 0).unwrap();
    store.replace(head.w, Tensor::zeros(8, 11)).unwrap();
    let mut g = Graph::new(&store);
    let f = g.leaf(random(5, 8, 1));
    let (logits, loss) = classify_loss(&mut g, f, &[0, 3, 10, 2, 7], &head).unwrap();
    assert_eq!(g.value(logits).shape(), (5, 11));
    assert!((g.value(loss).item() - 11f64.ln()).abs() < 1e-12);
    assert!(matches!(classify_loss(&mut g, f, &[0, 3, 11, 2, 7], &head), Err(crate::Error::Contract(_))));
}

fn joint_fixture(offset: f64, lambda: f64) -> (f64, f64) {
    let mut store = ParamStore::<f64>::new();
    let head = JointHead::new(&mut store, "radar", 6, 3, 0).unwrap();
    store.replace(head.class.w, Tensor::zeros(6, 3)).unwrap();
    store.replace(head.regress.w, Tensor::zeros(6, 4)).unwrap();
    store.replace(head.class.b, Tensor::from_vec(1, 3, vec![0.0, 900.0, 0.0]).unwrap()).unwrap();
    let targets = [0.2, 0.4, 0.6, 0.8];
    store.replace(head.regress.b, Tensor::from_vec(1, 4, targets.iter().map(|t| t + offset).collect()).unwrap()).unwrap();
    let t = Tensor::from_vec(3, 4, targets.repeat(3)).unwrap();
    let mut g = Graph::new(&store);
    let f = g.leaf(random(3, 6, 2));
    let out = joint_loss(&mut g, f, &[1, 1, 1], &t, &head, lambda).unwrap();
    let (_, ce) = classify_loss(&mut g, f, &[1, 1, 1], &head.class).unwrap();
    (g.value(out.loss).item(), g.value(ce).item())
}

#[test]
fn joint_loss_oracles() {
    assert_eq!(joint_fixture(0.0, 1.0).0, 0.0);
    assert!((joint_fixture(0.1, 1.0).0 - 0.1).abs() < 1e-12);
    let (joint, ce) = joint_fixture(0.3, 0.0);
    assert_eq!(joint, ce);
}

#[test]
fn latent_penalty_values() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let z = g.leaf(Tensor::zeros(2, 32));
    let l = latent_reg(&mut g, z, 1.0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let o = g.leaf(Tensor::full(2, 32, 1.0));
    let l = latent_reg(&mut g, o, 1.0).unwrap();
    assert!((g.value(l).item() - 1.0).abs() < 1e-15);
    assert!(latent_reg(&mut g, o, -1.0).is_err());
}

#[test]
fn pit_exact_and_swapped() {
    let r0 = vec![1.0, 2.0, 3.0];
    let r1 = vec![-1.0, 0.5, 0.0];
    let (l, p) = pit_mse(&[&r0, &r1], &[&r0, &r1]).unwrap();
    assert_eq!((l, p), (0.0, vec![0, 1]));
    let (l, p) = pit_mse(&[&r1, &r0], &[&r0, &r1]).unwrap();
    assert_eq!((l, p), (0.0, vec![1, 0]));
}

#[test]
fn pit_matches_brute_force_pair() {
    let mut r = rng::rng(3, &[]);
    for _ in 0..100 {
        let v: Vec<Vec<f64>> = (0..4).map(|_| (0..20).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let mse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 20.0;
        let direct = (mse(&v[0], &v[2]) + mse(&v[1], &v[3])) / 2.0;
        let swapped = (mse(&v[0], &v[3]) + mse(&v[1], &v[2])) / 2.0;
        let (l, _) = pit_mse(&[&v[0], &v[1]], &[&v[2], &v[3]]).unwrap();
        assert_eq!(l, direct.min(swapped));
    }
}

#[test]
fn pit_guard_and_shapes() {
    let x = vec![0.0; 4];
    let seven: Vec<&[f64]> = (0..7).map(|_| &x[..]).collect();
    assert!(matches!(pit_mse(&seven, &seven), Err(crate::Error::Config(_))));
    assert_eq!(permutations(3).len(), 6);
    assert!(pit_mse(&[&x[..]], &[&x[..2]]).is_err());
}

#[test]
fn batched_pit_is_reference_permutation_invariant() {
    let store = ParamStore::<f64>::new();
    let refs: Vec<Tensor<f64>> = (0..3).map(|k| random(4, 10, 10 + k)).collect();
    for p in permutations(3) {
        let mut g = Graph::new(&store);
        let est: Vec<_> = (0..3).map(|k| g.leaf(random(4, 10, 20 + k))).collect();
        let base = pit_loss(&mut g, &est, &refs).unwrap();
        let permuted: Vec<Tensor<f64>> = p.iter().map(|&j| refs[j].clone()).collect();
        let other = pit_loss(&mut g, &est, &permuted).unwrap();
        assert_eq!(g.value(base.loss).item(), g.value(other.loss).item());
    }
}

#[test]
fn bottleneck_config_rules() {
    let full = BssConfig { widths: FULL_WIDTHS.to_vec(), sources: 2, latent_per_source: 16, record_len: 1024 };
    full.validate().unwrap();
    assert_eq!(full.latent_dim(), 32);
    let desk = BssConfig::scaled(32, 2, 1024);
    assert_eq!(desk.widths, vec![171, 85, 64, 43]);
    desk.validate().unwrap();
    let bad = BssConfig { widths: vec![64, 64], ..desk.clone() };
    assert!(bad.validate().is_err());
    let too_narrow = BssConfig { widths: vec![40, 20], ..desk };
    assert!(too_narrow.validate().is_err());
}

#[test]
fn separation_shapes_for_one_and_two_channels() {
    for k in [1, 2] {
        let mut store = ParamStore::<f32>::new();
        let model = MaeModel::new(ModelConfig::preset(Preset::Tiny), &mut store, 0).unwrap();
        let head = BssHead::new(&mut store, "bss", BssConfig::scaled(32, k, 64), &model, 1).unwrap();
        let (a, b) = (wave(64, 1), wave(64, 2));
        let input = PackInput::<f32>::from_waveforms(&[&a, &b], 8).unwrap();
        let mut g = Graph::new(&store);
        let out = bss_forward(&mut g, &model, &head, &input).unwrap();
        assert_eq!(out.estimates.len(), k);
        assert_eq!(g.value(out.latent).shape(), (2, 16 * k));
        for e in &out.estimates {
            assert_eq!(g.value(*e).shape(), (2, 128));
        }
        let c = wave(32, 3);
        let bad = PackInput::<f32>::from_waveforms(&[&a, &c], 8).unwrap();
        assert!(bss_forward(&mut g, &model, &head, &bad).is_err());
    }
}

fn task_setup() -> (MaeModel, ParamStore<f64>, PackInput<f64>) {
    let mut store = ParamStore::<f64>::new();
    let model = MaeModel::new(tiny16(), &mut store, 4).unwrap();
    let (a, b, c) = (wave(32, 5), wave(32, 6), wave(32, 7));
    let input = PackInput::from_waveforms(&[&a, &b, &c], 8).unwrap();
    (model, store, input)
}

#[test]
fn task_loss_gradients() {
    let (model, mut store, input) = task_setup();
    let cls = Dense::new(&mut store, "cls", 32, 4, 1).unwrap();
    let joint = JointHead::new(&mut store, "joint", 32, 3, 2).unwrap();
    let bss = BssHead::new(&mut store, "bss", BssConfig { widths: vec![48, 40], ..BssConfig::scaled(16, 2, 32) }, &model, 3).unwrap();
    let pids: Vec<usize> = model.encoder_params().chain(cls.pids()).chain(joint.pids()).chain(bss.pids()).collect();
    let targets = Tensor::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).fract()).collect()).unwrap();
    let refs = [random(3, 64, 30), random(3, 64, 31)];
    let losses: Vec<Box<dyn Fn(&mut Graph<'_, f64>) -> crate::Result<crate::net::NodeId>>> = vec![
        Box::new(|g| {
            let f = pooled_features(g, &model, &input)?;
            Ok(classify_loss(g, f, &[0, 2, 3], &cls)?.1)
        }),
        Box::new(|g| {
            let f = pooled_features(g, &model, &input)?;
            Ok(joint_loss(g, f, &[2, 0, 1], &targets, &joint, 1.0)?.loss)
        }),
        Box::new(|g| {
            let out = bss_forward(g, &model, &bss, &input)?;
            let pit = pit_loss(g, &out.estimates, &refs)?;
            let reg = latent_reg(g, out.latent, 1e-4)?;
            Ok(g.sum(&[pit.loss, reg]))
        }),
    ];
    for (i, f) in losses.iter().enumerate() {
        let r = grad_check(&mut store, &pids, f, 100, 1e-5, i as u64).unwrap();
        assert!(r.max_rel_err < 1e-4, "loss {i}: {:?}", r.worst());
    }
}

#[test]
fn zero_latent_penalty_leaves_pit_alone() {
    let (model, mut store, input) = task_setup();
    let bss = BssHead::new(&mut store, "bss", BssConfig { widths: vec![48, 40], ..BssConfig::scaled(16, 2, 32) }, &model, 3).unwrap();
    let refs = [random(3, 64, 30), random(3, 64, 31)];
    let mut g = Graph::new(&store);
    let out = bss_forward(&mut g, &model, &bss, &input).unwrap();
    let pit = pit_loss(&mut g, &out.estimates, &refs).unwrap();
    let reg = latent_reg(&mut g, out.latent, 0.0).unwrap();
    let total = g.sum(&[pit.loss, reg]);
    assert_eq!(g.value(total).item(), g.value(pit.loss).item());
}

#[test]
fn probe_separates_and_leaves_backbone_untouched() {
    let mut store = ParamStore::<f32>::new();
    let model = MaeModel::new(ModelConfig::preset(Preset::Tiny), &mut store, 0).unwrap();
    let ws: Vec<IqWaveform<f32>> = (0..24).map(|i| wave(32, i)).collect();
    let refs: Vec<&IqWaveform<f32>> = ws.iter().collect();
    let hash = store.fingerprint(0..store.len());
    let feats = extract_features(&model, &store, &refs, 8).unwrap();
    assert_eq!(feats.shape(), (24, 64));
    // Labels from the sign of one feature: linearly separable by design.
    let labels: Vec<usize> = (0..24).map(|r| usize::from(feats.get(r, 5) > 0.0)).collect();
    let cfg = FitConfig { steps: 1000, batch: 8, lr: 1e-2, ..FitConfig::default() };
    let probe = linear_probe(&feats, &labels, 2, &cfg).unwrap();
    assert_eq!(probe.train_accuracy, 1.0);
    assert_eq!(store.fingerprint(0..store.len()), hash);
}

#[test]
fn frozen_fit_updates_only_the_head() {
    let mut store = ParamStore::<f32>::new();
    let model = MaeModel::new(ModelConfig::preset(Preset::Tiny), &mut store, 0).unwrap();
    let head = Dense::new(&mut store, "cls", 64, 3, 0).unwrap();
    let ws: Vec<IqWaveform<f32>> = (0..6).map(|i| wave(32, i)).collect();
    let labels = [0, 1, 2, 0, 1, 2];
    let backbone = model.encoder_params();
    let before_backbone = store.fingerprint(backbone.clone());
    let before_head = store.fingerprint(head.pids());
    for mode in [BackboneMode::Frozen, BackboneMode::FineTune] {
        let mask = trainable_mask(store.len(), backbone.clone(), &head.pids(), mode);
        let cfg = FitConfig { steps: 5, batch: 3, ..FitConfig::default() };
        fit(&mut store, &mask, 6, &cfg, |g, idx| {
            let batch: Vec<&IqWaveform<f32>> = idx.iter().map(|&i| &ws[i]).collect();
            let input = PackInput::from_waveforms(&batch, 8)?;
            let f = pooled_features(g, &model, &input)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            Ok(classify_loss(g, f, &y, &head)?.1)
        })
        .unwrap();
        assert_ne!(store.fingerprint(head.pids()), before_head);
        let same = store.fingerprint(backbone.clone()) == before_backbone;
        assert_eq!(same, mode == BackboneMode::Frozen);
    }
}
