use super::*;
use crate::augment::Strategy;
use crate::corpus::{generate_toy_corpus, toy_aug_corpora, MemoryStore, Waveform, SAMPLE_RATE_HZ};
use crate::losses::ssreg_graph_with;
use crate::model::Mode;
use crate::seed::SeedMix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

struct Fixture {
    store: MemoryStore<f64>,
    corpora: AugCorpora<f64>,
    policy: AugmentationPolicy,
}

impl Fixture {
    fn new() -> Self {
        let corpus = generate_toy_corpus::<f64>(4, 3, 4.0, 3).unwrap();
        Fixture {
            store: corpus.store(),
            corpora: toy_aug_corpora(3, 3, 3),
            policy: Strategy::ReverbNoise.policy(),
        }
    }

    fn data(&self) -> TrainData<'_, f64> {
        TrainData {
            store: &self.store,
            corpora: &self.corpora,
            policy: &self.policy,
        }
    }
}

fn small_config(lambda: f64) -> TrainConfig {
    TrainConfig {
        batch_utterances: 4,
        total_steps: 20,
        lambda,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig { total_steps: 1000, ..Default::default() };
    assert!((lr_at(0, &cfg).unwrap() - 3e-3).abs() < 1e-15);
    assert!((lr_at(1000, &cfg).unwrap() - 4e-5).abs() < 1e-15);
    assert!((lr_at(500, &cfg).unwrap() - 1.52e-3).abs() < 1e-12);
    assert!(lr_at(1001, &cfg).is_err());
}

proptest! {
    #[test]
    fn lr_is_monotone(total in 1usize..5000, a in 0usize..5000, b in 0usize..5000) {
        let cfg = TrainConfig { total_steps: total, ..Default::default() };
        let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
        prop_assert!(lr_at(lo, &cfg).unwrap() >= lr_at(hi, &cfg).unwrap());
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { batch_utterances: 1, ..Default::default() },
        TrainConfig { total_steps: 0, ..Default::default() },
        TrainConfig { lr_final: 3e-3, ..Default::default() },
        TrainConfig { momentum: 1.0, ..Default::default() },
        TrainConfig { lambda: -1.0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert_eq!(TrainConfig::full_scale().batch_utterances, 250);
}

#[test]
fn collapse_metric_examples() {
    let v = [0.3, -1.0, 2.5];
    assert_eq!(collapse_metric::<f64>(&[&v, &v, &v]), 0.0);

    let mut rng = SeedMix::new(1).rng();
    let rows: Vec<Vec<f64>> = (0..250).map(|_| (0..512).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let m = collapse_metric(&refs);
    let want = 1.0 / 512f64.sqrt();
    assert!((m - want).abs() < 0.1 * want, "{m} vs {want}");

    let (a, b) = ([1.0, 0.2], [-1.0, -0.2]);
    assert!(collapse_metric::<f64>(&[&a, &b, &a, &b]) > 0.0);
}

#[test]
fn metrics_line_roundtrip() {
    let m = StepMetrics { step: 12, lr: 2.5e-3, ap: 1.25, ssreg: -0.5, total: 1.21, emb_std: 0.04 };
    let line = m.to_string();
    assert!(line.starts_with("step=12 lr=2.500000e-3 ap=1.250000 ssreg=-0.500000"));
    let back: StepMetrics = line.parse().unwrap();
    assert_eq!(back.step, 12);
    assert!((back.emb_std - 0.04).abs() < 1e-9);
    assert!("step=1 lr=x".parse::<StepMetrics>().is_err());
}

#[test]
fn batch_shapes_and_determinism() {
    let fx = Fixture::new();
    let cfg = small_config(0.08);
    let b = fx.data().batch(&cfg, 0).unwrap();
    assert_eq!(b.len(), 4);
    assert_eq!(b.feats_a.len() + b.feats_b.len(), 8);
    for f in b.feats_a.iter().chain(&b.feats_b) {
        assert_eq!((f.num_frames(), f.num_bins()), (193, 40));
    }
    let ids: std::collections::BTreeSet<_> = b.pairs.iter().map(|p| &p.source_utterance_id).collect();
    assert_eq!(ids.len(), 4);
    let again = fx.data().batch(&cfg, 0).unwrap();
    assert_eq!(b.op_log(), again.op_log());
    assert_eq!(b.feats_a, again.feats_a);
    assert_ne!(b.op_log(), fx.data().batch(&cfg, 1).unwrap().op_log());
}

#[test]
fn crops_never_overlap_over_many_batches() {
    let fx = Fixture::new();
    let policy = AugmentationPolicy::none();
    let spec = BatchSpec { batch_utterances: 6, segment_s: 1.95, seed: 9, policy: &policy };
    for step in 0..1000 {
        let mut rng = SeedMix::new(9).str("audit").int(step).rng();
        let idx = rng.gen_range(0..fx.store.items.len());
        let (id, wav) = &fx.store.items[idx];
        let pair = crate::augment::crop_pair(wav, id, spec.segment_s, &mut utterance_rng(9, id, step as usize)).unwrap();
        assert!(pair.range_a.end <= pair.range_b.start || pair.range_b.end <= pair.range_a.start);
    }
    for step in 0..20 {
        let b = build_batch(&fx.store, &fx.corpora, &spec, step).unwrap();
        for p in &b.pairs {
            assert!(p.range_a.end <= p.range_b.start || p.range_b.end <= p.range_a.start);
        }
    }
}

#[test]
fn short_utterances_are_skipped_and_exhaustion_reported() {
    let fx = Fixture::new();
    let mut items = fx.store.items.clone();
    items.push(("short".into(), Waveform::new(vec![0.1; 40_000], SAMPLE_RATE_HZ).unwrap()));
    let store = MemoryStore { items };
    let policy = AugmentationPolicy::none();
    let spec = BatchSpec { batch_utterances: 12, segment_s: 1.95, seed: 1, policy: &policy };
    let mut skips = 0;
    for step in 0..10 {
        let b = build_batch(&store, &fx.corpora, &spec, step).unwrap();
        assert_eq!(b.len(), 12);
        assert!(b.pairs.iter().all(|p| p.source_utterance_id != "short"));
        assert!(b.skipped.is_empty() || b.skipped == ["short"]);
        skips += b.skipped.len();
    }
    assert!(skips > 0);
    let spec = BatchSpec { batch_utterances: 13, ..spec };
    assert!(matches!(build_batch(&store, &fx.corpora, &spec, 0), Err(Error::Insufficient(_))));
}

fn tiny_state(cfg: &TrainConfig) -> TrainState<f64> {
    TrainState::new(ModelConfig::tiny(), cfg).unwrap()
}

#[test]
fn lambda_zero_leaves_regularization_mlp_untouched() {
    let fx = Fixture::new();
    let cfg = small_config(0.0);
    let mut state = tiny_state(&cfg);
    let before = state.model.params.clone();
    let batch = fx.data().batch(&cfg, 0).unwrap();
    train_step(&mut state, &batch, &cfg).unwrap();
    for (k, t) in &state.model.params {
        let changed = t != &before[k];
        if k.starts_with("regularization.") {
            assert!(!changed, "{k} moved");
            assert!(state.momentum[k].data().iter().all(|&v| v == 0.0));
        } else if k.starts_with("encoder.fc") || k == LOSS_W {
            assert!(changed, "{k} did not move");
        }
    }
}

#[test]
fn one_small_step_reduces_loss_on_the_same_batch() {
    let fx = Fixture::new();
    let cfg = TrainConfig { lr_initial: 1e-3, lr_final: 1e-6, ..small_config(0.08) };
    let mut state = tiny_state(&cfg);
    let batch = fx.data().batch(&cfg, 0).unwrap();
    let (_, _, before) = evaluate_batch(&state, &batch, &cfg).unwrap();
    let m = train_step(&mut state, &batch, &cfg).unwrap();
    assert!((m.total - before).abs() < 1e-12);
    let (_, _, after) = evaluate_batch(&state, &batch, &cfg).unwrap();
    assert!(after < before, "{after} >= {before}");
}

fn run(fx: &Fixture, cfg: &TrainConfig, steps: usize) -> (TrainState<f64>, Vec<StepMetrics>) {
    let mut state = tiny_state(cfg);
    let mut log = Vec::new();
    train_until(&mut state, &fx.data(), cfg, steps, |m, _| {
        log.push(*m);
        Ok(())
    })
    .unwrap();
    (state, log)
}

#[test]
fn same_seed_gives_bitwise_identical_parameters() {
    let fx = Fixture::new();
    let cfg = small_config(0.08);
    let (a, log) = run(&fx, &cfg, 10);
    let (b, _) = run(&fx, &cfg, 10);
    assert_eq!(log.len(), 10);
    assert_eq!(log.last().unwrap().step, 10);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.model.buffers, b.model.buffers);
    let (c, _) = run(&fx, &TrainConfig { seed: 6, ..cfg }, 2);
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let fx = Fixture::new();
    let cfg = small_config(0.08);
    let (full, _) = run(&fx, &cfg, 6);

    let (half, _) = run(&fx, &cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("step3.ckpt");
    save_checkpoint(&path, &half, &cfg).unwrap();
    let (mut resumed, saved_cfg) = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(saved_cfg, cfg);
    assert_eq!(resumed.step, 3);
    assert_eq!(resumed.model.params, half.model.params);
    assert_eq!(resumed.momentum, half.momentum);
    train_until(&mut resumed, &fx.data(), &cfg, 6, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.model.buffers, full.model.buffers);
    assert_eq!(resumed.momentum, full.momentum);
}

#[test]
fn f32_checkpoint_roundtrip_is_exact() {
    let cfg = small_config(0.08);
    let mut state = TrainState::<f32>::new(ModelConfig::tiny(), &cfg).unwrap();
    for t in state.momentum.values_mut() {
        t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.1).sin() / 3.0);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &state, &cfg).unwrap();
    let (back, _) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.model.params, state.model.params);
    assert_eq!(back.momentum, state.momentum);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = small_config(0.08);
    let state = tiny_state(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &state, &cfg).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&bad), Err(Error::Checkpoint(_))));
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    std::fs::write(&bad, &wrong).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&bad), Err(Error::Checkpoint(_))));
    assert!(matches!(
        load_checkpoint::<f64>(&dir.path().join("none")),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn non_finite_loss_aborts_with_op_log() {
    let fx = Fixture::new();
    let cfg = small_config(0.08);
    let mut state = tiny_state(&cfg);
    state.model.params.get_mut("encoder.fc.bias").unwrap().data_mut()[0] = f64::NAN;
    let batch = fx.data().batch(&cfg, 0).unwrap();
    match train_step(&mut state, &batch, &cfg) {
        Err(Error::NonFinite { step: 0, dump }) => {
            assert_eq!(dump.lines().count(), 8);
            assert!(dump.contains("reverb="));
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
    assert_eq!(state.step, 0);
}

#[test]
fn scale_parameter_is_clamped() {
    let fx = Fixture::new();
    let cfg = small_config(0.08);
    let mut state = tiny_state(&cfg);
    state.model.params.get_mut(LOSS_W).unwrap().data_mut()[0] = 1e-9;
    let batch = fx.data().batch(&cfg, 0).unwrap();
    train_step(&mut state, &batch, &cfg).unwrap();
    assert!(state.model.params[LOSS_W].item() >= MIN_AP_SCALE);
}

/// Target branch evaluated with its own copy of the parameters: with the
/// stop-gradient those copies get no gradient at all; without it they get
/// gradients that agree with finite differences.
#[test]
fn stop_gradient_cuts_the_target_path() {
    let model = crate::model::SiameseModel::<f64>::new(ModelConfig::tiny(), 4).unwrap();
    let feats: Vec<_> = (0..4)
        .map(|s| {
            let mut rng = SeedMix::new(s).rng();
            crate::features::FeatureMatrix::new((0..16 * 40).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16, 40).unwrap()
        })
        .collect();
    let loss = |params: &ParamStore<f64>, target: &ParamStore<f64>, stop: bool, want_grads: bool| {
        let mut g = Graph::new();
        let online: BTreeMap<_, _> = params.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        let tgt: BTreeMap<_, _> = target.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        let (x1, x2) = {
            let a = model.input(&mut g, &[&feats[0], &feats[1]]).unwrap();
            let b = model.input(&mut g, &[&feats[2], &feats[3]]).unwrap();
            (a, b)
        };
        let (p1, p2) = {
            let mut cx = Forward::new(&mut g, &online, &model.buffers, Mode::Train);
            (model.branch(&mut cx, x1).p, model.branch(&mut cx, x2).p)
        };
        let (g1, g2) = {
            let mut cx = Forward::new(&mut g, &tgt, &model.buffers, Mode::Train);
            (model.branch(&mut cx, x1).g, model.branch(&mut cx, x2).g)
        };
        let l = ssreg_graph_with(&mut g, p1, g1, p2, g2, stop);
        let value = g.value(l).item();
        let grads = want_grads.then(|| {
            let gr = g.backward(l);
            tgt.iter()
                .map(|(k, &v)| (k.clone(), gr.get(v).map(<[f64]>::to_vec)))
                .collect::<BTreeMap<_, _>>()
        });
        (value, grads)
    };
    let params = &model.params;
    let (_, with_sg) = loss(params, params, true, true);
    assert!(with_sg.unwrap().values().all(Option::is_none));

    let (_, without) = loss(params, params, false, true);
    let without = without.unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for name in ["projection.fc2.weight", "projection.bn2.weight", "encoder.fc.weight", "encoder.bn2.weight"] {
        let grad = without[name].as_ref().expect("reachable without stop-gradient");
        assert!(grad.iter().any(|&v| v != 0.0));
        for i in (0..grad.len()).step_by(grad.len() / 5 + 1) {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (loss(params, &plus, false, false).0 - loss(params, &minus, false, false).0) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-5);
            assert!((fd - grad[i]).abs() / scale < 1e-4, "{name}[{i}]: {fd} vs {}", grad[i]);
            checked += 1;
        }
    }
    assert!(checked >= 12);
}
