//! Acceptance criteria 1-8. Each test prints one `PASS`/`FAIL` line for its
//! criterion before asserting, so `cargo test --test acceptance -- --nocapture`
//! gives a readable summary.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use ssreg_core::augment::{crop_pair, mix_noise_at, reverberate, speed_perturb, Strategy};
use ssreg_core::autograd::{Graph, Tensor, Var};
use ssreg_core::corpus::{
    build_trial_list, generate_toy_corpus, toy_aug_corpora, MemoryStore, TrialList, Waveform, SAMPLE_RATE_HZ,
};
use ssreg_core::eval::{
    cosine_score, eer, evaluate, extract_embedding, min_dcf, operating_points, DcfParams, TrialScoreSet,
};
use ssreg_core::features::{logmel, mvn, FeatureMatrix};
use ssreg_core::losses::{
    ap_loss, ap_loss_graph, combined_graph, neg_cos_sim, ssreg_graph, ssreg_graph_with, ssreg_loss, ApLossParams,
    LossWeights, PairOutputs,
};
use ssreg_core::model::{Forward, Mode, ModelConfig, ParamStore, SiameseModel};
use ssreg_core::seed::SeedMix;
use ssreg_core::trainer::{load_checkpoint, save_checkpoint, train_until, TrainConfig, TrainData, TrainState};

/// Prints the verdict line, then fails the test if anything went wrong.
fn verdict(n: u32, what: &str, failures: &[String]) {
    if failures.is_empty() {
        println!("PASS criterion {n}: {what}");
    } else {
        println!("FAIL criterion {n}: {what}");
        for f in failures {
            println!("    {f}");
        }
        panic!("criterion {n} failed: {}", failures.join("; "));
    }
}

fn check(failures: &mut Vec<String>, ok: bool, msg: impl FnOnce() -> String) {
    if !ok {
        failures.push(msg());
    }
}

fn gauss(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

// ---------------------------------------------------------------- 1

/// Worst relative error between tape gradients and central differences over
/// the inputs in `checked`; the others must receive no gradient at all.
fn fd_error(inputs: &[Tensor<f64>], checked: &[usize], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> Result<f64, String> {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let v: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &v);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let v: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &v);
    let grads = g.backward(out);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        if !checked.contains(&k) {
            if grads.get(v[k]).is_some() {
                return Err(format!("input {k} is behind a stop-gradient but received a gradient"));
            }
            continue;
        }
        let an = grads.dense(v[k], t.numel());
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let scale = fd.abs().max(an[i].abs()).max(1e-4);
            worst = worst.max((fd - an[i]).abs() / scale);
        }
    }
    Ok(worst)
}

#[test]
fn criterion_1_loss_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = SeedMix::new(seed).str("criterion-1").rng();
        let n = rng.gen_range(1..=5);
        let d = rng.gen_range(2..=8);
        let mut t = || gauss(n, d, &mut rng);
        let (z1, z2, p1, g1, p2, g2) = (t(), t(), t(), t(), t(), t());
        let w = Tensor::full(&[1], rng.gen_range(1.0..15.0));
        let b = Tensor::full(&[1], rng.gen_range(-8.0..2.0));
        let lambda = rng.gen_range(0.01..1.0);

        let cases: [(&str, Vec<Tensor<f64>>, Vec<usize>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>); 3] = [
            (
                "ap_loss",
                vec![z1.clone(), z2.clone(), w.clone(), b.clone()],
                vec![0, 1, 2, 3],
                Box::new(|g, v| ap_loss_graph(g, v[0], v[1], v[2], v[3])),
            ),
            (
                "ssreg_loss",
                vec![p1.clone(), g1.clone(), p2.clone(), g2.clone()],
                vec![0, 2],
                Box::new(|g, v| ssreg_graph(g, v[0], v[1], v[2], v[3])),
            ),
            (
                "combined_loss",
                vec![z1, z2, w, b, p1, g1, p2, g2],
                vec![0, 1, 2, 3, 4, 6],
                Box::new(move |g, v| {
                    let ap = ap_loss_graph(g, v[0], v[1], v[2], v[3]);
                    let s = ssreg_graph(g, v[4], v[5], v[6], v[7]);
                    combined_graph(g, ap, s, LossWeights { lambda })
                }),
            ),
        ];
        for (name, inputs, checked, build) in &cases {
            match fd_error(inputs, checked, build.as_ref()) {
                Ok(e) => {
                    worst = worst.max(e);
                    check(&mut failures, e < 1e-4, || format!("{name} seed {seed} (N={n}, d={d}): rel err {e:.3e}"));
                }
                Err(m) => failures.push(format!("{name} seed {seed}: {m}")),
            }
        }
    }
    let elapsed = start.elapsed();
    check(&mut failures, elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"));
    verdict(
        1,
        &format!("gradient suite, 100 seeds x 3 losses, worst rel err {worst:.2e}, {elapsed:.2?}"),
        &failures,
    );
}

// ---------------------------------------------------------------- 2

fn random_features(count: usize, frames: usize, seed: u64) -> Vec<FeatureMatrix<f64>> {
    (0..count)
        .map(|s| {
            let mut rng = SeedMix::new(seed).int(s as u64).rng();
            let data = (0..frames * 40).map(|_| rng.sample(StandardNormal)).collect();
            FeatureMatrix::new(data, frames, 40).unwrap()
        })
        .collect()
}

/// SSReg on a two-branch tiny model where the target outputs `g` are computed
/// from a separate copy of the parameters, so anything that copy receives
/// can only have flowed through the `g` paths.
struct TwoBranch {
    model: SiameseModel<f64>,
    feats: Vec<FeatureMatrix<f64>>,
}

type Grads = BTreeMap<String, Option<Vec<f64>>>;

impl TwoBranch {
    fn loss(&self, online: &ParamStore<f64>, target: &ParamStore<f64>, stop: bool, grads: bool) -> (f64, Grads, Grads) {
        let mut g = Graph::new();
        let on: BTreeMap<_, _> = online.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        let tg: BTreeMap<_, _> = target.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        let f = &self.feats;
        let x1 = self.model.input(&mut g, &[&f[0], &f[1], &f[2]]).unwrap();
        let x2 = self.model.input(&mut g, &[&f[3], &f[4], &f[5]]).unwrap();
        let (p1, p2) = {
            let mut cx = Forward::new(&mut g, &on, &self.model.buffers, Mode::Train);
            (self.model.branch(&mut cx, x1).p, self.model.branch(&mut cx, x2).p)
        };
        let (g1, g2) = {
            let mut cx = Forward::new(&mut g, &tg, &self.model.buffers, Mode::Train);
            (self.model.branch(&mut cx, x1).g, self.model.branch(&mut cx, x2).g)
        };
        let l = ssreg_graph_with(&mut g, p1, g1, p2, g2, stop);
        let value = g.value(l).item();
        if !grads {
            return (value, Grads::new(), Grads::new());
        }
        let gr = g.backward(l);
        let collect = |vars: &BTreeMap<String, Var>| -> Grads {
            vars.iter().map(|(k, &v)| (k.clone(), gr.get(v).map(<[f64]>::to_vec))).collect()
        };
        (value, collect(&on), collect(&tg))
    }
}

#[test]
fn criterion_2_stop_gradient_contract() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let tb = TwoBranch {
        model: SiameseModel::new(ModelConfig::tiny(), 11).unwrap(),
        feats: random_features(6, 20, 2),
    };
    let params = &tb.model.params;

    let (_, online, target) = tb.loss(params, params, true, true);
    let reached: Vec<_> = target.iter().filter(|(_, g)| g.is_some()).map(|(k, _)| k.clone()).collect();
    check(&mut failures, reached.is_empty(), || format!("sg paths leaked gradient into {reached:?}"));
    for name in ["regularization.fc1.weight", "regularization.fc2.weight", "projection.fc1.weight", "encoder.conv1.weight"] {
        let ok = online[name].as_ref().is_some_and(|g| g.iter().any(|&v| v != 0.0));
        check(&mut failures, ok, || format!("{name} gets no gradient through the p path"));
    }

    let (_, _, target) = tb.loss(params, params, false, true);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for name in ["projection.fc2.weight", "projection.bn2.weight", "encoder.fc.weight", "encoder.bn2.weight", "encoder.conv1.weight"] {
        let Some(grad) = target[name].as_ref() else {
            failures.push(format!("{name}: no gradient once the stop-gradient is removed"));
            continue;
        };
        check(&mut failures, grad.iter().any(|&v| v != 0.0), || format!("{name}: all-zero gradient without sg"));
        for i in (0..grad.len()).step_by(grad.len() / 4 + 1) {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (tb.loss(params, &plus, false, false).0 - tb.loss(params, &minus, false, false).0) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-5);
            worst = worst.max(err);
            checked += 1;
            check(&mut failures, err < 1e-4, || format!("{name}[{i}]: fd {fd:.6e} vs tape {:.6e}", grad[i]));
        }
    }
    let elapsed = start.elapsed();
    check(&mut failures, elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"));
    verdict(
        2,
        &format!(
            "stop-gradient: target copy gets exactly no gradient; without sg {checked} entries agree with FD (worst {worst:.2e}), {elapsed:.2?}"
        ),
        &failures,
    );
}

// ---------------------------------------------------------------- 3

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

#[test]
fn criterion_3_loss_oracles() {
    let mut failures = Vec::new();
    let mut worst_ap = 0.0f64;
    for seed in 0..200u64 {
        let mut rng = SeedMix::new(seed).str("criterion-3-ap").rng();
        let d = rng.gen_range(2..=16);
        let a = rows(&gauss(8, d, &mut rng));
        let p = rows(&gauss(8, d, &mut rng));
        let params = ApLossParams {
            w: rng.gen_range(0.5..20.0),
            b: rng.gen_range(-10.0..5.0),
        };
        // Score matrix then softmax cross-entropy with the diagonal as labels.
        let scores: Vec<Vec<f64>> = a
            .iter()
            .map(|ai| {
                let ua = unit(ai);
                p.iter()
                    .map(|pj| params.w * ua.iter().zip(unit(pj)).map(|(x, y)| x * y).sum::<f64>() + params.b)
                    .collect()
            })
            .collect();
        let oracle = scores
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
                lse - row[i]
            })
            .sum::<f64>()
            / 8.0;
        let got = ap_loss(&a, &p, params).unwrap();
        worst_ap = worst_ap.max((got - oracle).abs());
        check(&mut failures, (got - oracle).abs() < 1e-6, || format!("ap seed {seed}: {got} vs {oracle}"));
    }

    let mut worst_id = 0.0f64;
    for seed in 0..1000u64 {
        let mut rng = SeedMix::new(seed).str("criterion-3-id").rng();
        let d = rng.gen_range(1..=64);
        let p: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let g: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (pu, gu) = (unit(&p), unit(&g));
        let sq: f64 = pu.iter().zip(&gu).map(|(x, y)| (x - y) * (x - y)).sum();
        let lhs = 2.0 + 2.0 * neg_cos_sim(&p, &g).unwrap();
        worst_id = worst_id.max((lhs - sq).abs());
        check(&mut failures, (lhs - sq).abs() < 1e-6, || format!("identity seed {seed}: {lhs} vs {sq}"));
    }

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..1000u64 {
        let mut rng = SeedMix::new(seed).str("criterion-3-range").rng();
        let (m, d) = (rng.gen_range(1..=16), rng.gen_range(1..=32));
        let t: Vec<Vec<Vec<f64>>> = (0..4).map(|_| rows(&gauss(m, d, &mut rng))).collect();
        let pairs: Vec<PairOutputs<'_, f64>> = (0..m)
            .map(|i| PairOutputs {
                p1: &t[0][i],
                g1: &t[1][i],
                p2: &t[2][i],
                g2: &t[3][i],
            })
            .collect();
        let v = ssreg_loss(&pairs).unwrap();
        lo = lo.min(v);
        hi = hi.max(v);
        check(&mut failures, (-1.0..=1.0).contains(&v), || format!("ssreg seed {seed} out of range: {v}"));
    }
    verdict(
        3,
        &format!(
            "AP vs softmax-CE oracle on 200 8x8 sets (max |diff| {worst_ap:.1e}); 2+2D = |p-g|^2 on 1000 pairs (max {worst_id:.1e}); ssreg in [{lo:.3}, {hi:.3}] over 1000 batches"
        ),
        &failures,
    );
}

// ---------------------------------------------------------------- 4

/// `(threshold, p_miss, p_fa)` by counting every trial against every
/// candidate threshold: each distinct score, then `+∞`.
fn brute_points(entries: &[(bool, f64)]) -> Vec<(f64, f64, f64)> {
    let mut th: Vec<f64> = entries.iter().map(|e| e.1).collect();
    th.sort_by(f64::total_cmp);
    th.dedup();
    th.push(f64::INFINITY);
    let nt = entries.iter().filter(|e| e.0).count() as f64;
    let nn = entries.len() as f64 - nt;
    th.iter()
        .map(|&t| {
            let miss = entries.iter().filter(|e| e.0 && e.1 < t).count() as f64;
            let fa = entries.iter().filter(|e| !e.0 && e.1 >= t).count() as f64;
            (t, miss / nt, fa / nn)
        })
        .collect()
}

fn brute_eer(pts: &[(f64, f64, f64)]) -> f64 {
    for k in 0..pts.len() {
        let (_, m1, f1) = pts[k];
        if m1 >= f1 {
            if m1 == f1 || k == 0 {
                return m1;
            }
            let (_, m0, f0) = pts[k - 1];
            // Intersection of the segment with the diagonal.
            let t = (f0 - m0) / ((f0 - m0) + (m1 - f1));
            return m0 + t * (m1 - m0);
        }
    }
    unreachable!("last point has p_miss = 1")
}

fn brute_min_dcf(pts: &[(f64, f64, f64)], p: f64) -> f64 {
    let norm = p.min(1.0 - p);
    pts.iter().map(|&(_, m, f)| (p * m + (1.0 - p) * f) / norm).fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_4_metric_oracles() {
    let mut failures = Vec::new();
    let dcf = DcfParams::default();
    let mut total_trials = 0;
    for seed in 0..200u64 {
        let mut rng = SeedMix::new(seed).str("criterion-4").rng();
        let n = rng.gen_range(2..=2000);
        let sep: f64 = rng.gen_range(0.0..3.0);
        // Coarse grids produce ties, fine ones mostly distinct scores.
        let grid = [1.0, 10.0, 1000.0, 1e9][rng.gen_range(0..4)];
        let mut entries: Vec<(bool, f64)> = (0..n)
            .map(|_| {
                let target = rng.gen_bool(0.3);
                let s: f64 = rng.sample::<f64, _>(StandardNormal) + if target { sep } else { 0.0 };
                (target, (s * grid).round() / grid)
            })
            .collect();
        entries[0].0 = true;
        entries[1].0 = false;
        total_trials += n;
        let set = TrialScoreSet::new(entries.clone());
        let oracle = brute_points(&entries);
        let pts: Vec<_> = operating_points(&set).unwrap().iter().map(|p| (p.threshold, p.p_miss, p.p_fa)).collect();
        check(&mut failures, pts == oracle, || format!("seed {seed}: operating points differ from the sweep"));
        let e = eer(&set).unwrap();
        let eo = brute_eer(&oracle);
        check(&mut failures, e == eo, || format!("seed {seed}: eer {e} vs oracle {eo}"));
        let c = min_dcf(&set, &dcf).unwrap();
        let co = brute_min_dcf(&oracle, dcf.p_target);
        check(&mut failures, c == co, || format!("seed {seed}: minDCF {c} vs oracle {co}"));
    }

    let perfect = TrialScoreSet::new(vec![(true, 0.9), (true, 0.8), (false, 0.1), (false, -0.5)]);
    check(&mut failures, eer(&perfect).unwrap() == 0.0, || "perfect separation: eer != 0".into());
    check(&mut failures, min_dcf(&perfect, &dcf).unwrap() == 0.0, || "perfect separation: minDCF != 0".into());
    let constant = TrialScoreSet::new((0..50).map(|i| (i % 3 == 0, 0.42)).collect());
    let c = min_dcf(&constant, &dcf).unwrap();
    check(&mut failures, c == 1.0, || format!("constant scores: minDCF {c} != 1"));
    verdict(
        4,
        &format!("EER/minDCF equal the exhaustive sweep on 200 sets ({total_trials} trials); degenerate cases hold"),
        &failures,
    );
}

// ---------------------------------------------------------------- 5

fn wav(samples: Vec<f64>) -> Waveform<f64> {
    Waveform::new(samples, SAMPLE_RATE_HZ).unwrap()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[test]
fn criterion_5_dsp_suite() {
    let start = Instant::now();
    let mut failures = Vec::new();

    let mut worst_snr = 0.0f64;
    for case in 0..100u64 {
        let mut rng = SeedMix::new(case).str("criterion-5-snr").rng();
        let n = rng.gen_range(400..20_000);
        let clean: Vec<f64> = (0..n).map(|i| (i as f64 * 0.03).sin() * rng.gen_range(0.2..1.0)).collect();
        let noise: Vec<f64> = (0..rng.gen_range(100..30_000)).map(|_| rng.sample(StandardNormal)).collect();
        let target = rng.gen_range(-5.0..30.0);
        let offset = rng.gen_range(0..noise.len());
        let mixed = mix_noise_at(&wav(clean.clone()), &wav(noise), target, offset).unwrap();
        let added: Vec<f64> = mixed.samples().iter().zip(&clean).map(|(m, c)| m - c).collect();
        let snr = 10.0 * (power(&clean) / power(&added)).log10();
        worst_snr = worst_snr.max((snr - target).abs());
        check(&mut failures, (snr - target).abs() < 0.1, || format!("snr case {case}: {snr:.4} vs {target:.4} dB"));
    }

    let mut worst_rev = 0.0f64;
    for case in 0..20u64 {
        let mut rng = SeedMix::new(case).str("criterion-5-rir").rng();
        let x: Vec<f64> = (0..rng.gen_range(10..6000)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..rng.gen_range(1..2000))
            .map(|i| rng.gen_range(-1.0..1.0) * (-(i as f64) / 300.0).exp())
            .collect();
        let mut naive = vec![0.0; x.len()];
        for (i, out) in naive.iter_mut().enumerate() {
            for (k, hk) in h.iter().enumerate().take(i + 1) {
                *out += hk * x[i - k];
            }
        }
        let peak = |v: &[f64]| v.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let g = peak(&x) / peak(&naive);
        let got = reverberate(&wav(x.clone()), &wav(h)).unwrap();
        let scale = peak(&x);
        let err = got.samples().iter().zip(&naive).map(|(a, b)| (a - b * g).abs()).fold(0.0, f64::max) / scale;
        worst_rev = worst_rev.max(err);
        check(&mut failures, err < 1e-6, || format!("reverb case {case}: rel err {err:.2e}"));
    }

    let x: Vec<f64> = (0..4000).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    let id = reverberate(&wav(x.clone()), &wav(vec![1.0])).unwrap();
    let dev = id.samples().iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(&mut failures, dev < 1e-12, || format!("unit impulse RIR changes the signal by {dev:.2e}"));

    let same = speed_perturb(&wav(x.clone()), 1.0).unwrap();
    check(&mut failures, same.samples() == x.as_slice(), || "speed 1.0 is not the identity".into());
    for (len, f) in [(4000, 0.9), (4000, 1.1), (31_200, 0.9), (31_201, 1.1), (777, 0.95), (16_000, 1.05)] {
        let y = speed_perturb(&wav(vec![0.25; len]), f).unwrap();
        let want = (len as f64 / f).round() as usize;
        check(&mut failures, y.len() == want, || format!("speed {f} on {len}: {} samples, want {want}", y.len()));
    }

    let seg = wav((0..31_200).map(|i| (i as f64 * 0.01).sin() + 0.1 * ((i * 31) % 17) as f64).collect());
    let feat = logmel(&seg).unwrap();
    check(&mut failures, feat.num_frames() == 193, || format!("1.95 s gives {} frames", feat.num_frames()));
    let norm = mvn(&feat);
    let (t, b) = (norm.num_frames(), norm.num_bins());
    let mut worst_mvn = 0.0f64;
    for bin in 0..b {
        let col: Vec<f64> = (0..t).map(|i| norm.get(i, bin)).collect();
        let mean = col.iter().sum::<f64>() / t as f64;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64).sqrt();
        worst_mvn = worst_mvn.max(mean.abs()).max((sd - 1.0).abs());
    }
    check(&mut failures, worst_mvn < 1e-5, || format!("mvn column stats off by {worst_mvn:.2e}"));

    let mut rng = SeedMix::new(5).str("criterion-5-crop").rng();
    let seg_len = 31_200;
    let mut overlaps = 0;
    let utts: Vec<Waveform<f64>> = [62_400, 62_401, 70_000, 100_000, 250_000]
        .iter()
        .map(|&n| wav(vec![0.5; n]))
        .collect();
    for i in 0..10_000 {
        let u = &utts[i % utts.len()];
        let p = crop_pair(u, "u", 1.95, &mut rng).unwrap();
        let (a, b) = (p.range_a.clone(), p.range_b.clone());
        if a.len() != seg_len || b.len() != seg_len || a.end > u.len() || b.end > u.len() {
            failures.push(format!("crop {i}: bad ranges {a:?} {b:?}"));
        }
        if a.start < b.end && b.start < a.end {
            overlaps += 1;
        }
    }
    check(&mut failures, overlaps == 0, || format!("{overlaps} of 10000 crop pairs overlap"));

    let elapsed = start.elapsed();
    check(&mut failures, elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"));
    verdict(
        5,
        &format!(
            "DSP: snr max err {worst_snr:.1e} dB, reverb rel err {worst_rev:.1e}, identities, 193 frames, mvn {worst_mvn:.1e}, 0/10000 overlaps, {elapsed:.2?}"
        ),
        &failures,
    );
}

// ---------------------------------------------------------------- 6, 7

/// Toy setup shared by the end-to-end run and the ablations: 32 training
/// speakers, evaluation on 32 unseen speakers.
struct Toy {
    train: MemoryStore<f32>,
    held_out: MemoryStore<f32>,
    trials: TrialList,
    corpora: ssreg_core::augment::AugCorpora<f32>,
}

const TOY_STEPS: usize = 600;
const TOY_BATCH: usize = 32;
const TOY_LR: f64 = 0.02;

impl Toy {
    fn new() -> Self {
        let train = generate_toy_corpus::<f32>(32, 20, 4.5, 1).unwrap();
        let held = generate_toy_corpus::<f32>(32, 8, 4.5, 1001).unwrap();
        Toy {
            trials: build_trial_list(held.hidden_labels(), 1000, 5).unwrap(),
            train: train.store(),
            held_out: held.store(),
            corpora: toy_aug_corpora(12, 12, 1),
        }
    }

    fn config(strategy: Strategy, lambda: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_utterances: TOY_BATCH,
            total_steps: TOY_STEPS,
            lr_initial: TOY_LR,
            lambda,
            seed,
            strategy,
            ..Default::default()
        }
    }

    fn eer(&self, model: &SiameseModel<f32>) -> f64 {
        evaluate(model, &self.held_out, &self.trials, &DcfParams::default()).unwrap().0.eer
    }

    /// Trains from scratch; returns the model and the smallest collapse
    /// metric seen at any step.
    fn train(&self, cfg: &TrainConfig) -> (SiameseModel<f32>, f64) {
        let policy = cfg.strategy.policy();
        let data = TrainData {
            store: &self.train,
            corpora: &self.corpora,
            policy: &policy,
        };
        let mut state = TrainState::<f32>::new(ModelConfig::tiny(), cfg).unwrap();
        let mut min_std = f64::INFINITY;
        train_until(&mut state, &data, cfg, cfg.total_steps, |m, _| {
            min_std = min_std.min(m.emb_std);
            if m.step % 100 == 0 {
                println!("    {m}");
            }
            Ok(())
        })
        .unwrap();
        (state.model, min_std)
    }
}

#[test]
fn criteria_6_and_7_toy_training() {
    let toy = Toy::new();
    let untrained = toy.eer(&SiameseModel::new(ModelConfig::tiny(), 0).unwrap());

    let start = Instant::now();
    let main_cfg = Toy::config(Strategy::ReverbNoise, 0.08, 0);
    let (model, min_std) = toy.train(&main_cfg);
    let trained = toy.eer(&model);
    let elapsed = start.elapsed();

    let d = model.embedding_dim();
    let floor = 0.1 / (d as f64).sqrt();
    let mut failures = Vec::new();
    check(&mut failures, trained < 0.25, || format!("held-out EER {:.2}% is not below 25%", 100.0 * trained));
    check(&mut failures, trained < untrained, || "training did not beat the untrained baseline".into());
    check(&mut failures, min_std > floor, || format!("collapse metric fell to {min_std:.4} (floor {floor:.4})"));
    check(&mut failures, elapsed < Duration::from_secs(600), || format!("run took {elapsed:?}"));

    // A one-sample shift must barely move a trained embedding.
    let mut worst_shift = 1.0f64;
    for (id, w) in toy.held_out.items.iter().step_by(25) {
        let x = w.samples();
        let mut shifted = vec![0.0f32];
        shifted.extend_from_slice(&x[..x.len() - 1]);
        let e1 = extract_embedding(&model, w).unwrap();
        let e2 = extract_embedding(&model, &Waveform::new(shifted, SAMPLE_RATE_HZ).unwrap()).unwrap();
        let c = cosine_score(&e1, &e2).unwrap();
        worst_shift = worst_shift.min(c);
        check(&mut failures, c > 0.99, || format!("{id}: shifted copy has cosine {c:.4}"));
    }
    let summary6 = format!(
        "toy run (32 speakers, tiny, R+N, lambda=0.08, {TOY_STEPS} steps, M={TOY_BATCH}): held-out EER {:.2}% (untrained {:.2}%), min emb_std {min_std:.4} > {floor:.4}, shift cosine >= {worst_shift:.4}, {elapsed:.1?}",
        100.0 * trained,
        100.0 * untrained
    );

    // Directional ablations. Soft-gated: a miss is reported, not failed.
    let no_aug = toy.eer(&toy.train(&Toy::config(Strategy::NoAug, 0.08, 0)).0);
    let mut lambda_rows = vec![(0u64, trained, toy.eer(&toy.train(&Toy::config(Strategy::ReverbNoise, 0.0, 0)).0))];
    for seed in [1u64, 2] {
        let with = toy.eer(&toy.train(&Toy::config(Strategy::ReverbNoise, 0.08, seed)).0);
        let without = toy.eer(&toy.train(&Toy::config(Strategy::ReverbNoise, 0.0, seed)).0);
        lambda_rows.push((seed, with, without));
    }
    let aug_ok = trained <= no_aug;
    let wins = lambda_rows.iter().filter(|(_, w, wo)| w <= wo).count();
    let seeds: Vec<String> = lambda_rows
        .iter()
        .map(|(s, w, wo)| format!("seed {s}: lambda=0.08 {:.2}% vs lambda=0 {:.2}%", 100.0 * w, 100.0 * wo))
        .collect();
    let summary7 = format!(
        "ablations: R+N {:.2}% vs No Aug {:.2}%; lambda=0.08 <= lambda=0 in {wins}/3 seeds ({})",
        100.0 * trained,
        100.0 * no_aug,
        seeds.join("; ")
    );
    if aug_ok && wins >= 2 {
        println!("PASS criterion 7: {summary7}");
    } else {
        println!("FAIL criterion 7 (soft-gated, not failing the test): {summary7}");
        if !aug_ok {
            println!("    warning: R+N did not reach an EER at or below No Aug on the toy corpus");
        }
        if wins < 2 {
            println!("    warning: lambda=0.08 beat lambda=0 in only {wins} of 3 seeds: {}", seeds.join("; "));
        }
    }
    verdict(6, &summary6, &failures);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_determinism_and_resume() {
    let mut failures = Vec::new();
    let corpus = generate_toy_corpus::<f64>(6, 3, 4.0, 21).unwrap();
    let store = corpus.store();
    let corpora = toy_aug_corpora::<f64>(3, 3, 21);
    let cfg = TrainConfig {
        batch_utterances: 6,
        total_steps: 20,
        seed: 9,
        strategy: Strategy::ReverbNoiseSpeedSpecAug,
        ..Default::default()
    };
    let policy = cfg.strategy.policy();
    let data = TrainData {
        store: &store,
        corpora: &corpora,
        policy: &policy,
    };
    let run = |state: &mut TrainState<f64>, until: usize| train_until(state, &data, &cfg, until, |_, _| Ok(())).unwrap();

    let mut a = TrainState::<f64>::new(ModelConfig::tiny(), &cfg).unwrap();
    let mut b = TrainState::<f64>::new(ModelConfig::tiny(), &cfg).unwrap();
    run(&mut a, 10);
    run(&mut b, 10);
    let bits = |s: &TrainState<f64>| -> Vec<u64> {
        s.model.params.values().chain(s.model.buffers.values()).flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    };
    check(&mut failures, bits(&a) == bits(&b), || "two identical runs differ at step 10".into());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("step10.ckpt");
    save_checkpoint(&path, &a, &cfg).unwrap();
    run(&mut a, 20);
    let (mut resumed, saved) = load_checkpoint::<f64>(&path).unwrap();
    check(&mut failures, saved == cfg, || "checkpoint config differs".into());
    run(&mut resumed, 20);
    check(&mut failures, bits(&resumed) == bits(&a), || "resumed run differs from uninterrupted run".into());
    check(&mut failures, resumed.momentum == a.momentum, || "momentum buffers differ after resume".into());
    verdict(
        8,
        "same config and seed give bitwise-identical step-10 parameters; resume from step 10 equals the uninterrupted 20-step run",
        &failures,
    );
}
