use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use ssreg_core::augment::{AugCorpora, Strategy};
use ssreg_core::corpus::{
    build_trial_list, generate_toy_corpus, generate_toy_noises, generate_toy_rirs, load_manifest, read_wav,
    write_clips, write_wav, ClipManifest, DiskStore, MemoryStore, MissingFilePolicy, TrialList,
};
use ssreg_core::eval::{det_csv, evaluate, operating_points, write_scores, DcfParams, EvalReport, TrialScoreSet};
use ssreg_core::features::{logmel, mvn};
use ssreg_core::trainer::{
    load_checkpoint, make_pair, save_checkpoint, train_until, utterance_rng, BatchSpec, TrainData, TrainState,
};
use ssreg_core::Scalar;

use crate::config::{Precision, RunConfig};

pub struct ToyArgs {
    pub out: PathBuf,
    pub speakers: usize,
    pub utts: usize,
    pub duration: f64,
    pub seed: u64,
    pub trials: usize,
    pub noises: usize,
    pub rirs: usize,
}

const NOISE_CLIP_S: f64 = 5.0;

pub fn make_toy(a: &ToyArgs) -> Result<()> {
    ensure!(a.speakers >= 2, "--speakers must be at least 2 to form non-target trials, got {}", a.speakers);
    ensure!(a.utts >= 2, "--utts must be at least 2 to form target trials, got {}", a.utts);
    let corpus = generate_toy_corpus::<f32>(a.speakers, a.utts, a.duration, a.seed)?;
    let trials = build_trial_list(corpus.hidden_labels(), a.trials, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    corpus.write(&a.out)?;
    trials.write(&a.out.join("trials.txt"))?;

    let noises: Vec<_> = generate_toy_noises::<f32>(a.noises, NOISE_CLIP_S, a.seed)
        .into_iter()
        .map(|(id, w, cat)| (id, w, Some(cat)))
        .collect();
    let rirs: Vec<_> = generate_toy_rirs::<f32>(a.rirs, a.seed)
        .into_iter()
        .map(|(id, w)| (id, w, None))
        .collect();
    fs::write(a.out.join("noises.tsv"), write_clips(&a.out, "noises", &noises)?.to_tsv())?;
    fs::write(a.out.join("rirs.tsv"), write_clips(&a.out, "rirs", &rirs)?.to_tsv())?;
    fs::write(a.out.join("config.toml"), RunConfig::default().to_toml()?)?;
    println!(
        "wrote {} utterances, {} trials, {} noises and {} RIRs to {}",
        corpus.utterances.len(),
        trials.len(),
        noises.len(),
        rirs.len(),
        a.out.display()
    );
    Ok(())
}

fn load_corpora<T: Scalar>(cfg: &RunConfig) -> Result<AugCorpora<T>> {
    let policy = cfg.policy();
    let load = |needed: bool, path: &Path| -> Result<Vec<_>> {
        if !needed {
            return Ok(Vec::new());
        }
        let list = ClipManifest::load(path).with_context(|| format!("reading clip list {}", path.display()))?;
        Ok(list.load_audio()?)
    };
    Ok(AugCorpora {
        noises: load(policy.noise_enabled && policy.p_noise > 0.0, &cfg.paths.noises)?,
        rirs: load(policy.reverb_enabled && policy.p_reverb > 0.0, &cfg.paths.rirs)?,
    })
}

fn load_store<T: Scalar>(manifest: &Path) -> Result<MemoryStore<T>> {
    let m = load_manifest(manifest, MissingFilePolicy::Error)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;
    ensure!(!m.is_empty(), "manifest {} lists no utterances", manifest.display());
    Ok(MemoryStore::from_manifest(&m)?)
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, resume),
        Precision::F64 => train_typed::<f64>(cfg, resume),
    }
}

/// Keeps the metrics lines up to `step` so a resumed run continues the log.
fn truncate_metrics(path: &Path, step: usize) -> Result<String> {
    let mut kept = String::new();
    if let Ok(f) = fs::File::open(path) {
        for line in BufReader::new(f).lines() {
            let line = line?;
            match line.parse::<ssreg_core::trainer::StepMetrics>() {
                Ok(m) if m.step <= step => {
                    kept.push_str(&line);
                    kept.push('\n');
                }
                _ => break,
            }
        }
    }
    Ok(kept)
}

fn train_typed<T: Scalar>(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let store = load_store::<T>(&cfg.paths.manifest)?;
    let corpora = load_corpora::<T>(cfg)?;
    let policy = cfg.policy();

    let mut state = match resume {
        Some(path) => {
            let (state, saved) =
                load_checkpoint::<T>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            ensure!(
                saved == cfg.train,
                "checkpoint {} was trained with a different [train] section; resume needs the same settings",
                path.display()
            );
            ensure!(
                *state.model.config() == cfg.model,
                "checkpoint {} holds a different [model] configuration",
                path.display()
            );
            log::info!("resuming from step {}", state.step);
            state
        }
        None => TrainState::<T>::new(cfg.model.clone(), &cfg.train)?,
    };

    let metrics_path = out.join("metrics.log");
    let kept = if resume.is_some() {
        truncate_metrics(&metrics_path, state.step)?
    } else {
        String::new()
    };
    fs::write(&metrics_path, kept)?;
    let mut metrics = BufWriter::new(fs::OpenOptions::new().append(true).open(&metrics_path)?);
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let data = TrainData {
        store: &store,
        corpora: &corpora,
        policy: &policy,
    };
    let every = cfg.checkpoint_every;
    train_until(&mut state, &data, &cfg.train, cfg.train.total_steps, |m, st| {
        writeln!(metrics, "{m}")?;
        println!("{m}");
        if every > 0 && m.step % every == 0 {
            metrics.flush()?;
            save_checkpoint(&out.join(format!("ckpt-{:06}.ckpt", m.step)), st, &cfg.train)?;
        }
        Ok(())
    })?;
    metrics.flush()?;
    let last = out.join("final.ckpt");
    save_checkpoint(&last, &state, &cfg.train)?;
    println!("final checkpoint: {}", last.display());
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub trials: PathBuf,
    pub out: PathBuf,
    pub p_target: f64,
    pub precision: Precision,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    match a.precision {
        Precision::F32 => eval_typed::<f32>(a),
        Precision::F64 => eval_typed::<f64>(a),
    }
}

fn eval_typed<T: Scalar>(a: &EvalArgs) -> Result<()> {
    let trials = TrialList::load(&a.trials).with_context(|| format!("reading trials {}", a.trials.display()))?;
    let (state, _) = load_checkpoint::<T>(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let manifest = load_manifest(&a.manifest, MissingFilePolicy::Error)
        .with_context(|| format!("reading manifest {}", a.manifest.display()))?;
    let store = DiskStore { manifest };
    let dcf = DcfParams {
        p_target: a.p_target,
        ..Default::default()
    };
    let (rep, scored) = evaluate(&state.model, &store, &trials, &dcf)?;
    fs::create_dir_all(&a.out)?;
    write_scores(&a.out.join("scores.txt"), &scored)?;
    let points = operating_points(&TrialScoreSet::from_scored(&scored))?;
    fs::write(a.out.join("det.csv"), det_csv(&points))?;
    fs::write(a.out.join("report.txt"), format!("{rep}\n"))?;
    println!("{rep}");
    Ok(())
}

pub enum Sweep {
    Strategies(Vec<u8>),
    Lambdas(Vec<f64>),
}

struct AblationRow {
    setting: String,
    runs: Vec<(u64, EvalReport)>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&EvalReport) -> f64) -> f64 {
        self.runs.iter().map(|(_, r)| f(r)).sum::<f64>() / self.runs.len() as f64
    }
}

pub fn ablate(cfg: &RunConfig, sweep: &Sweep, seeds: &[u64]) -> Result<()> {
    match cfg.precision {
        Precision::F32 => ablate_typed::<f32>(cfg, sweep, seeds),
        Precision::F64 => ablate_typed::<f64>(cfg, sweep, seeds),
    }
}

fn ablate_typed<T: Scalar>(cfg: &RunConfig, sweep: &Sweep, seeds: &[u64]) -> Result<()> {
    ensure!(!seeds.is_empty(), "--seeds must list at least one seed");
    let settings: Vec<(String, RunConfig)> = match sweep {
        Sweep::Strategies(s) => {
            ensure!(!s.is_empty(), "strategy list is empty");
            s.iter()
                .map(|&k| {
                    let strategy = Strategy::try_from(k)?;
                    let mut c = cfg.clone();
                    c.train.strategy = strategy;
                    c.augment = None;
                    Ok((format!("{k}: {}", strategy.label()), c))
                })
                .collect::<Result<_>>()?
        }
        Sweep::Lambdas(l) => {
            ensure!(!l.is_empty(), "lambda list is empty");
            l.iter()
                .map(|&lambda| {
                    let mut c = cfg.clone();
                    c.train.lambda = lambda;
                    c.train.validate()?;
                    Ok((format!("lambda={lambda}"), c))
                })
                .collect::<Result<_>>()?
        }
    };

    let store = load_store::<T>(&cfg.paths.manifest)?;
    let eval_store = match &cfg.paths.eval_manifest {
        Some(p) => Some(load_store::<T>(p)?),
        None => None,
    };
    let trials = TrialList::load(&cfg.paths.trials)
        .with_context(|| format!("reading trials {}", cfg.paths.trials.display()))?;

    let mut rows = Vec::new();
    for (setting, c) in settings {
        let corpora = load_corpora::<T>(&c)?;
        let policy = c.policy();
        let mut runs = Vec::new();
        for &seed in seeds {
            let mut tc = c.train.clone();
            tc.seed = seed;
            let mut state = TrainState::<T>::new(c.model.clone(), &tc)?;
            let data = TrainData {
                store: &store,
                corpora: &corpora,
                policy: &policy,
            };
            train_until(&mut state, &data, &tc, tc.total_steps, |m, _| {
                if m.step % 100 == 0 || m.step == tc.total_steps {
                    log::info!("[{setting}, seed {seed}] {m}");
                }
                Ok(())
            })?;
            let (rep, _) = evaluate(&state.model, eval_store.as_ref().unwrap_or(&store), &trials, &c.dcf)?;
            log::info!("[{setting}, seed {seed}] EER {:.2}%", 100.0 * rep.eer);
            runs.push((seed, rep));
        }
        rows.push(AblationRow { setting, runs });
    }

    let text = ablation_text(&rows);
    let csv = ablation_csv(&rows);
    fs::create_dir_all(&cfg.paths.out_dir)?;
    fs::write(cfg.paths.out_dir.join("ablation.txt"), &text)?;
    fs::write(cfg.paths.out_dir.join("ablation.csv"), &csv)?;
    print!("{text}");
    Ok(())
}

fn ablation_text(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max("setting".len());
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}  per-seed EER (%)", "setting", "EER (%)", "minDCF");
    for r in rows {
        let per_seed: Vec<String> = r
            .runs
            .iter()
            .map(|(seed, rep)| format!("{seed}:{:.2}", 100.0 * rep.eer))
            .collect();
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.2}  {:>8.4}  {}",
            r.setting,
            100.0 * r.mean(|x| x.eer),
            r.mean(|x| x.min_dcf),
            per_seed.join(" ")
        );
    }
    s
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,seed,eer,min_dcf\n");
    for r in rows {
        for (seed, rep) in &r.runs {
            let _ = writeln!(s, "\"{}\",{seed},{},{}", r.setting, rep.eer, rep.min_dcf);
        }
    }
    s
}

pub fn dump_features(wav: &Path, out: &Path, csv: bool, raw: bool) -> Result<()> {
    let w = read_wav::<f32>(wav).with_context(|| format!("reading {}", wav.display()))?;
    let mut feat = logmel(&w)?;
    if !raw {
        feat = mvn(&feat);
    }
    let mut f = BufWriter::new(fs::File::create(out).with_context(|| format!("creating {}", out.display()))?);
    if csv {
        for t in 0..feat.num_frames() {
            let row: Vec<String> = feat.row(t).iter().map(|v| v.to_string()).collect();
            writeln!(f, "{}", row.join(","))?;
        }
    } else {
        feat.write_dump(&mut f)?;
    }
    f.flush()?;
    println!("{} frames x {} bins -> {}", feat.num_frames(), feat.num_bins(), out.display());
    Ok(())
}

pub fn augment_preview(cfg: &RunConfig, utterance: &str, step: usize, out: &Path) -> Result<()> {
    let manifest = load_manifest(&cfg.paths.manifest, MissingFilePolicy::Warn)?;
    let index: BTreeMap<&str, &Path> = manifest
        .entries
        .iter()
        .map(|e| (e.utterance_id.as_str(), e.path.as_path()))
        .collect();
    let Some(path) = index.get(utterance) else {
        bail!("utterance `{utterance}` is not in {}", cfg.paths.manifest.display());
    };
    let wav = read_wav::<f32>(path)?;
    let corpora = load_corpora::<f32>(cfg)?;
    let policy = cfg.policy();
    let spec = BatchSpec {
        batch_utterances: 1,
        segment_s: cfg.train.segment_s,
        seed: cfg.train.seed,
        policy: &policy,
    };
    let mut rng = utterance_rng(cfg.train.seed, utterance, step);
    let (pair, _, _) = make_pair(&wav, utterance, &spec, &corpora, &mut rng)?;
    fs::create_dir_all(out)?;
    write_wav(&out.join("a.wav"), &pair.seg_a)?;
    write_wav(&out.join("b.wav"), &pair.seg_b)?;
    let log: String = pair.log_lines().iter().map(|l| format!("{l}\n")).collect();
    fs::write(out.join("ops.log"), &log)?;
    print!("{log}");
    Ok(())
}
