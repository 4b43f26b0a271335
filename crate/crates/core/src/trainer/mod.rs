//! Optimization loop: batch assembly, SGD with momentum under a step-based
//! cosine schedule, collapse monitoring and checkpoints.

mod batch;
mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use batch::{build_batch, make_pair, utterance_rng, Batch, BatchSpec};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::augment::{AugCorpora, AugmentationPolicy, Strategy};
use crate::autograd::{Graph, Tensor};
use crate::corpus::{AudioStore, SEGMENT_SECONDS};
use crate::error::{Error, Result};
use crate::losses::{ap_loss_graph, combined_graph, ssreg_graph, LossWeights, MIN_AP_SCALE};
use crate::model::{apply_bn_updates, Forward, Mode, ModelConfig, ParamStore, SiameseModel, LOSS_W};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_utterances: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub total_steps: usize,
    pub lambda: f64,
    pub seed: u64,
    pub strategy: Strategy,
    pub segment_s: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_utterances: 64,
            lr_initial: 3e-3,
            lr_final: 4e-5,
            momentum: 0.9,
            total_steps: 2000,
            lambda: 0.08,
            seed: 0,
            strategy: Strategy::ReverbNoise,
            segment_s: SEGMENT_SECONDS,
        }
    }
}

impl TrainConfig {
    /// Large-batch settings for full-size corpora.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_utterances: 250,
            ..Default::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_utterances < 2 {
            return bad(format!("batch_utterances must be >= 2, got {}", self.batch_utterances));
        }
        if self.total_steps < 1 {
            return bad("total_steps must be >= 1".into());
        }
        if !(self.lr_final > 0.0 && self.lr_final < self.lr_initial && self.lr_initial.is_finite()) {
            return bad(format!(
                "need 0 < lr_final < lr_initial, got {} and {}",
                self.lr_final, self.lr_initial
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.segment_s > 0.0 && self.segment_s.is_finite()) {
            return bad(format!("segment_s must be positive, got {}", self.segment_s));
        }
        self.loss_weights().validate()
    }
}

/// Cosine decay from `lr_initial` at step 0 to `lr_final` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} is past total_steps {}",
            cfg.total_steps
        )));
    }
    let frac = step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr_final + 0.5 * (cfg.lr_initial - cfg.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Mean over dimensions of the per-dimension standard deviation of the
/// ℓ₂-normalized rows. About `1/√d` for spread-out embeddings, zero under
/// collapse.
pub fn collapse_metric<T: Scalar>(rows: &[&[T]]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let d = rows[0].len();
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v.f64() / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    for j in 0..d {
        // Shifted by the first row so identical rows give exactly zero.
        let shift = unit[0][j];
        let (mut s, mut s2) = (0.0, 0.0);
        for u in &unit {
            let x = u[j] - shift;
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        total += (s2 / n as f64 - mean * mean).max(0.0).sqrt();
    }
    total / d as f64
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Completed updates including this one.
    pub step: usize,
    pub lr: f64,
    pub ap: f64,
    pub ssreg: f64,
    pub total: f64,
    pub emb_std: f64,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:.6e} ap={:.6} ssreg={:.6} total={:.6} emb_std={:.6}",
            self.step, self.lr, self.ap, self.ssreg, self.total, self.emb_std
        )
    }
}

impl FromStr for StepMetrics {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("metrics token `{tok}` lacks `=`")))?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<f64> {
            fields
                .get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("metrics line lacks `{k}`")))?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value for `{k}`")))
        };
        Ok(StepMetrics {
            step: num("step")? as usize,
            lr: num("lr")?,
            ap: num("ap")?,
            ssreg: num("ssreg")?,
            total: num("total")?,
            emb_std: num("emb_std")?,
        })
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Completed updates.
    pub step: usize,
    pub model: SiameseModel<T>,
    /// SGD momentum buffers, keyed like the parameters.
    pub momentum: ParamStore<T>,
    /// Collapse metric of the most recent batch.
    pub collapse: Option<f64>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: ModelConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let model = SiameseModel::new(model, train.seed)?;
        let momentum = model
            .params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Ok(TrainState {
            step: 0,
            model,
            momentum,
            collapse: None,
        })
    }
}

/// Loss values of `batch` under the current parameters without updating
/// anything.
pub fn evaluate_batch<T: Scalar>(state: &TrainState<T>, batch: &Batch<T>, cfg: &TrainConfig) -> Result<(f64, f64, f64)> {
    let mut graph = Graph::new();
    let vars = state.model.bind(&mut graph, Mode::Eval);
    let mut cx = Forward::new(&mut graph, &vars, &state.model.buffers, Mode::Train);
    let (ap, ss, total, _) = forward_losses(&state.model, &mut cx, batch, cfg)?;
    Ok((graph.value(ap).item().f64(), graph.value(ss).item().f64(), graph.value(total).item().f64()))
}

fn forward_losses<T: Scalar>(
    model: &SiameseModel<T>,
    cx: &mut Forward<'_, T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<(crate::autograd::Var, crate::autograd::Var, crate::autograd::Var, f64)> {
    let fa: Vec<_> = batch.feats_a.iter().collect();
    let fb: Vec<_> = batch.feats_b.iter().collect();
    let xa = model.input(cx.graph, &fa)?;
    let xb = model.input(cx.graph, &fb)?;
    let a = model.branch(cx, xa);
    let b = model.branch(cx, xb);
    let (w, bias) = (cx.var(LOSS_W), cx.var(crate::model::LOSS_B));
    let ap = ap_loss_graph(cx.graph, a.z, b.z, w, bias);
    let ss = ssreg_graph(cx.graph, a.p, a.g, b.p, b.g);
    let total = combined_graph(cx.graph, ap, ss, cfg.loss_weights());
    let e = model.embedding_dim();
    let za = cx.graph.value(a.z).data();
    let zb = cx.graph.value(b.z).data();
    let rows: Vec<&[T]> = za.chunks(e).chain(zb.chunks(e)).collect();
    Ok((ap, ss, total, collapse_metric(&rows)))
}

/// One SGD-with-momentum update on `batch`.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &Batch<T>, cfg: &TrainConfig) -> Result<StepMetrics> {
    let lr = lr_at(state.step, cfg)?;
    let mut graph = Graph::new();
    let vars = state.model.bind(&mut graph, Mode::Train);
    let mut cx = Forward::new(&mut graph, &vars, &state.model.buffers, Mode::Train);
    let (ap, ss, total, emb_std) = forward_losses(&state.model, &mut cx, batch, cfg)?;
    let bn_updates = std::mem::take(&mut cx.bn_updates);
    let values = [ap, ss, total].map(|v| graph.value(v).item().f64());
    let non_finite = || Error::NonFinite {
        step: state.step,
        dump: batch.op_log(),
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(non_finite());
    }
    let grads = graph.backward(total);
    if vars
        .values()
        .filter_map(|&v| grads.get(v))
        .any(|g| g.iter().any(|x| !x.is_finite()))
    {
        return Err(non_finite());
    }

    let (mu, lr_t) = (T::of(cfg.momentum), T::of(lr));
    for (name, &v) in &vars {
        // Parameters off the objective (e.g. the regularization MLP at
        // λ = 0) are left untouched, momentum included.
        let Some(g) = grads.get(v) else { continue };
        let buf = state.momentum.get_mut(name).expect("momentum buffer per parameter");
        let p = state.model.params.get_mut(name).expect("bound parameter exists");
        for ((b, &gi), pi) in buf.data_mut().iter_mut().zip(g).zip(p.data_mut()) {
            *b = mu * *b + gi;
            *pi -= lr_t * *b;
        }
    }
    let w = &mut state.model.params.get_mut(LOSS_W).expect("AP scale").data_mut()[0];
    *w = w.max(T::of(MIN_AP_SCALE));
    let bn_m = state.model.config().bn_momentum;
    apply_bn_updates(&mut state.model.buffers, &bn_updates, bn_m);

    state.step += 1;
    state.collapse = Some(emb_std);
    Ok(StepMetrics {
        step: state.step,
        lr,
        ap: values[0],
        ssreg: values[1],
        total: values[2],
        emb_std,
    })
}

/// Data sources for a run.
pub struct TrainData<'a, T> {
    pub store: &'a dyn AudioStore<T>,
    pub corpora: &'a AugCorpora<T>,
    pub policy: &'a AugmentationPolicy,
}

impl<T: Scalar> TrainData<'_, T> {
    pub fn batch(&self, cfg: &TrainConfig, step: usize) -> Result<Batch<T>> {
        let spec = BatchSpec {
            batch_utterances: cfg.batch_utterances,
            segment_s: cfg.segment_s,
            seed: cfg.seed,
            policy: self.policy,
        };
        build_batch(self.store, self.corpora, &spec, step)
    }
}

/// Trains until `state.step == until` (at most `total_steps`), calling
/// `on_step` after every update.
pub fn train_until<T: Scalar>(
    state: &mut TrainState<T>,
    data: &TrainData<'_, T>,
    cfg: &TrainConfig,
    until: usize,
    mut on_step: impl FnMut(&StepMetrics, &TrainState<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    data.policy.validate()?;
    data.corpora.check(data.policy)?;
    let until = until.min(cfg.total_steps);
    while state.step < until {
        let batch = data.batch(cfg, state.step)?;
        let metrics = train_step(state, &batch, cfg)?;
        on_step(&metrics, state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
