//! Siamese speaker network: shared encoder and projection MLP, a
//! regularization MLP, and the learnable affine scoring parameters.
//!
//! Canonical parameter names (checkpoint interchange):
//!
//! | name | shape |
//! |---|---|
//! | `encoder.conv1.weight` | `[out, in, kh, kw]` |
//! | `encoder.<bn>.{weight,bias}` | `[C]` (+ buffers `running_mean`, `running_var`) |
//! | `encoder.layer{1..4}.{i}.{conv1,conv2,downsample.conv}.weight` | thin ResNet only |
//! | `encoder.sap.linear.{weight,bias}` | `[C, C]`, `[C]` |
//! | `encoder.sap.context` | `[C, 1]` |
//! | `encoder.fc.{weight,bias}` | `[C, E]`, `[E]` |
//! | `projection.fc1.weight`, `projection.fc2.weight` | `[in, out]` |
//! | `projection.bn{1,2}.*`, `regularization.bn1.*` | `[features]` |
//! | `regularization.fc1.weight` | `[P, H]` |
//! | `regularization.fc2.{weight,bias}` | `[H, P]`, `[P]` |
//! | `loss.w`, `loss.b` | `[1]` |
//!
//! Linear weights are stored input-major (`y = x·W + b`).

mod encoder;
mod heads;
pub mod layers;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use encoder::{
    Encoder, EncoderConfig, EncoderVariant, SelfAttentivePooling, THIN_RESNET_DEPTHS,
    THIN_RESNET_WIDTHS, TINY_CHANNELS,
};
pub use heads::{HeadConfig, ProjectionHead, RegularizationHead};
pub use layers::{apply_bn_updates, Forward, Mode, ParamStore};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, NUM_MEL_BINS};
use crate::scalar::Scalar;
use crate::seed::SeedMix;

pub const LOSS_W: &str = "loss.w";
pub const LOSS_B: &str = "loss.b";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Running-statistics retention: `running ← m·running + (1 − m)·batch`.
    pub bn_momentum: f64,
    pub ap_init_w: f64,
    pub ap_init_b: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            bn_momentum: 0.95,
            ap_init_w: 10.0,
            ap_init_b: -5.0,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig::tiny(),
            head: HeadConfig::tiny(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.encoder.embedding_dim,
            self.head.projection_hidden_dim,
            self.head.projection_dim,
            self.head.regularization_hidden_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidArgument(format!(
                "bn_momentum must lie in [0, 1), got {}",
                self.bn_momentum
            )));
        }
        if !self.ap_init_w.is_finite() || !self.ap_init_b.is_finite() || self.ap_init_w <= 0.0 {
            return Err(Error::InvalidArgument("AP scale must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Graph nodes of one branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    pub z: Var,
    pub g: Var,
    pub p: Var,
}

#[derive(Debug, Clone)]
pub struct SiameseModel<T> {
    config: ModelConfig,
    encoder: Encoder,
    projection: ProjectionHead,
    regularization: RegularizationHead,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

impl<T: Scalar> SiameseModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = Self::skeleton(config);
        let mut rng = SeedMix::new(seed).str("model-init").rng();
        model.encoder.init(&mut model.params, &mut model.buffers, &mut rng);
        model.projection.init(&mut model.params, &mut model.buffers, &mut rng);
        model.regularization.init(&mut model.params, &mut model.buffers, &mut rng);
        model
            .params
            .insert(LOSS_W.into(), Tensor::full(&[1], T::of(model.config.ap_init_w)));
        model
            .params
            .insert(LOSS_B.into(), Tensor::full(&[1], T::of(model.config.ap_init_b)));
        Ok(model)
    }

    fn skeleton(config: ModelConfig) -> Self {
        SiameseModel {
            encoder: Encoder::new(&config.encoder),
            projection: ProjectionHead::new(config.encoder.embedding_dim, &config.head),
            regularization: RegularizationHead::new(&config.head),
            config,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against a fresh layout.
    pub fn from_tensors(config: ModelConfig, params: ParamStore<T>, buffers: ParamStore<T>) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        check_layout("parameter", &reference.params, &params)?;
        check_layout("buffer", &reference.buffers, &buffers)?;
        let mut model = Self::skeleton(config);
        model.params = params;
        model.buffers = buffers;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.encoder.embedding_dim
    }

    pub fn projection_dim(&self) -> usize {
        self.config.head.projection_dim
    }

    pub fn regularization_hidden_dim(&self) -> usize {
        self.regularization.hidden_dim()
    }

    pub fn min_frames(&self) -> usize {
        self.encoder.min_frames()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn num_encoder_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with("encoder."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Adds every parameter to `graph` once: trainable leaves in train mode,
    /// constants otherwise. Both branches of a pair share these nodes.
    pub fn bind(&self, graph: &mut Graph<T>, mode: Mode) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| {
                let v = match mode {
                    Mode::Train => graph.param(t.clone()),
                    Mode::Eval => graph.constant(t.clone()),
                };
                (k.clone(), v)
            })
            .collect()
    }

    /// Stacks equal-length feature matrices into a `[B,1,T,F]` constant.
    pub fn input(&self, graph: &mut Graph<T>, feats: &[&FeatureMatrix<T>]) -> Result<Var> {
        let first = feats
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let t = first.num_frames();
        for f in feats {
            if f.num_bins() != NUM_MEL_BINS {
                return Err(Error::Dimension {
                    expected: NUM_MEL_BINS,
                    got: f.num_bins(),
                });
            }
            if f.num_frames() != t {
                return Err(Error::InvalidArgument(format!(
                    "batch mixes {t}- and {}-frame inputs",
                    f.num_frames()
                )));
            }
        }
        if t < self.min_frames() {
            return Err(Error::TooFewFrames {
                have: t,
                need: self.min_frames(),
            });
        }
        let mut data = Vec::with_capacity(feats.len() * t * NUM_MEL_BINS);
        for f in feats {
            data.extend_from_slice(f.data());
        }
        Ok(graph.constant(Tensor::new(vec![feats.len(), 1, t, NUM_MEL_BINS], data)))
    }

    pub fn encode_var(&self, cx: &mut Forward<'_, T>, x: Var) -> Var {
        self.encoder.forward(cx, x)
    }

    pub fn project_var(&self, cx: &mut Forward<'_, T>, z: Var) -> Var {
        self.projection.forward(cx, z)
    }

    pub fn regularize_var(&self, cx: &mut Forward<'_, T>, g: Var) -> Var {
        self.regularization.forward(cx, g)
    }

    /// `x → z → g = T(z) → p = H(g)`.
    pub fn branch(&self, cx: &mut Forward<'_, T>, x: Var) -> BranchVars {
        let z = self.encode_var(cx, x);
        let g = self.project_var(cx, z);
        let p = self.regularize_var(cx, g);
        BranchVars { z, g, p }
    }

    /// Runs `f` on a fresh graph; running statistics are left untouched.
    fn run<R>(&self, mode: Mode, f: impl FnOnce(&mut Forward<'_, T>) -> Result<R>) -> Result<R> {
        let mut graph = Graph::new();
        let vars = self.bind(&mut graph, Mode::Eval);
        let mut cx = Forward::new(&mut graph, &vars, &self.buffers, mode);
        f(&mut cx)
    }

    /// Embeddings `[B,E]` for a batch of equal-length inputs.
    pub fn encode(&self, feats: &[&FeatureMatrix<T>], mode: Mode) -> Result<Tensor<T>> {
        self.run(mode, |cx| {
            let x = self.input(cx.graph, feats)?;
            let z = self.encode_var(cx, x);
            Ok(cx.graph.value(z).clone())
        })
    }

    /// Single-utterance embedding in eval mode.
    pub fn embed(&self, feat: &FeatureMatrix<T>) -> Result<Vec<T>> {
        Ok(self.encode(&[feat], Mode::Eval)?.into_data())
    }

    pub fn project(&self, z: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_width(z, self.embedding_dim())?;
        self.run(mode, |cx| {
            let zv = cx.graph.constant(z.clone());
            let g = self.project_var(cx, zv);
            Ok(cx.graph.value(g).clone())
        })
    }

    /// Returns `(hidden activation, p)` of the regularization MLP.
    pub fn regularize_with_hidden(&self, g: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        check_width(g, self.projection_dim())?;
        self.run(mode, |cx| {
            let gv = cx.graph.constant(g.clone());
            let (h, p) = self.regularization.forward_with_hidden(cx, gv);
            Ok((cx.graph.value(h).clone(), cx.graph.value(p).clone()))
        })
    }

    pub fn regularize(&self, g: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.regularize_with_hidden(g, mode)?.1)
    }
}

/// Identity forward, no gradient: downstream losses treat the result as a constant.
pub fn stop_gradient<T: Scalar>(graph: &mut Graph<T>, v: Var) -> Var {
    graph.detach(v)
}

fn check_width<T: Scalar>(x: &Tensor<T>, want: usize) -> Result<()> {
    let got = *x.shape().last().unwrap_or(&0);
    if x.shape().len() != 2 || got != want {
        return Err(Error::Dimension { expected: want, got });
    }
    Ok(())
}

fn check_layout<T: Scalar>(what: &str, want: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    for (k, t) in want {
        match got.get(k) {
            None => return Err(Error::Checkpoint(format!("missing {what} `{k}`"))),
            Some(g) if g.shape() != t.shape() => {
                return Err(Error::Checkpoint(format!(
                    "{what} `{k}` has shape {:?}, expected {:?}",
                    g.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(k) = got.keys().find(|k| !want.contains_key(*k)) {
        return Err(Error::Checkpoint(format!("unexpected {what} `{k}`")));
    }
    Ok(())
}
