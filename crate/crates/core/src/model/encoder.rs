//! Representation networks: a tiny two-block CNN for desk-scale runs and a
//! thin ResNet-34, both followed by self-attentive pooling and a linear
//! embedding layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, Forward, Linear, ParamStore};
use crate::autograd::{Tensor, Var};
use crate::features::NUM_MEL_BINS;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    ThinResnet34,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            variant: EncoderVariant::ThinResnet34,
            embedding_dim: 512,
        }
    }
}

impl EncoderConfig {
    pub fn tiny() -> Self {
        EncoderConfig {
            variant: EncoderVariant::Tiny,
            embedding_dim: 128,
        }
    }
}

/// Single-head self-attentive pooling with a learned context vector:
/// `w = softmax_t(u · tanh(W x_t + b))`, `out = Σ_t w_t x_t`.
#[derive(Debug, Clone)]
pub struct SelfAttentivePooling {
    pub name: String,
    pub dim: usize,
    attention: Linear,
}

impl SelfAttentivePooling {
    pub fn new(name: &str, dim: usize) -> Self {
        SelfAttentivePooling {
            name: name.to_string(),
            dim,
            attention: Linear::new(format!("{name}.linear"), dim, dim, true),
        }
    }

    pub fn context_name(&self) -> String {
        format!("{}.context", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamStore<T>, rng: &mut R) {
        self.attention.init(params, rng);
        let bound = (6.0 / self.dim as f64).sqrt();
        let ctx = (0..self.dim).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        params.insert(self.context_name(), Tensor::new(vec![self.dim, 1], ctx));
    }

    /// Attention weights `[B,T]` for frames `[B,T,C]`.
    pub fn attention<T: Scalar>(&self, cx: &mut Forward<'_, T>, frames: Var) -> Var {
        let s = cx.graph.value(frames).shape().to_vec();
        let (b, t, c) = (s[0], s[1], s[2]);
        let flat = cx.graph.reshape(frames, &[b * t, c]);
        let h = self.attention.forward(cx, flat);
        let h = cx.graph.tanh(h);
        let ctx = cx.var(&self.context_name());
        let logits = cx.graph.matmul(h, ctx);
        let logits = cx.graph.reshape(logits, &[b, t]);
        cx.graph.softmax_rows(logits)
    }

    /// `[B,T,C] → [B,C]`
    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, frames: Var) -> Var {
        let w = self.attention(cx, frames);
        cx.graph.weighted_frame_sum(frames, w)
    }
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// conv-BN-ReLU ×2 with stride 2 on both axes, then flattened frames.
#[derive(Debug, Clone)]
pub struct TinyEncoder {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub sap: SelfAttentivePooling,
    pub fc: Linear,
}

pub const TINY_CHANNELS: (usize, usize) = (8, 16);

impl TinyEncoder {
    pub fn new(embedding_dim: usize) -> Self {
        let (c1, c2) = TINY_CHANNELS;
        let f = conv_out(conv_out(NUM_MEL_BINS, 3, 2, 1), 3, 2, 1);
        let frame_dim = c2 * f;
        TinyEncoder {
            conv1: Conv2d::square("encoder.conv1", 1, c1, 3, (2, 2)),
            bn1: BatchNorm::new("encoder.bn1", c1),
            conv2: Conv2d::square("encoder.conv2", c1, c2, 3, (2, 2)),
            bn2: BatchNorm::new("encoder.bn2", c2),
            sap: SelfAttentivePooling::new("encoder.sap", frame_dim),
            fc: Linear::new("encoder.fc", frame_dim, embedding_dim, true),
        }
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, p: &mut ParamStore<T>, b: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(p, rng);
        self.bn1.init(p, b);
        self.conv2.init(p, rng);
        self.bn2.init(p, b);
        self.sap.init(p, rng);
        self.fc.init(p, rng);
    }

    fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Var {
        let h = self.conv1.forward(cx, x);
        let h = self.bn1.forward(cx, h);
        let h = cx.graph.relu(h);
        let h = self.conv2.forward(cx, h);
        let h = self.bn2.forward(cx, h);
        let h = cx.graph.relu(h);
        let frames = cx.graph.frames_flatten(h);
        let pooled = self.sap.forward(cx, frames);
        self.fc.forward(cx, pooled)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(name: &str, in_c: usize, out_c: usize, stride: (usize, usize)) -> Self {
        let downsample = (in_c != out_c || stride != (1, 1)).then(|| {
            (
                Conv2d {
                    name: format!("{name}.downsample.conv"),
                    in_c,
                    out_c,
                    kernel: (1, 1),
                    stride,
                    pad: (0, 0),
                },
                BatchNorm::new(format!("{name}.downsample.bn"), out_c),
            )
        });
        BasicBlock {
            conv1: Conv2d::square(format!("{name}.conv1"), in_c, out_c, 3, stride),
            bn1: BatchNorm::new(format!("{name}.bn1"), out_c),
            conv2: Conv2d::square(format!("{name}.conv2"), out_c, out_c, 3, (1, 1)),
            bn2: BatchNorm::new(format!("{name}.bn2"), out_c),
            downsample,
        }
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, p: &mut ParamStore<T>, b: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(p, rng);
        self.bn1.init(p, b);
        self.conv2.init(p, rng);
        self.bn2.init(p, b);
        if let Some((c, n)) = &self.downsample {
            c.init(p, rng);
            n.init(p, b);
        }
    }

    fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Var {
        let h = self.conv1.forward(cx, x);
        let h = self.bn1.forward(cx, h);
        let h = cx.graph.relu(h);
        let h = self.conv2.forward(cx, h);
        let h = self.bn2.forward(cx, h);
        let shortcut = match &self.downsample {
            Some((c, n)) => {
                let s = c.forward(cx, x);
                n.forward(cx, s)
            }
            None => x,
        };
        let y = cx.graph.add(h, shortcut);
        cx.graph.relu(y)
    }
}

/// Thin ResNet-34: base widths 16/32/64/128, 3-4-6-3 basic blocks, frequency
/// axis averaged out before pooling over time.
#[derive(Debug, Clone)]
pub struct ThinResNet34 {
    conv1: Conv2d,
    bn1: BatchNorm,
    blocks: Vec<BasicBlock>,
    sap: SelfAttentivePooling,
    fc: Linear,
}

pub const THIN_RESNET_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const THIN_RESNET_DEPTHS: [usize; 4] = [3, 4, 6, 3];

impl ThinResNet34 {
    pub fn new(embedding_dim: usize) -> Self {
        let strides = [(1, 1), (2, 2), (2, 2), (1, 1)];
        let mut blocks = Vec::new();
        let mut in_c = THIN_RESNET_WIDTHS[0];
        for (l, ((&w, &d), &s)) in THIN_RESNET_WIDTHS
            .iter()
            .zip(&THIN_RESNET_DEPTHS)
            .zip(&strides)
            .enumerate()
        {
            for i in 0..d {
                let stride = if i == 0 { s } else { (1, 1) };
                blocks.push(BasicBlock::new(&format!("encoder.layer{}.{i}", l + 1), in_c, w, stride));
                in_c = w;
            }
        }
        ThinResNet34 {
            conv1: Conv2d {
                name: "encoder.conv1".into(),
                in_c: 1,
                out_c: THIN_RESNET_WIDTHS[0],
                kernel: (7, 7),
                stride: (1, 2),
                pad: (3, 3),
            },
            bn1: BatchNorm::new("encoder.bn1", THIN_RESNET_WIDTHS[0]),
            blocks,
            sap: SelfAttentivePooling::new("encoder.sap", in_c),
            fc: Linear::new("encoder.fc", in_c, embedding_dim, true),
        }
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, p: &mut ParamStore<T>, b: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(p, rng);
        self.bn1.init(p, b);
        for blk in &self.blocks {
            blk.init(p, b, rng);
        }
        self.sap.init(p, rng);
        self.fc.init(p, rng);
    }

    fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Var {
        let h = self.conv1.forward(cx, x);
        let h = self.bn1.forward(cx, h);
        let mut h = cx.graph.relu(h);
        for blk in &self.blocks {
            h = blk.forward(cx, h);
        }
        let frames = cx.graph.mean_freq(h);
        let pooled = self.sap.forward(cx, frames);
        self.fc.forward(cx, pooled)
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Tiny(TinyEncoder),
    ThinResNet34(ThinResNet34),
}

impl Encoder {
    pub fn new(config: &EncoderConfig) -> Self {
        match config.variant {
            EncoderVariant::Tiny => Encoder::Tiny(TinyEncoder::new(config.embedding_dim)),
            EncoderVariant::ThinResnet34 => {
                Encoder::ThinResNet34(ThinResNet34::new(config.embedding_dim))
            }
        }
    }

    /// Shortest input (in frames) the stack accepts.
    pub fn min_frames(&self) -> usize {
        8
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, p: &mut ParamStore<T>, b: &mut ParamStore<T>, rng: &mut R) {
        match self {
            Encoder::Tiny(e) => e.init(p, b, rng),
            Encoder::ThinResNet34(e) => e.init(p, b, rng),
        }
    }

    /// `[B,1,T,F] → [B,E]`
    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Var {
        match self {
            Encoder::Tiny(e) => e.forward(cx, x),
            Encoder::ThinResNet34(e) => e.forward(cx, x),
        }
    }
}
