//! Training objectives, both as plain numeric functions over embeddings and
//! as tape builders for the optimizer.
//!
//! * affine cosine score `S(a, b) = w·cos(a, b) + b`
//! * AP loss: row-wise softmax cross-entropy of `S(z_{i,1}, z_{j,2})` with
//!   the diagonal as targets (segment 1 is the anchor)
//! * `D(p, g) = −p̂·ĝ`
//! * SSReg: `(1/M) Σ_i ½D(p_{i,1}, sg g_{i,2}) + ½D(p_{i,2}, sg g_{i,1})`
//! * combined: `ap + λ·ssreg`

use serde::{Deserialize, Serialize};

use crate::autograd::kernels::dot;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{count, Scalar};

/// Lower bound on the AP scale, enforced after every update.
pub const MIN_AP_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApLossParams<T> {
    pub w: T,
    pub b: T,
}

impl<T: Scalar> Default for ApLossParams<T> {
    fn default() -> Self {
        ApLossParams {
            w: T::of(10.0),
            b: T::of(-5.0),
        }
    }
}

impl<T: Scalar> ApLossParams<T> {
    pub fn clamped(self) -> Self {
        ApLossParams {
            w: self.w.max(T::of(MIN_AP_SCALE)),
            b: self.b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.08 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn unit<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = dot(v, v).sqrt();
    if !(n > T::zero()) {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot(&unit(a)?, &unit(b)?))
}

pub fn affine_cosine<T: Scalar>(zi: &[T], zj: &[T], params: ApLossParams<T>) -> Result<T> {
    Ok(params.w * cosine(zi, zj)? + params.b)
}

/// `anchors[i]` and `positives[i]` are the two segments of utterance `i`.
pub fn ap_loss<T: Scalar, V: AsRef<[T]>>(anchors: &[V], positives: &[V], params: ApLossParams<T>) -> Result<T> {
    let n = anchors.len();
    if n == 0 || positives.len() != n {
        return Err(Error::InvalidArgument(format!(
            "AP loss needs matching non-empty batches, got {n} and {}",
            positives.len()
        )));
    }
    let a: Vec<Vec<T>> = anchors.iter().map(|v| unit(v.as_ref())).collect::<Result<_>>()?;
    let p: Vec<Vec<T>> = positives.iter().map(|v| unit(v.as_ref())).collect::<Result<_>>()?;
    let mut total = T::zero();
    for (i, ai) in a.iter().enumerate() {
        let row: Vec<T> = p.iter().map(|pj| params.w * dot(ai, pj) + params.b).collect();
        let m = row.iter().fold(T::neg_infinity(), |x, &y| x.max(y));
        let lse = m + row.iter().map(|&s| (s - m).exp()).sum::<T>().ln();
        total += lse - row[i];
    }
    Ok(total / count(n))
}

pub fn neg_cos_sim<T: Scalar>(p: &[T], g: &[T]) -> Result<T> {
    Ok(-cosine(p, g)?)
}

/// Branch outputs of one pair: `p_{i,k}` and `g_{i,k}` for segments `k = 1, 2`.
pub struct PairOutputs<'a, T> {
    pub p1: &'a [T],
    pub g1: &'a [T],
    pub p2: &'a [T],
    pub g2: &'a [T],
}

pub fn ssreg_loss<T: Scalar>(pairs: &[PairOutputs<'_, T>]) -> Result<T> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("SSReg needs at least one pair".into()));
    }
    let half = T::of(0.5);
    let mut total = T::zero();
    for o in pairs {
        total += half * neg_cos_sim(o.p1, o.g2)? + half * neg_cos_sim(o.p2, o.g1)?;
    }
    Ok(total / count(pairs.len()))
}

pub fn combined_loss<T: Scalar>(ap: T, ssreg: T, weights: LossWeights) -> T {
    ap + T::of(weights.lambda) * ssreg
}

/// AP loss on the tape; `z1`, `z2` are `[N,E]` and `w`, `b` are `[1]`.
pub fn ap_loss_graph<T: Scalar>(graph: &mut Graph<T>, z1: Var, z2: Var, w: Var, b: Var) -> Var {
    let n = graph.value(z1).shape()[0];
    let a = graph.l2_normalize_rows(z1);
    let p = graph.l2_normalize_rows(z2);
    let pt = graph.transpose(p);
    let cos = graph.matmul(a, pt);
    let scores = graph.scalar_affine(cos, w, b);
    let labels: Vec<usize> = (0..n).collect();
    graph.cross_entropy(scores, &labels)
}

/// Mean of `D(p_i, g_i)` over rows.
pub fn neg_cos_graph<T: Scalar>(graph: &mut Graph<T>, p: Var, g: Var) -> Var {
    let pn = graph.l2_normalize_rows(p);
    let gn = graph.l2_normalize_rows(g);
    let d = graph.row_dot(pn, gn);
    let m = graph.mean(d);
    graph.scale(m, -T::one())
}

/// SSReg on the tape. With `stop_gradient` the `g` targets are detached;
/// without it they stay differentiable (used to contrast the two).
pub fn ssreg_graph_with<T: Scalar>(
    graph: &mut Graph<T>,
    p1: Var,
    g1: Var,
    p2: Var,
    g2: Var,
    stop_gradient: bool,
) -> Var {
    let (t1, t2) = if stop_gradient {
        (graph.detach(g1), graph.detach(g2))
    } else {
        (g1, g2)
    };
    let d1 = neg_cos_graph(graph, p1, t2);
    let d2 = neg_cos_graph(graph, p2, t1);
    let s = graph.add(d1, d2);
    graph.scale(s, T::of(0.5))
}

pub fn ssreg_graph<T: Scalar>(graph: &mut Graph<T>, p1: Var, g1: Var, p2: Var, g2: Var) -> Var {
    ssreg_graph_with(graph, p1, g1, p2, g2, true)
}

/// `ap + λ·ssreg`. With `λ = 0` the SSReg node is left off the objective so
/// the regularization MLP receives no gradient at all.
pub fn combined_graph<T: Scalar>(graph: &mut Graph<T>, ap: Var, ssreg: Var, weights: LossWeights) -> Var {
    if weights.lambda == 0.0 {
        return ap;
    }
    let r = graph.scale(ssreg, T::of(weights.lambda));
    graph.add(ap, r)
}
