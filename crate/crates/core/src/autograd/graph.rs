use rayon::prelude::*;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, ConvGeom};
use super::Tensor;
use crate::scalar::{count, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; later nodes have larger indices.
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        out_c: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Reshape(Var),
    FramesFlatten(Var),
    MeanFreq(Var),
    SoftmaxRows(Var),
    WeightedFrameSum(Var, Var),
    L2NormRows(Var),
    Transpose(Var),
    ScalarAffine(Var, Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    RowDot(Var, Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// index order is a valid topological order for backpropagation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to every node. `None` means no
/// differentiable path exists, i.e. the gradient is exactly zero.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a dense vector, zero-filled when no path exists.
    pub fn dense(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: same value, no path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds a bias vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = *self.shape(x).last().expect("non-scalar");
        assert_eq!(self.shape(b), [n], "add_bias: bias shape");
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|r| r.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        self.push(t, Op::AddBias(x, b), &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        self.push(t, Op::Tanh(x), &[x])
    }

    /// `x: [B,C,H,W]`, `w: [O,C,KH,KW]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1], "conv2d: {sx:?} * {sw:?}");
        let geom = ConvGeom {
            in_c: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            k_h: sw[2],
            k_w: sw[3],
            stride,
            pad,
        };
        assert!(
            sx[2] + 2 * pad.0 >= sw[2] && sx[3] + 2 * pad.1 >= sw[3],
            "conv2d: kernel larger than padded input"
        );
        let (b, out_c) = (sx[0], sw[0]);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.in_c * geom.in_h * geom.in_w;
        let wd = self.data(w);
        let mut out = vec![T::zero(); b * out_c * cols];
        out.par_chunks_mut(out_c * cols)
            .zip(self.data(x).par_chunks(in_len))
            .for_each(|(o, xs)| {
                let mut buf = vec![T::zero(); rows * cols];
                geom.im2col(xs, &mut buf);
                gemm_nn(out_c, rows, cols, wd, &buf, o);
            });
        let t = Tensor::new(vec![b, out_c, geom.out_h(), geom.out_w()], out);
        self.push(t, Op::Conv2d { x, w, geom, out_c }, &[x, w])
    }

    /// Batch normalization over every axis except 1. In training mode the
    /// batch statistics are used and returned; otherwise `running` supplies
    /// `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> (Var, Option<BatchStats<T>>) {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2);
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let n = b * s;
        let xd = self.data(x);
        let eps = T::of(BN_EPS);
        let (mean, var_biased, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                assert!(n > 1, "batch norm in training mode needs more than one value per channel");
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for bi in 0..b {
                        acc += xd[(bi * c + ch) * s..][..s].iter().copied().sum::<T>();
                    }
                    let m = acc / count(n);
                    let mut sq = T::zero();
                    for bi in 0..b {
                        for &v in &xd[(bi * c + ch) * s..][..s] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / count(n);
                }
                let unbiased = var.iter().map(|&v| v * count(n) / count(n - 1)).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, be) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + be[ch];
                }
            }
        }
        let train = stats.is_some();
        let v = self.push(
            Tensor::new(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        (v, stats)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        self.push(t, Op::Reshape(x), &[x])
    }

    /// `[B,C,T,F] → [B,T,C·F]`
    pub fn frames_flatten(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let src = &xd[((bi * c + ci) * t + ti) * f..][..f];
                    out[(bi * t + ti) * c * f + ci * f..][..f].copy_from_slice(src);
                }
            }
        }
        self.push(Tensor::new(vec![b, t, c * f], out), Op::FramesFlatten(x), &[x])
    }

    /// `[B,C,T,F] → [B,T,C]`, averaging over the last axis.
    pub fn mean_freq(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        let xd = self.data(x);
        let inv = T::one() / count(f);
        let mut out = vec![T::zero(); b * t * c];
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let m = xd[((bi * c + ci) * t + ti) * f..][..f].iter().copied().sum::<T>() * inv;
                    out[(bi * t + ti) * c + ci] = m;
                }
            }
        }
        self.push(Tensor::new(vec![b, t, c], out), Op::MeanFreq(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().expect("non-scalar");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out);
        self.push(t, Op::SoftmaxRows(x), &[x])
    }

    /// `x: [B,T,C]`, `w: [B,T]` → `[B,C]` with `out[b] = Σ_t w[b,t]·x[b,t]`.
    pub fn weighted_frame_sum(&mut self, x: Var, w: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (b, t, c) = (s[0], s[1], s[2]);
        assert_eq!(self.shape(w), [b, t]);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for ti in 0..t {
                axpy(wd[bi * t + ti], &xd[(bi * t + ti) * c..][..c], o);
            }
        }
        self.push(Tensor::new(vec![b, c], out), Op::WeightedFrameSum(x, w), &[x, w])
    }

    /// Row-wise ℓ₂ normalization of a `[n,d]` matrix.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().expect("non-scalar");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let norm = dot(row, row).sqrt().max(T::of(NORM_EPS));
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out);
        self.push(t, Op::L2NormRows(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let (r, c) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out), Op::Transpose(x), &[x])
    }

    /// `w·x + b` with scalar `w`, `b` (shape `[1]`).
    pub fn scalar_affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (wv, bv) = (self.value(w).item(), self.value(b).item());
        let data = self.data(x).iter().map(|&v| wv * v + bv).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data);
        self.push(t, Op::ScalarAffine(x, w, b), &[x, w, b])
    }

    /// Mean softmax cross-entropy of `[n,k]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert!(s.len() == 2 && s[0] == labels.len());
        let k = s[1];
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (row, (&y, l)) in probs
            .chunks_mut(k)
            .zip(labels.iter().zip(self.data(logits).chunks(k)))
        {
            let m = l.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + l.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - l[y];
            softmax_in_place(row);
        }
        let loss = loss / count(labels.len());
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Row-wise dot products of two `[n,d]` matrices → `[n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let d = *self.shape(a).last().expect("non-scalar");
        let out: Vec<T> = self
            .data(a)
            .chunks(d)
            .zip(self.data(b).chunks(d))
            .map(|(x, y)| dot(x, y))
            .collect();
        let n = out.len();
        self.push(Tensor::new(vec![n], out), Op::RowDot(a, b), &[a, b])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.data(x).iter().copied().sum::<T>() / count(self.value(x).numel());
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |g| axpy(T::one(), gy, g));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |g| axpy(*c, gy, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |g| gemm_nt(m, n, k, gy, bd, g));
                self.accumulate(grads, *b, |g| gemm_tn(k, m, n, ad, gy, g));
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).numel();
                self.accumulate(grads, *x, |g| axpy(T::one(), gy, g));
                self.accumulate(grads, *b, |g| {
                    for row in gy.chunks(n) {
                        axpy(T::one(), row, g);
                    }
                });
            }
            Op::Relu(x) => self.accumulate(grads, *x, |g| {
                for ((gi, &o), &d) in g.iter_mut().zip(y).zip(gy) {
                    if o > T::zero() {
                        *gi += d;
                    }
                }
            }),
            Op::Tanh(x) => self.accumulate(grads, *x, |g| {
                for ((gi, &o), &d) in g.iter_mut().zip(y).zip(gy) {
                    *gi += d * (T::one() - o * o);
                }
            }),
            Op::Conv2d { x, w, geom, out_c } => {
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.in_c * geom.in_h * geom.in_w;
                let (xd, wd) = (self.data(*x), self.data(*w));
                let out_c = *out_c;
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = xd
                    .par_chunks(in_len)
                    .zip(gy.par_chunks(out_c * cols))
                    .map(|(xs, gs)| {
                        let dw = need_w.then(|| {
                            let mut buf = vec![T::zero(); rows * cols];
                            geom.im2col(xs, &mut buf);
                            let mut dw = vec![T::zero(); out_c * rows];
                            gemm_nt(out_c, cols, rows, gs, &buf, &mut dw);
                            dw
                        });
                        let dx = need_x.then(|| {
                            let mut dcols = vec![T::zero(); rows * cols];
                            gemm_tn(rows, out_c, cols, wd, gs, &mut dcols);
                            let mut dx = vec![T::zero(); in_len];
                            geom.col2im(&dcols, &mut dx);
                            dx
                        });
                        (dw, dx)
                    })
                    .collect();
                self.accumulate(grads, *w, |g| {
                    for (dw, _) in &per_sample {
                        axpy(T::one(), dw.as_ref().expect("computed"), g);
                    }
                });
                self.accumulate(grads, *x, |g| {
                    for (gs, (_, dx)) in g.chunks_mut(in_len).zip(&per_sample) {
                        axpy(T::one(), dx.as_ref().expect("computed"), gs);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = node.value.shape();
                let (b, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let n = count::<T>(b * s);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * s;
                        for i in off..off + s {
                            sum_dy[ch] += gy[i];
                            sum_dy_xhat[ch] += gy[i] * xhat[i];
                        }
                    }
                }
                let gd = self.data(*gamma);
                self.accumulate(grads, *x, |g| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * s;
                            let k = gd[ch] * inv_std[ch];
                            for i in off..off + s {
                                g[i] += if *train {
                                    k * (gy[i] - sum_dy[ch] / n - xhat[i] * sum_dy_xhat[ch] / n)
                                } else {
                                    k * gy[i]
                                };
                            }
                        }
                    }
                });
                self.accumulate(grads, *gamma, |g| axpy(T::one(), &sum_dy_xhat, g));
                self.accumulate(grads, *beta, |g| axpy(T::one(), &sum_dy, g));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |g| axpy(T::one(), gy, g)),
            Op::FramesFlatten(x) => {
                let s = self.shape(*x).to_vec();
                let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
                self.accumulate(grads, *x, |g| {
                    for bi in 0..b {
                        for ci in 0..c {
                            for ti in 0..t {
                                axpy(
                                    T::one(),
                                    &gy[(bi * t + ti) * c * f + ci * f..][..f],
                                    &mut g[((bi * c + ci) * t + ti) * f..][..f],
                                );
                            }
                        }
                    }
                });
            }
            Op::MeanFreq(x) => {
                let s = self.shape(*x).to_vec();
                let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
                let inv = T::one() / count(f);
                self.accumulate(grads, *x, |g| {
                    for bi in 0..b {
                        for ci in 0..c {
                            for ti in 0..t {
                                let d = gy[(bi * t + ti) * c + ci] * inv;
                                for v in &mut g[((bi * c + ci) * t + ti) * f..][..f] {
                                    *v += d;
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = *node.value.shape().last().expect("non-scalar");
                self.accumulate(grads, *x, |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let s = dot(yr, dr);
                        for ((gi, &yi), &di) in gr.iter_mut().zip(yr).zip(dr) {
                            *gi += yi * (di - s);
                        }
                    }
                });
            }
            Op::WeightedFrameSum(x, w) => {
                let s = self.shape(*x).to_vec();
                let (b, t, c) = (s[0], s[1], s[2]);
                let (xd, wd) = (self.data(*x), self.data(*w));
                self.accumulate(grads, *x, |g| {
                    for bi in 0..b {
                        for ti in 0..t {
                            axpy(wd[bi * t + ti], &gy[bi * c..][..c], &mut g[(bi * t + ti) * c..][..c]);
                        }
                    }
                });
                self.accumulate(grads, *w, |g| {
                    for bi in 0..b {
                        for ti in 0..t {
                            g[bi * t + ti] += dot(&gy[bi * c..][..c], &xd[(bi * t + ti) * c..][..c]);
                        }
                    }
                });
            }
            Op::L2NormRows(x) => {
                let d = *node.value.shape().last().expect("non-scalar");
                let xd = self.data(*x);
                self.accumulate(grads, *x, |g| {
                    for ((gr, (yr, xr)), dr) in g
                        .chunks_mut(d)
                        .zip(y.chunks(d).zip(xd.chunks(d)))
                        .zip(gy.chunks(d))
                    {
                        let norm = dot(xr, xr).sqrt().max(T::of(NORM_EPS));
                        let s = dot(yr, dr);
                        for ((gi, &yi), &di) in gr.iter_mut().zip(yr).zip(dr) {
                            *gi += (di - yi * s) / norm;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, *x, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j * r + i];
                        }
                    }
                });
            }
            Op::ScalarAffine(x, w, b) => {
                let wv = self.value(*w).item();
                let xd = self.data(*x);
                self.accumulate(grads, *x, |g| axpy(wv, gy, g));
                self.accumulate(grads, *w, |g| g[0] += dot(gy, xd));
                self.accumulate(grads, *b, |g| g[0] += gy.iter().copied().sum::<T>());
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = gy[0] / count(labels.len());
                self.accumulate(grads, *logits, |g| {
                    for (i, &yl) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == yl { T::one() } else { T::zero() };
                            g[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let d = *self.shape(*a).last().expect("non-scalar");
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |g| {
                    for ((gr, br), &di) in g.chunks_mut(d).zip(bd.chunks(d)).zip(gy) {
                        axpy(di, br, gr);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((gr, ar), &di) in g.chunks_mut(d).zip(ad.chunks(d)).zip(gy) {
                        axpy(di, ar, gr);
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let d = gy[0] / count(n);
                self.accumulate(grads, *x, |g| {
                    for v in g.iter_mut() {
                        *v += d;
                    }
                });
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
