use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{BatchStats, Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Parameters or buffers by canonical name.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape, the bound parameter nodes, and the running
/// statistics produced by training-mode batch norms.
pub struct Forward<'a, T> {
    pub graph: &'a mut Graph<T>,
    vars: &'a BTreeMap<String, Var>,
    buffers: &'a ParamStore<T>,
    pub mode: Mode,
    pub bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(
        graph: &'a mut Graph<T>,
        vars: &'a BTreeMap<String, Var>,
        buffers: &'a ParamStore<T>,
        mode: Mode,
    ) -> Self {
        Forward {
            graph,
            vars,
            buffers,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    fn buffer(&self, name: &str) -> &[T] {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("buffer `{name}` missing"))
            .data()
    }
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect(),
    )
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamStore<T>, rng: &mut R) {
        params.insert(
            self.weight_name(),
            he_uniform(&[self.in_dim, self.out_dim], self.in_dim, rng),
        );
        if self.bias {
            params.insert(self.bias_name(), Tensor::zeros(&[self.out_dim]));
        }
    }

    /// `x: [n, in] → [n, out]`
    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Var {
        let w = cx.var(&self.weight_name());
        let y = cx.graph.matmul(x, w);
        if self.bias {
            let b = cx.var(&self.bias_name());
            cx.graph.add_bias(y, b)
        } else {
            y
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    pub fn square(name: impl Into<String>, in_c: usize, out_c: usize, k: usize, stride: (usize, usize)) -> Self {
        Conv2d {
            name: name.into(),
            in_c,
            out_c,
            kernel: (k, k),
            stride,
            pad: (k / 2, k / 2),
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut ParamStore<T>, rng: &mut R) {
        let fan_in = self.in_c * self.kernel.0 * self.kernel.1;
        params.insert(
            self.weight_name(),
            he_uniform(&[self.out_c, self.in_c, self.kernel.0, self.kernel.1], fan_in, rng),
        );
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Var {
        let w = cx.var(&self.weight_name());
        cx.graph.conv2d(x, w, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub features: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, features: usize) -> Self {
        BatchNorm {
            name: name.into(),
            features,
        }
    }

    pub fn running_mean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    pub fn running_var_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn init<T: Scalar>(&self, params: &mut ParamStore<T>, buffers: &mut ParamStore<T>) {
        params.insert(format!("{}.weight", self.name), Tensor::full(&[self.features], T::one()));
        params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.features]));
        buffers.insert(self.running_mean_name(), Tensor::zeros(&[self.features]));
        buffers.insert(self.running_var_name(), Tensor::full(&[self.features], T::one()));
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Var {
        let gamma = cx.var(&format!("{}.weight", self.name));
        let beta = cx.var(&format!("{}.bias", self.name));
        match cx.mode {
            Mode::Train => {
                let (y, stats) = cx.graph.batch_norm(x, gamma, beta, None);
                cx.bn_updates
                    .push((self.name.clone(), stats.expect("training mode yields stats")));
                y
            }
            Mode::Eval => {
                let mean = cx.buffer(&self.running_mean_name()).to_vec();
                let var = cx.buffer(&self.running_var_name()).to_vec();
                cx.graph.batch_norm(x, gamma, beta, Some((&mean, &var))).0
            }
        }
    }
}

/// Folds batch statistics into the running buffers:
/// `running ← momentum·running + (1 − momentum)·batch`.
pub fn apply_bn_updates<T: Scalar>(
    buffers: &mut ParamStore<T>,
    updates: &[(String, BatchStats<T>)],
    momentum: f64,
) {
    let m = T::of(momentum);
    let k = T::one() - m;
    for (name, stats) in updates {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let buf = buffers
                .get_mut(&format!("{name}.{suffix}"))
                .unwrap_or_else(|| panic!("buffer {name}.{suffix} missing"));
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = m * *r + k * b;
            }
        }
    }
}
