use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Forward, Linear, ParamStore};
use crate::autograd::Var;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub projection_hidden_dim: usize,
    pub projection_dim: usize,
    /// Bottleneck width of the regularization MLP.
    pub regularization_hidden_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            projection_hidden_dim: 512,
            projection_dim: 512,
            regularization_hidden_dim: 128,
        }
    }
}

impl HeadConfig {
    pub fn tiny() -> Self {
        HeadConfig {
            projection_hidden_dim: 128,
            projection_dim: 128,
            regularization_hidden_dim: 32,
        }
    }
}

/// FC → BN → ReLU → FC → BN.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, cfg: &HeadConfig) -> Self {
        ProjectionHead {
            fc1: Linear::new("projection.fc1", in_dim, cfg.projection_hidden_dim, false),
            bn1: BatchNorm::new("projection.bn1", cfg.projection_hidden_dim),
            fc2: Linear::new("projection.fc2", cfg.projection_hidden_dim, cfg.projection_dim, false),
            bn2: BatchNorm::new("projection.bn2", cfg.projection_dim),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, p: &mut ParamStore<T>, b: &mut ParamStore<T>, rng: &mut R) {
        self.fc1.init(p, rng);
        self.bn1.init(p, b);
        self.fc2.init(p, rng);
        self.bn2.init(p, b);
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, z: Var) -> Var {
        let h = self.fc1.forward(cx, z);
        let h = self.bn1.forward(cx, h);
        let h = cx.graph.relu(h);
        let h = self.fc2.forward(cx, h);
        self.bn2.forward(cx, h)
    }
}

/// Bottleneck FC → BN → ReLU → FC (with bias, no normalization on the output).
#[derive(Debug, Clone)]
pub struct RegularizationHead {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
}

impl RegularizationHead {
    pub fn new(cfg: &HeadConfig) -> Self {
        RegularizationHead {
            fc1: Linear::new("regularization.fc1", cfg.projection_dim, cfg.regularization_hidden_dim, false),
            bn1: BatchNorm::new("regularization.bn1", cfg.regularization_hidden_dim),
            fc2: Linear::new("regularization.fc2", cfg.regularization_hidden_dim, cfg.projection_dim, true),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fc1.out_dim
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, p: &mut ParamStore<T>, b: &mut ParamStore<T>, rng: &mut R) {
        self.fc1.init(p, rng);
        self.bn1.init(p, b);
        self.fc2.init(p, rng);
    }

    /// Returns `(hidden activation, output)`.
    pub fn forward_with_hidden<T: Scalar>(&self, cx: &mut Forward<'_, T>, g: Var) -> (Var, Var) {
        let h = self.fc1.forward(cx, g);
        let h = self.bn1.forward(cx, h);
        let h = cx.graph.relu(h);
        let p = self.fc2.forward(cx, h);
        (h, p)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, g: Var) -> Var {
        self.forward_with_hidden(cx, g).1
    }
}
