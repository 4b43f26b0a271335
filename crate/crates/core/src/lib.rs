//! Self-supervised speaker embedding training: toy corpora, online
//! augmentation, log-mel features, a Siamese encoder with a stop-gradient
//! regularization branch, training, and verification metrics.

pub mod augment;
pub mod autograd;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Waveform32 = corpus::Waveform<f32>;
pub type Waveform64 = corpus::Waveform<f64>;
pub type FeatureMatrix32 = features::FeatureMatrix<f32>;
pub type FeatureMatrix64 = features::FeatureMatrix<f64>;
pub type Model32 = model::SiameseModel<f32>;
pub type Model64 = model::SiameseModel<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
