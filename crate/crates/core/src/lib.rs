//! Heterogeneous-branch, multi-level classification network for person
//! re-identification, with the small tensor engine, training loop and
//! retrieval evaluation it needs.
//!
//! The numeric core is generic over [`Scalar`]; training and retrieval run in
//! `f32`, gradient checks in `f64`. Concrete aliases are provided below.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Activation, BnConfig, Graph, Mode, Reduction, RunningStats, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport, FeatureSet, SampleMeta};
pub use model::{joint_loss, BranchKind, HeadPlacement, Model, ModelConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{fit, AugmentConfig, EpochStat, Sgd, TrainConfig, TrainSet};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
