//! Desk-scale robust-training toolkit: reverse-mode autodiff, a small model
//! zoo with splittable forward passes, input-space and latent-space
//! adversarial attacks, backdoor data poisoning, held-out corruption
//! batteries, and Pareto-frontier evaluation.

mod bytes;

pub mod attack;
pub mod error;
pub mod eval;
pub mod heldout;
pub mod model;
pub mod ops;
pub mod optim;
pub mod perturb;
pub mod poison;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use bytes::fnv64;
pub use error::{Error, Result};
pub use scalar::Scalar;

/// f64 tensor (the default precision for experiments).
pub type Tensor64 = tensor::Tensor<f64>;
/// f32 tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// f64 model.
pub type Model64 = model::SplitModel<f64>;
/// f64 checkpoint.
pub type Checkpoint64 = model::Checkpoint<f64>;
/// f64 dataset.
pub type Dataset64 = poison::Dataset<f64>;
/// f64 perturbation budget.
pub type Budget64 = perturb::PerturbationBudget<f64>;
/// f64 attack configuration.
pub type AttackConfig64 = attack::AttackConfig<f64>;
/// f64 training configuration.
pub type TrainConfig64 = train::TrainConfig<f64>;
