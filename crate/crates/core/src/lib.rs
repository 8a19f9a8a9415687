//! Dual-statistics batch-norm adversarial fine-tuning on a small CNN.
//!
//! The crate is layered bottom-up: [`tensor`] and [`kernels`] hold dense
//! data, [`autodiff`] records differentiable graphs, [`network`] builds the
//! two-branch MiniCNN, [`attack`] generates l∞ PGD examples, [`training`]
//! implements the objectives and the epoch loop, [`analysis`] the
//! diagnostics, and [`workbench`] persistence and experiment orchestration.

pub mod analysis;
pub mod attack;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod finite_diff;
pub mod kernels;
pub mod network;
pub mod params;
pub mod tensor;
pub mod training;
pub mod workbench;

pub use attack::{pgd_attack, project_linf, AttackConfig, AttackLoss, Classifier, LinearClassifier};
pub use autodiff::{Tape, Var};
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use network::{BranchMode, Head, Model, ModelConfig};
pub use params::{GradientSet, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
pub use training::{EpochRecord, Method, TrainConfig};
