//! Objectives, optimizer, warmup and the epoch loop.

mod config;
mod loss;
mod optim;
mod trainer;
mod warmup;

pub use config::{KlOrder, Method, Reduction, TrainConfig};
pub use loss::{
    compute_at_loss, compute_joint_loss, compute_lwf_loss, compute_trades_loss, compute_twins_at_loss,
    compute_twins_trades_loss, LossGraph,
};
pub use optim::{sgd_update, OptState};
pub use trainer::{run_training, EpochRecord, TrainInputs};
pub use warmup::warmup_bn;
