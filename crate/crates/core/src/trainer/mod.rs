//! A desk-scale teacher/student trainer on synthetic volumes.
//!
//! The network is a small per-voxel MLP whose gradients come from a
//! matrix-level reverse-mode [`tape`]. Everything runs in `f64` on one thread.

pub mod bundle;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod step;
pub mod tape;

pub use bundle::{load_model, save_model};
pub use config::TrainConfig;
pub use data::{generate_synthetic, generate_synthetic_with, Sample, SyntheticDataset};
pub use gradcheck::{grad_check, grad_check_fn, LossSelector};
pub use loss::{ce_loss, dice_loss, overlap_scores};
pub use model::{ema_update, ToyModel};
pub use pipeline::{
    evaluate, predict_labels, pretrain, pretrain_logged, self_train, self_train_logged,
    toy_dataset, EpochMetrics, Metrics, Stage, Term,
};
pub use step::StepPlan;
pub use tape::{Matrix, Tape, Var};
