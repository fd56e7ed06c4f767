//! Training: the gated block's training graph, sparsity and distillation
//! losses, and the SGD loop.

mod block;
pub mod loss;
mod trainer;

pub use block::{surrogate, surrogate_derivatives, CgTrainContext, CombineMode};
pub use loss::{apply_target_loss, flop_loss, kd_loss, target_loss, two_sided_half_width, FlopTerm};
pub use trainer::{
    evaluate, train_network, write_metrics_csv, EpochMetrics, Evaluation, KdConfig, LossConfig, Schedule,
    SparsityMode, TrainConfig,
};
