//! KTO-style preference training of the latent prompt.

mod config;
mod loss;
mod trainer;

pub use config::TrainConfig;
pub use loss::{
    answer_loss, baseline_from_ratios, demo_loss, estimate_ref_baseline, kto_objective, log_ratio, loss_and_grad,
    Baseline, Direction, KTOBatchStats, KtoBatch, KtoItem, LossInputs, Objective,
};
pub use trainer::{train, StepRecord, TrainOutcome, Trainer, TrainingLog};
