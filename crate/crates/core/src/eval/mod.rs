//! Evaluation harness, analyses and synthetic tasks.

mod ablation;
mod analysis;
mod contrastive;
mod evaluate;
pub mod synth;

pub use ablation::{
    ablation_suite, initial_model, AblationInputs, AblationRow, AblationSummary, AblationTable, Variant,
};
pub use analysis::{
    ground_truth_prob_report, ground_truth_table, order_sensitivity, quantile, top1_hit_rate, uniform_bins,
    useful_ratio_analysis, Distribution, GroundTruthProb, HardQuery, HistogramBin, OrderRow, OrderTable,
    UsefulRatioReport,
};
pub use contrastive::{
    build_contrastive_examples, contrastive_baseline_train, contrastive_loss, contrastive_loss_and_grad, identity,
    train_projection, ContrastiveConfig, ContrastiveExample, ContrastiveOutcome,
};
pub use evaluate::{
    aggregate, evaluate_selection, evaluate_selector, generation_budget, predict, predict_generation, predict_option,
    prompt_tokens, replay, EvalReport, QueryRecord,
};
