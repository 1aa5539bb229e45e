//! Trains every loss variant from the same initialization and tabulates them.
//!
//! `cargo run --release --example ablation -- [scorer.ckpt] [steps]`

mod common;

use std::sync::Arc;

use genicl::corpus::DemonstrationPool;
use genicl::eval::synth::{synth_task_generate, SyntheticTask, SyntheticTaskSpec};
use genicl::eval::{ablation_suite, AblationInputs, Variant};
use genicl::kto::TrainConfig;
use genicl::selector::SelectionConfig;

fn main() -> genicl::Result<()> {
    let pretrained = common::scorer(600);
    let steps = std::env::args().nth(2).map_or(30, |s| s.parse().expect("steps"));
    let task = synth_task_generate(&SyntheticTaskSpec {
        query_count: 100,
        test_count: 100,
        ..SyntheticTaskSpec::default()
    })?;
    let pool = Arc::new(DemonstrationPool::from(&task.pool));
    let useful = SyntheticTask::is_useful;
    let inputs = AblationInputs {
        train: &task.queries,
        eval: &task.test,
        pool: &pool,
        pretrained: &pretrained,
        selection: SelectionConfig::default(),
        useful: Some(&useful),
    };
    let cfg = TrainConfig {
        steps,
        ..TrainConfig::desk()
    };
    let table = ablation_suite(&inputs, &Variant::ALL, &cfg, &[0])?;
    print!("{}", table.to_tsv());
    Ok(())
}
