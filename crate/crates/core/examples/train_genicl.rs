//! End to end on the key-match task: train the latent prompt, select
//! demonstrations with it, and compare against random selection.
//!
//! `cargo run --release --example train_genicl -- [scorer.ckpt] [steps]`

mod common;

use std::sync::Arc;

use genicl::corpus::DemonstrationPool;
use genicl::eval::synth::{synth_task_generate, SyntheticTask, SyntheticTaskSpec};
use genicl::eval::{evaluate_selector, initial_model, top1_hit_rate};
use genicl::kto::{train, TrainConfig};
use genicl::lm::LatentPrompt;
use genicl::selector::{GenIclSelector, RandomSelector, SelectionConfig, Selector};

fn main() -> genicl::Result<()> {
    let pretrained = common::scorer(600);
    let steps = std::env::args().nth(2).map_or(60, |s| s.parse().expect("steps"));
    let task = synth_task_generate(&SyntheticTaskSpec::default())?;
    let pool = Arc::new(DemonstrationPool::from(&task.pool));

    let start = initial_model(&pretrained, 0)?;
    let latent = LatentPrompt::from_model(&start).unwrap();
    let cfg = TrainConfig {
        steps,
        ..TrainConfig::desk()
    };
    let t = std::time::Instant::now();
    let outcome = train(&task.queries, &pool, start, &latent, &cfg)?;
    let (d, a) = (outcome.log.demo_losses(), outcome.log.answer_losses());
    println!(
        "{steps} steps in {:.1?}; demo loss {:.4} -> {:.4}, answer loss {:.4} -> {:.4}",
        t.elapsed(),
        d.first().unwrap_or(&f64::NAN),
        d.last().unwrap_or(&f64::NAN),
        a.first().unwrap_or(&f64::NAN),
        a.last().unwrap_or(&f64::NAN)
    );

    let model = Arc::new(outcome.model);
    let mut genicl = GenIclSelector::new(model.clone(), pool.clone(), task.pool.template.clone(), cfg.shortlist_n)?;
    let mut random = RandomSelector::new(pool.clone(), 0);
    let sel = SelectionConfig {
        k: 2,
        ..SelectionConfig::default()
    };
    let selectors: [&mut dyn Selector; 2] = [&mut genicl, &mut random];
    for s in selectors {
        let hit = top1_hit_rate(s, &task.test, &pool, SyntheticTask::is_useful)?;
        let (report, _) = evaluate_selector(s, &task.test, &pool, &model, &sel, 0)?;
        println!("{:>7}: top-1 useful {:.3}, exact match with K=2 {:.3}", s.id(), hit, report.score);
    }
    Ok(())
}
