//! The three diagnostic analyses on a trained selector: ground-truth
//! probability, order sensitivity and the useful-demonstration ratio of hard
//! queries.
//!
//! `cargo run --release --example analyses -- [scorer.ckpt] [steps]`

mod common;

use std::sync::Arc;

use genicl::corpus::DemonstrationPool;
use genicl::eval::synth::{synth_task_generate, SyntheticTaskSpec};
use genicl::eval::{
    ground_truth_prob_report, ground_truth_table, initial_model, order_sensitivity, uniform_bins, useful_ratio_analysis,
};
use genicl::kto::{train, TrainConfig};
use genicl::lm::LatentPrompt;
use genicl::selector::{Bm25Selector, GenIclSelector, OrderPolicy, RandomSelector, SelectionConfig, Selector};
use genicl::shortlist::Bm25Params;

fn main() -> genicl::Result<()> {
    let pretrained = common::scorer(600);
    let steps = std::env::args().nth(2).map_or(40, |s| s.parse().expect("steps"));
    let task = synth_task_generate(&SyntheticTaskSpec {
        query_count: 100,
        test_count: 60,
        ..SyntheticTaskSpec::default()
    })?;
    let pool = Arc::new(DemonstrationPool::from(&task.pool));
    let start = initial_model(&pretrained, 0)?;
    let latent = LatentPrompt::from_model(&start).unwrap();
    let cfg = TrainConfig {
        steps,
        ..TrainConfig::desk()
    };
    let model = Arc::new(train(&task.queries, &pool, start, &latent, &cfg)?.model);
    let mut genicl = GenIclSelector::new(model.clone(), pool.clone(), task.pool.template.clone(), 64)?;
    let mut random = RandomSelector::new(pool.clone(), 0);
    let mut bm25 = Bm25Selector::new(&pool, Bm25Params::default());

    let k4 = SelectionConfig {
        k: 4,
        ..SelectionConfig::default()
    };
    let mut selectors: [&mut dyn Selector; 3] = [&mut genicl, &mut random, &mut bm25];
    let rows = ground_truth_prob_report(&mut selectors, &task.test, &pool, &model, &k4)?;
    print!("{}", ground_truth_table(&rows));

    let table = order_sensitivity(&mut genicl, &task.test, &pool, &model, 4, &OrderPolicy::ALL, &[0, 1])?;
    for r in &table.rows {
        println!("order {} (seed {}): {:.3}", r.policy, r.shuffle_seed, r.score);
    }
    println!("spread {:.3}", table.spread);

    let report = useful_ratio_analysis(&task.test, &pool, &model, &mut random, 50, &uniform_bins(0.1), 0)?;
    if report.no_hard_queries {
        println!("no query is hard for random top-8");
    } else {
        println!("{} hard queries", report.hard_queries.len());
        print!("{}", report.histogram_table());
    }
    Ok(())
}
