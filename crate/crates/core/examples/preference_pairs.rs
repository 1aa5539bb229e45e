//! Scores shortlisted demonstrations by how much they help the scorer produce
//! the query's answer, and builds the training pairs.
//!
//! `cargo run --release --example preference_pairs -- [scorer.ckpt]`

mod common;

use genicl::corpus::{DemonstrationPool, Example};
use genicl::eval::synth::{synth_task_generate, SyntheticTask, SyntheticTaskSpec};
use genicl::preference::{build_answer_pair, build_demo_pairs, PreferenceScorer};
use genicl::shortlist::{embed_rank, resolve, LmEmbedder};
use std::sync::Arc;

fn main() -> genicl::Result<()> {
    let model = common::scorer(600);
    let task = synth_task_generate(&SyntheticTaskSpec::default())?;
    let pool = DemonstrationPool::from(&task.pool);
    let embedder = LmEmbedder::new(Arc::new(model.clone()));
    let mut scorer = PreferenceScorer::new(&model, &task.pool.template);

    for q in &task.queries.examples[..3] {
        let ranking = embed_rank(&q.input, &pool, 16, &embedder)?;
        let shortlist: Vec<&Example> = resolve(&ranking, &pool);
        let pairs = build_demo_pairs(q, &shortlist, &mut scorer, 2, 2)?;
        println!("query {} {:?} -> {:?}", q.id, q.input, q.target);
        for (id, lp) in pairs.scored.iter().take(3) {
            let d = pool.get(id).unwrap();
            println!("  {id} {:?} logP {:.3} useful {}", d.input, lp.value, SyntheticTask::is_useful(q, d));
        }
        for p in &pairs.pairs {
            println!("  pair {} > {}", p.preferred.id, p.non_preferred.id);
        }
        let a = build_answer_pair(q, &task.queries, 0)?;
        println!("  answer pair {:?} over {:?}", a.y_w, a.y_l);
    }
    Ok(())
}
