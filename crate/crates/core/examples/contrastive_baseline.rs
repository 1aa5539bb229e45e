//! Trains the contrastive retriever baseline: a linear projection of the
//! scorer's pooled features, with LM-scored positives and negatives.
//!
//! `cargo run --release --example contrastive_baseline -- [scorer.ckpt]`

mod common;

use std::sync::Arc;

use genicl::corpus::DemonstrationPool;
use genicl::eval::synth::{synth_task_generate, SyntheticTask, SyntheticTaskSpec};
use genicl::eval::{contrastive_baseline_train, top1_hit_rate, ContrastiveConfig};
use genicl::selector::EmbedSelector;
use genicl::shortlist::LmEmbedder;

fn main() -> genicl::Result<()> {
    let model = Arc::new(common::scorer(600));
    let task = synth_task_generate(&SyntheticTaskSpec {
        query_count: 60,
        test_count: 100,
        ..SyntheticTaskSpec::default()
    })?;
    let pool = DemonstrationPool::from(&task.pool);
    let cfg = ContrastiveConfig {
        shortlist_n: 16,
        ..ContrastiveConfig::default()
    };
    let out = contrastive_baseline_train(&task.queries, &pool, model.clone(), &cfg)?;
    println!(
        "loss {:.4} -> {:.4} over {} epochs ({} queries skipped)",
        out.losses[0],
        out.losses.last().unwrap(),
        cfg.epochs,
        out.skipped
    );
    let mut plain = EmbedSelector::new(&pool, LmEmbedder::new(model))?;
    let mut trained = EmbedSelector::named(&pool, out.embedder, "contrastive")?;
    println!("top-1 useful, untrained embedding {:.3}", top1_hit_rate(&mut plain, &task.test, &pool, SyntheticTask::is_useful)?);
    println!("top-1 useful, contrastive {:.3}", top1_hit_rate(&mut trained, &task.test, &pool, SyntheticTask::is_useful)?);
    Ok(())
}
