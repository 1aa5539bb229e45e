//! Pretrains the tiny scorer on in-context key-match lines and checks that a
//! matching demonstration lets it copy the answer.
//!
//! `cargo run --release --example pretrain_scorer -- [steps] [out.ckpt]`

use genicl::corpus::assemble_prompt;
use genicl::eval::predict_generation;
use genicl::eval::synth::{synth_pretrain_corpus, synth_task_generate, PretrainCorpusSpec, SyntheticTask, SyntheticTaskSpec};
use genicl::lm::{pretrain_lm, save_checkpoint, PretrainConfig, Vocabulary};

fn main() -> genicl::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(600, |s| s.parse().expect("steps"));
    let out = args.next().unwrap_or_else(|| "scorer.ckpt".into());

    let corpus = synth_pretrain_corpus(&PretrainCorpusSpec::default());
    println!("corpus line: {:?}", corpus[0]);
    let cfg = PretrainConfig {
        steps,
        ..PretrainConfig::default()
    };
    let t = std::time::Instant::now();
    let (model, report) = pretrain_lm(&corpus, Vocabulary::ascii(), &cfg)?;
    println!(
        "{steps} steps in {:.1?}: held-out loss {:.3} -> {:.3}",
        t.elapsed(),
        report.initial_heldout_loss,
        report.final_heldout_loss
    );

    let task = synth_task_generate(&SyntheticTaskSpec::default())?;
    let tpl = &task.pool.template;
    let (mut with, mut without) = (0, 0);
    let queries = &task.test.examples[..50];
    for q in queries {
        let helpful = task.pool.examples.iter().find(|d| SyntheticTask::is_useful(q, d)).unwrap();
        let unhelpful = task.pool.examples.iter().find(|d| !SyntheticTask::is_useful(q, d)).unwrap();
        for (d, n) in [(helpful, &mut with), (unhelpful, &mut without)] {
            let prompt = assemble_prompt(&[d], q, tpl)?;
            if predict_generation(&model, &model.encode_prompt(&prompt), 7)? == q.target {
                *n += 1;
            }
        }
    }
    println!("copies the code with a matching demo {with}/50, with a mismatched one {without}/50");
    save_checkpoint(&out, &model)?;
    println!("saved {out}");
    Ok(())
}
