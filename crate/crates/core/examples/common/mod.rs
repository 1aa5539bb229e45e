//! Shared setup for the examples: a scorer model from a checkpoint or a short
//! pretraining run.

#![allow(dead_code)]

use genicl::eval::synth::{synth_pretrain_corpus, PretrainCorpusSpec};
use genicl::lm::{load_checkpoint, pretrain_lm, ModelState, PretrainConfig, Vocabulary};

/// Loads the checkpoint named by the first argument, or pretrains for
/// `steps` on the key-match corpus when none is given.
pub fn scorer(steps: usize) -> ModelState {
    if let Some(path) = std::env::args().nth(1) {
        let (model, _) = load_checkpoint(&path).expect("readable checkpoint");
        return model.without_latent();
    }
    println!("no checkpoint given; pretraining for {steps} steps");
    let corpus = synth_pretrain_corpus(&PretrainCorpusSpec::default());
    let cfg = PretrainConfig {
        steps,
        ..PretrainConfig::default()
    };
    let (model, report) = pretrain_lm(&corpus, Vocabulary::ascii(), &cfg).expect("pretraining");
    println!(
        "held-out loss {:.3} -> {:.3}",
        report.initial_heldout_loss, report.final_heldout_loss
    );
    model
}
