//! Next-token pretraining of the scorer on a plain text corpus.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Grads, ModelConfig, ModelState, TrainableMask};
use super::optim::{AdamW, LrSchedule};
use super::tokenizer::{TokenId, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of lines held out for measuring generalization.
    pub holdout_fraction: f64,
    /// Cap on held-out lines evaluated.
    pub max_eval_lines: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::default(),
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.0,
            seed: 0,
            holdout_fraction: 0.05,
            max_eval_lines: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    /// Mean training loss of each step.
    pub train_losses: Vec<f64>,
    /// Lines cut to fit the context window.
    pub truncated_lines: usize,
}

fn tokenize_lines(vocab: &Vocabulary, corpus: &[String], ctx_len: usize) -> (Vec<Vec<TokenId>>, usize) {
    let mut truncated = 0;
    let lines = corpus
        .iter()
        .map(|line| {
            let mut ids = vec![vocab.bos()];
            ids.extend(vocab.encode(line));
            ids.push(vocab.eos());
            if ids.len() > ctx_len {
                truncated += 1;
                ids.truncate(ctx_len);
            }
            ids
        })
        .collect();
    (lines, truncated)
}

/// Mean per-token negative log-likelihood over `lines`.
pub fn heldout_loss(model: &ModelState, lines: &[Vec<TokenId>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for line in lines {
        let logps = model.logprob_pass(line, 1, None, None)?;
        total -= logps.iter().sum::<f64>();
        count += logps.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Trains a fresh model on `corpus` with the character vocabulary `vocab`.
pub fn pretrain_lm(corpus: &[String], vocab: Vocabulary, config: &PretrainConfig) -> Result<(ModelState, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let mut model = ModelState::init(config.model.clone(), vocab, config.seed)?;
    model.trainable = TrainableMask::All;
    let (lines, truncated_lines) = tokenize_lines(&model.vocab, corpus, config.model.ctx_len);
    if truncated_lines > 0 {
        log::warn!("{truncated_lines} corpus lines truncated to the context length");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut order: Vec<usize> = (0..lines.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((lines.len() as f64 * config.holdout_fraction) as usize).min(lines.len().saturating_sub(1));
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let heldout: Vec<Vec<TokenId>> = hold_idx
        .iter()
        .take(config.max_eval_lines)
        .map(|&i| lines[i].clone())
        .collect();

    let initial_heldout_loss = heldout_loss(&model, &heldout)?;
    let schedule = LrSchedule {
        base: config.lr,
        warmup_steps: config.warmup_steps,
        decay_steps: Some(config.steps),
    };
    let mut opt = AdamW::new(0..model.params.len(), config.weight_decay);
    let mut train_losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch: Vec<&Vec<TokenId>> = (0..config.batch_size)
            .map(|_| &lines[train_idx[rng.gen_range(0..train_idx.len())]])
            .collect();
        let n_tokens: usize = batch.iter().map(|l| l.len().saturating_sub(1)).sum();
        if n_tokens == 0 {
            continue;
        }
        let coef = -1.0 / n_tokens as f64;
        let mut grads = Grads::zeros(&model);
        let mut loss = 0.0;
        for line in batch {
            let logps = model.logprob_pass(line, 1, None, Some((coef, &mut grads)))?;
            loss += coef * logps.iter().sum::<f64>();
        }
        if !loss.is_finite() || grads.data.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                message: format!("non-finite loss {loss}"),
            });
        }
        opt.step(&mut model.params, &grads.data, schedule.at(step));
        train_losses.push(loss);
        if step % 100 == 0 {
            log::debug!("pretrain step {step} loss {loss:.4}");
        }
    }

    let final_heldout_loss = heldout_loss(&model, &heldout)?;
    Ok((
        model,
        PretrainReport {
            initial_heldout_loss,
            final_heldout_loss,
            train_losses,
            truncated_lines,
        },
    ))
}
