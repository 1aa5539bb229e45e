use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preference::{DEFAULT_N_NEG, DEFAULT_N_POS};
use crate::shortlist::DEFAULT_SHORTLIST;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub lambda_w: f64,
    pub lambda_l: f64,
    /// Learning rate of the demonstration-level step.
    pub eta1: f64,
    /// Learning rate of the answer-level step.
    pub eta2: f64,
    /// Number of batches; each runs one demonstration-level and one answer-level update.
    pub steps: usize,
    /// Queries per batch.
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub shortlist_n: usize,
    /// Rank candidates by mean per-token log-likelihood.
    pub per_token: bool,
    pub demo_stage: bool,
    pub answer_stage: bool,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.1,
            lambda_w: 1.0,
            lambda_l: 1.0,
            eta1: 5e-6,
            eta2: 5e-6,
            steps: 20_000,
            batch_size: 32,
            warmup_steps: 3000,
            weight_decay: 0.0,
            seed: 0,
            n_pos: DEFAULT_N_POS,
            n_neg: DEFAULT_N_NEG,
            shortlist_n: DEFAULT_SHORTLIST,
            per_token: false,
            demo_stage: true,
            answer_stage: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the tiny scorer on a single CPU: few hundred steps,
    /// a learning rate sized for the latent embedding rows alone.
    pub fn desk() -> Self {
        TrainConfig {
            eta1: 2e-2,
            eta2: 2e-2,
            steps: 150,
            batch_size: 16,
            warmup_steps: 10,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.lambda_w >= 0.0 && self.lambda_l >= 0.0) {
            return bad("lambda_w and lambda_l must be non-negative");
        }
        if !(self.eta1 >= 0.0 && self.eta2 >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.n_pos == 0 || self.n_neg == 0 {
            return bad("n_pos and n_neg must be at least 1");
        }
        if self.shortlist_n < self.n_pos + self.n_neg {
            return bad("shortlist_n must be at least n_pos + n_neg");
        }
        Ok(())
    }
}
