//! The latent prompt: `m` special tokens appended to the vocabulary whose
//! embedding rows are the only trainable parameters during preference training.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{ModelState, TrainableMask};
use super::tokenizer::TokenId;
use crate::error::{Error, Result};

pub const DEFAULT_LATENT_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentPrompt {
    pub token_ids: Vec<TokenId>,
    /// Parameter array that owns the latent rows.
    pub parameter_name: String,
}

impl LatentPrompt {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// The latent prompt recorded in a model (e.g. after loading a checkpoint).
    pub fn from_model(model: &ModelState) -> Option<Self> {
        (!model.latent_tokens.is_empty()).then(|| LatentPrompt {
            token_ids: model.latent_tokens.clone(),
            parameter_name: "tok_emb".into(),
        })
    }
}

/// Appends `m` latent tokens to the model and makes their embedding rows the
/// only trainable parameters.
///
/// Rows start at the mean embedding plus isotropic noise whose scale is the
/// standard deviation of the existing embedding entries around that mean.
pub fn init_latent(m: usize, model: &mut ModelState, seed: u64) -> Result<LatentPrompt> {
    if m == 0 {
        return Err(Error::Config("latent prompt length must be at least 1".into()));
    }
    if m > model.config.max_latent {
        return Err(Error::Config(format!(
            "latent prompt length {m} exceeds the configured maximum {}",
            model.config.max_latent
        )));
    }
    let d = model.d_model();
    let v = model.vocab.len();
    let mut mean = vec![0.0; d];
    for t in 0..v {
        for (acc, x) in mean.iter_mut().zip(model.embedding_row(t)) {
            *acc += x / v as f64;
        }
    }
    let mut var = 0.0;
    for t in 0..v {
        var += model
            .embedding_row(t)
            .iter()
            .zip(&mean)
            .map(|(x, mu)| (x - mu) * (x - mu))
            .sum::<f64>();
    }
    let scale = (var / (v * d) as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            mean.iter()
                .map(|mu| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + scale * z
                })
                .collect()
        })
        .collect();

    let first = model.latent_tokens.len();
    let ids: Vec<TokenId> = (0..m)
        .map(|k| model.vocab.push_special(format!("<z{}>", first + k)))
        .collect();
    model.grow_vocab(&rows);
    model.trainable = TrainableMask::EmbeddingRows(ids[0]..ids[m - 1] + 1);
    model.latent_tokens = ids.clone();
    Ok(LatentPrompt {
        token_ids: ids,
        parameter_name: "tok_emb".into(),
    })
}

/// A frozen copy of a model. It hands out only shared references.
#[derive(Debug, Clone)]
pub struct FrozenModel(Arc<ModelState>);

impl FrozenModel {
    /// Shared handle to the frozen parameters.
    pub fn shared(&self) -> Arc<ModelState> {
        Arc::clone(&self.0)
    }
}

impl std::ops::Deref for FrozenModel {
    type Target = ModelState;

    fn deref(&self) -> &ModelState {
        &self.0
    }
}

/// Deep copy of `model` that later training of `model` cannot change.
pub fn snapshot_reference(model: &ModelState) -> FrozenModel {
    FrozenModel(Arc::new(model.clone()))
}
