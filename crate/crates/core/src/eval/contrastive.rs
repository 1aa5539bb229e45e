//! Contrastive retriever baseline.
//!
//! A linear map `W` over frozen pooled LM features is trained with the softmax
//! contrastive loss `-log(e^{s+} / (e^{s+} + Σ e^{s-}))`, where
//! `s = cos(W f_query, W f_demo) / τ`. Positives and negatives are the top and
//! bottom of each query's shortlist under the preference score.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{DemonstrationPool, TaskDataset};
use crate::error::{Error, Result};
use crate::lm::{AdamW, ModelState};
use crate::preference::PreferenceScorer;
use crate::shortlist::{dot, EmbeddingIndex, LmEmbedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub n_neg: usize,
    pub shortlist_n: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            n_neg: 3,
            shortlist_n: 64,
            epochs: 50,
            lr: 1e-2,
        }
    }
}

/// Pooled features of one query, its positive and its negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveExample {
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

fn matvec(w: &[f64], f: &[f64]) -> Vec<f64> {
    w.chunks_exact(f.len()).map(|row| dot(row, f)).collect()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Similarities `s_j` with the positive first.
fn similarities(w: &[f64], ex: &ContrastiveExample, tau: f64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let uq = matvec(w, &ex.query);
    let us: Vec<Vec<f64>> = std::iter::once(&ex.positive)
        .chain(&ex.negatives)
        .map(|f| matvec(w, f))
        .collect();
    let nq = norm(&uq);
    let s = us.iter().map(|u| dot(&uq, u) / (nq * norm(u)) / tau).collect();
    (s, us, uq)
}

fn log_softmax_first(s: &[f64]) -> (f64, Vec<f64>) {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
    let lse = m + z.ln();
    let p = s.iter().map(|x| (x - lse).exp()).collect();
    (s[0] - lse, p)
}

pub fn contrastive_loss(w: &[f64], ex: &ContrastiveExample, tau: f64) -> f64 {
    let (s, _, _) = similarities(w, ex, tau);
    -log_softmax_first(&s).0
}

/// Loss and `dL/dW` (row-major, `d × d`) for one example.
pub fn contrastive_loss_and_grad(w: &[f64], ex: &ContrastiveExample, tau: f64) -> (f64, Vec<f64>) {
    let d = ex.query.len();
    let (s, us, uq) = similarities(w, ex, tau);
    let (lp, p) = log_softmax_first(&s);
    let nq = norm(&uq);
    let mut g_uq = vec![0.0; d];
    let mut grad = vec![0.0; d * d];
    let feats: Vec<&Vec<f64>> = std::iter::once(&ex.positive).chain(&ex.negatives).collect();
    for (j, u) in us.iter().enumerate() {
        let dl_ds = p[j] - if j == 0 { 1.0 } else { 0.0 };
        let nu = norm(u);
        let cos = s[j] * tau;
        // d cos(a, b) / da = b / (|a||b|) - cos a / |a|²
        let c = dl_ds / tau;
        let mut g_u = vec![0.0; d];
        for i in 0..d {
            g_uq[i] += c * (u[i] / (nq * nu) - cos * uq[i] / (nq * nq));
            g_u[i] = c * (uq[i] / (nq * nu) - cos * u[i] / (nu * nu));
        }
        add_outer(&mut grad, &g_u, feats[j]);
    }
    add_outer(&mut grad, &g_uq, &ex.query);
    (-lp, grad)
}

fn add_outer(grad: &mut [f64], g: &[f64], f: &[f64]) {
    for (row, gi) in grad.chunks_exact_mut(f.len()).zip(g) {
        for (r, fk) in row.iter_mut().zip(f) {
            *r += gi * fk;
        }
    }
}

pub fn identity(d: usize) -> Vec<f64> {
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    w
}

/// Labels each query's shortlist by preference score. Queries without a
/// strictly worse candidate are skipped; returns the examples and the skip count.
pub fn build_contrastive_examples(
    dataset: &TaskDataset,
    pool: &DemonstrationPool,
    model: &Arc<ModelState>,
    config: &ContrastiveConfig,
) -> Result<(Vec<ContrastiveExample>, usize)> {
    let embedder = LmEmbedder::new(model.clone());
    let index = EmbeddingIndex::build(pool, &embedder)?;
    let mut scorer = PreferenceScorer::new(model, &dataset.template);
    let mut out = Vec::new();
    let mut skipped = 0;
    for q in &dataset.examples {
        let ranking = index.rank(&q.input, config.shortlist_n + 1, &embedder)?;
        let mut scored = Vec::new();
        for c in ranking.candidates.iter().filter(|c| c.example_id != q.id).take(config.shortlist_n) {
            let demo = pool
                .get(&c.example_id)
                .ok_or_else(|| Error::Validation(format!("unknown demonstration {}", c.example_id)))?;
            scored.push((scorer.score(q, demo)?.value, demo));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        let Some(&(top, positive)) = scored.first() else {
            skipped += 1;
            continue;
        };
        let negatives: Vec<_> = scored
            .iter()
            .rev()
            .take(config.n_neg)
            .filter(|(s, _)| *s < top)
            .map(|(_, d)| d)
            .collect();
        if negatives.is_empty() {
            log::warn!("query {}: no negative below the positive, skipped", q.id);
            skipped += 1;
            continue;
        }
        out.push(ContrastiveExample {
            query: embedder.features(&q.input)?,
            positive: embedder.features(&positive.input)?,
            negatives: negatives
                .iter()
                .map(|d| embedder.features(&d.input))
                .collect::<Result<_>>()?,
        });
    }
    Ok((out, skipped))
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutcome {
    pub embedder: LmEmbedder,
    /// Mean loss before training, then after each epoch.
    pub losses: Vec<f64>,
    pub skipped: usize,
}

fn mean_loss_and_grad(w: &[f64], examples: &[ContrastiveExample], tau: f64) -> (f64, Vec<f64>) {
    let n = examples.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    for ex in examples {
        let (l, g) = contrastive_loss_and_grad(w, ex, tau);
        loss += l / n;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b / n);
    }
    (loss, grad)
}

/// Full-batch AdamW on `W` from the identity; returns the projected embedder.
pub fn train_projection(examples: &[ContrastiveExample], d: usize, config: &ContrastiveConfig) -> (Vec<f64>, Vec<f64>) {
    let mut w = identity(d);
    let mut losses = Vec::with_capacity(config.epochs + 1);
    if examples.is_empty() {
        return (w, losses);
    }
    let mut opt = AdamW::new(0..d * d, 0.0);
    for _ in 0..config.epochs {
        let (loss, grad) = mean_loss_and_grad(&w, examples, config.tau);
        losses.push(loss);
        opt.step(&mut w, &grad, config.lr);
    }
    losses.push(mean_loss_and_grad(&w, examples, config.tau).0);
    (w, losses)
}

pub fn contrastive_baseline_train(
    dataset: &TaskDataset,
    pool: &DemonstrationPool,
    model: Arc<ModelState>,
    config: &ContrastiveConfig,
) -> Result<ContrastiveOutcome> {
    if config.tau <= 0.0 || config.n_neg == 0 {
        return Err(Error::Config("tau and n_neg must be positive".into()));
    }
    let (examples, skipped) = build_contrastive_examples(dataset, pool, &model, config)?;
    let d = model.d_model();
    let (w, losses) = train_projection(&examples, d, config);
    Ok(ContrastiveOutcome {
        embedder: LmEmbedder::with_projection(model, w)?,
        losses,
        skipped,
    })
}
