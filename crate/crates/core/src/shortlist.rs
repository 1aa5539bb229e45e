//! Pre-retrieval: cut the demonstration pool down to a per-query shortlist.
//!
//! Two rankers are provided, Okapi BM25 over whitespace tokens and cosine
//! similarity under a [`TextEmbedder`]. Both score `Example::input` and break
//! ties by ascending example id.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{DemonstrationPool, Example};
use crate::error::{Error, Result};
use crate::lm::ModelState;

/// Default shortlist size per query.
pub const DEFAULT_SHORTLIST: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub example_id: String,
    /// Higher is more relevant.
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// A ranked candidate list. `truncated` is set when fewer than the requested
/// number of candidates existed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub candidates: Vec<ScoredCandidate>,
    pub truncated: bool,
}

impl Ranking {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.example_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Descending score, ascending id on ties; keeps the first `n`.
pub fn rank_scores(scored: Vec<(String, f64)>, n: usize) -> Ranking {
    let total = scored.len();
    let mut scored = scored;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(n);
    Ranking {
        candidates: scored
            .into_iter()
            .enumerate()
            .map(|(i, (example_id, score))| ScoredCandidate {
                example_id,
                score,
                rank: i + 1,
            })
            .collect(),
        truncated: n > total,
    }
}

fn check_request(pool: &DemonstrationPool, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation("shortlist size must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::Validation("demonstration pool is empty".into()));
    }
    if n > pool.len() {
        log::warn!("requested {n} candidates from a pool of {}; returning the whole pool", pool.len());
    }
    Ok(())
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.5, b: 0.75 }
    }
}

/// Term statistics of a pool, built once and queried many times.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    doc_tf: Vec<HashMap<String, usize>>,
    doc_len: Vec<usize>,
    df: HashMap<String, usize>,
    avgdl: f64,
}

impl Bm25Index {
    pub fn new(pool: &DemonstrationPool) -> Self {
        let mut ids = Vec::with_capacity(pool.len());
        let mut doc_tf = Vec::with_capacity(pool.len());
        let mut doc_len = Vec::with_capacity(pool.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        for ex in pool.examples() {
            let mut tf: HashMap<String, usize> = HashMap::new();
            let mut len = 0;
            for t in tokenize(&ex.input) {
                *tf.entry(t).or_default() += 1;
                len += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            ids.push(ex.id.clone());
            doc_tf.push(tf);
            doc_len.push(len);
        }
        let avgdl = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<usize>() as f64 / doc_len.len() as f64
        };
        Bm25Index {
            ids,
            doc_tf,
            doc_len,
            df,
            avgdl,
        }
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = *self.df.get(term).unwrap_or(&0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Score of every document, in pool order. Repeated query terms count once.
    pub fn scores(&self, query: &str, params: Bm25Params) -> Vec<f64> {
        let mut terms: Vec<String> = tokenize(query).collect();
        terms.sort();
        terms.dedup();
        let idf: Vec<f64> = terms.iter().map(|t| self.idf(t)).collect();
        (0..self.ids.len())
            .map(|d| {
                let norm = if self.avgdl > 0.0 {
                    1.0 - params.b + params.b * self.doc_len[d] as f64 / self.avgdl
                } else {
                    1.0
                };
                terms
                    .iter()
                    .zip(&idf)
                    .map(|(t, w)| {
                        let f = *self.doc_tf[d].get(t).unwrap_or(&0) as f64;
                        w * f * (params.k1 + 1.0) / (f + params.k1 * norm)
                    })
                    .sum()
            })
            .collect()
    }

    pub fn rank(&self, query: &str, n: usize, params: Bm25Params) -> Ranking {
        let scored = self.ids.iter().cloned().zip(self.scores(query, params)).collect();
        rank_scores(scored, n)
    }
}

/// Top-`n` pool examples by Okapi BM25 against `query`.
pub fn bm25_rank(query: &str, pool: &DemonstrationPool, n: usize, k1: f64, b: f64) -> Result<Ranking> {
    check_request(pool, n)?;
    Ok(Bm25Index::new(pool).rank(query, n, Bm25Params { k1, b }))
}

/// Maps text to a fixed-dimension vector. Callers normalize.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Scales `v` to unit length; a zero vector is an error naming `text`.
pub fn normalize(mut v: Vec<f64>, text: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Scoring(format!("zero or non-finite embedding for text {text:?}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean-pooled final hidden states of the scorer, optionally followed by a
/// learned square projection (row-major `d × d`).
#[derive(Debug, Clone)]
pub struct LmEmbedder {
    model: Arc<ModelState>,
    projection: Option<Vec<f64>>,
}

impl LmEmbedder {
    pub fn new(model: Arc<ModelState>) -> Self {
        LmEmbedder { model, projection: None }
    }

    pub fn with_projection(model: Arc<ModelState>, projection: Vec<f64>) -> Result<Self> {
        let d = model.d_model();
        if projection.len() != d * d {
            return Err(Error::Config(format!(
                "projection has {} entries, expected {}",
                projection.len(),
                d * d
            )));
        }
        Ok(LmEmbedder {
            model,
            projection: Some(projection),
        })
    }

    pub fn projection(&self) -> Option<&[f64]> {
        self.projection.as_deref()
    }

    /// The un-projected, un-normalized pooled feature.
    pub fn features(&self, text: &str) -> Result<Vec<f64>> {
        let mut ids = self.model.encode_prompt(text);
        ids.truncate(self.model.config.ctx_len);
        let d = self.model.d_model();
        let hidden = self.model.hidden_states(&ids)?;
        let mut pooled = vec![0.0; d];
        for row in hidden.chunks_exact(d) {
            for (p, h) in pooled.iter_mut().zip(row) {
                *p += h;
            }
        }
        let n = ids.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        Ok(pooled)
    }
}

pub fn project(w: &[f64], f: &[f64]) -> Vec<f64> {
    let d = f.len();
    w.chunks_exact(d).map(|row| dot(row, f)).collect()
}

impl TextEmbedder for LmEmbedder {
    fn dim(&self) -> usize {
        self.model.d_model()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let f = self.features(text)?;
        match &self.projection {
            Some(w) => Ok(project(w, &f)),
            None => Ok(f),
        }
    }
}

/// Unit embeddings of every pool input, computed once.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn build(pool: &DemonstrationPool, embedder: &dyn TextEmbedder) -> Result<Self> {
        let mut ids = Vec::with_capacity(pool.len());
        let mut vectors = Vec::with_capacity(pool.len());
        for ex in pool.examples() {
            ids.push(ex.id.clone());
            vectors.push(normalize(embedder.embed(&ex.input)?, &ex.input)?);
        }
        Ok(EmbeddingIndex { ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    /// Cosine similarity of `query_vec` (unit length) to every pool entry.
    pub fn rank_vector(&self, query_vec: &[f64], n: usize) -> Ranking {
        let scored = self
            .ids
            .iter()
            .cloned()
            .zip(self.vectors.iter().map(|v| dot(v, query_vec)))
            .collect();
        rank_scores(scored, n)
    }

    pub fn rank(&self, query: &str, n: usize, embedder: &dyn TextEmbedder) -> Result<Ranking> {
        if n == 0 {
            return Err(Error::Validation("shortlist size must be at least 1".into()));
        }
        let q = normalize(embedder.embed(query)?, query)?;
        Ok(self.rank_vector(&q, n))
    }
}

/// Top-`n` pool examples by cosine similarity under `embedder`.
pub fn embed_rank(query: &str, pool: &DemonstrationPool, n: usize, embedder: &dyn TextEmbedder) -> Result<Ranking> {
    check_request(pool, n)?;
    EmbeddingIndex::build(pool, embedder)?.rank(query, n, embedder)
}

/// Resolves ranked ids back to pool examples.
pub fn resolve<'a>(ranking: &Ranking, pool: &'a DemonstrationPool) -> Vec<&'a Example> {
    ranking
        .ids()
        .map(|id| pool.get(id).expect("ranking ids come from the pool"))
        .collect()
}
