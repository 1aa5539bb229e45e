//! Inference-time demonstration selection.
//!
//! GenICL shortlists the pool by embedding similarity, scores each candidate
//! by `log P(z | demo, query)` and keeps the top K. Baselines (zero-shot,
//! random, BM25, embedding) share the same output type. An order policy is
//! applied last; it permutes the selected set without changing it.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DemonstrationPool, Example, TaskTemplate};
use crate::error::{Error, Result};
use crate::lm::{logprob_latent_given, LatentPrompt, LogProb, ModelState};
use crate::runtime::cache::{cached, CacheKey, ScoreCache};
use crate::runtime::hash::derive_seed;
use crate::shortlist::{rank_scores, resolve, Bm25Index, Bm25Params, EmbeddingIndex, LmEmbedder, Ranking, TextEmbedder};

pub const DEFAULT_K: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    /// Highest score first.
    #[default]
    Descending,
    Ascending,
    /// Seeded permutation per query.
    Shuffle,
}

impl OrderPolicy {
    pub const ALL: [OrderPolicy; 3] = [OrderPolicy::Descending, OrderPolicy::Ascending, OrderPolicy::Shuffle];
}

impl FromStr for OrderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "descending" | "desc" => Ok(OrderPolicy::Descending),
            "ascending" | "asc" => Ok(OrderPolicy::Ascending),
            "shuffle" => Ok(OrderPolicy::Shuffle),
            other => Err(Error::Config(format!("unknown order policy {other:?}"))),
        }
    }
}

impl fmt::Display for OrderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderPolicy::Descending => "descending",
            OrderPolicy::Ascending => "ascending",
            OrderPolicy::Shuffle => "shuffle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub k: usize,
    pub order: OrderPolicy,
    pub shuffle_seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            k: DEFAULT_K,
            order: OrderPolicy::Descending,
            shuffle_seed: 0,
        }
    }
}

/// Demonstrations chosen for one query, in prompt order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub query_id: String,
    pub demo_ids: Vec<String>,
    /// Selector score of each demonstration, aligned with `demo_ids`.
    pub scores: Vec<f64>,
}

impl Selection {
    pub fn empty(query_id: &str) -> Self {
        Selection {
            query_id: query_id.to_string(),
            demo_ids: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn resolve<'a>(&self, pool: &'a DemonstrationPool) -> Result<Vec<&'a Example>> {
        self.demo_ids
            .iter()
            .map(|id| {
                pool.get(id)
                    .ok_or_else(|| Error::Selection(format!("selected id {id} is not in the pool")))
            })
            .collect()
    }
}

/// Takes the first `k` of `ranking` (best first) and orders them by `config`.
pub fn order_top_k(query_id: &str, ranking: &Ranking, config: &SelectionConfig) -> Result<Selection> {
    if config.k > ranking.len() {
        return Err(Error::Selection(format!(
            "K = {} exceeds the {} scored candidates for query {query_id}",
            config.k,
            ranking.len()
        )));
    }
    let mut top: Vec<(String, f64)> = ranking.candidates[..config.k]
        .iter()
        .map(|c| (c.example_id.clone(), c.score))
        .collect();
    match config.order {
        OrderPolicy::Descending => {}
        OrderPolicy::Ascending => top.reverse(),
        OrderPolicy::Shuffle => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.shuffle_seed, query_id));
            top.shuffle(&mut rng);
        }
    }
    let (demo_ids, scores) = top.into_iter().unzip();
    Ok(Selection {
        query_id: query_id.to_string(),
        demo_ids,
        scores,
    })
}

/// A demonstration selection strategy.
pub trait Selector {
    /// Short stable name used in reports.
    fn id(&self) -> &str;

    /// Candidates for `query`, best first. The query itself never appears.
    fn rank(&mut self, query: &Example, k: usize) -> Result<Ranking>;

    fn select(&mut self, query: &Example, config: &SelectionConfig) -> Result<Selection> {
        if config.k == 0 {
            return Ok(Selection::empty(&query.id));
        }
        let ranking = self.rank(query, config.k)?;
        order_top_k(&query.id, &ranking, config)
    }
}

fn without_query(mut ranking: Ranking, query: &Example, n: usize) -> Ranking {
    ranking.candidates.retain(|c| c.example_id != query.id);
    ranking.candidates.truncate(n);
    for (i, c) in ranking.candidates.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    ranking
}

pub struct ZeroShot;

impl Selector for ZeroShot {
    fn id(&self) -> &str {
        "zero_shot"
    }

    fn rank(&mut self, _query: &Example, _k: usize) -> Result<Ranking> {
        Ok(Ranking {
            candidates: Vec::new(),
            truncated: false,
        })
    }

    fn select(&mut self, query: &Example, _config: &SelectionConfig) -> Result<Selection> {
        Ok(Selection::empty(&query.id))
    }
}

/// Uniform sample without replacement; scores are the draw order reversed.
pub struct RandomSelector {
    pool: Arc<DemonstrationPool>,
    seed: u64,
}

impl RandomSelector {
    pub fn new(pool: Arc<DemonstrationPool>, seed: u64) -> Self {
        RandomSelector { pool, seed }
    }
}

impl Selector for RandomSelector {
    fn id(&self) -> &str {
        "random"
    }

    fn rank(&mut self, query: &Example, k: usize) -> Result<Ranking> {
        let eligible: Vec<&Example> = self.pool.examples().iter().filter(|e| e.id != query.id).collect();
        let n = k.min(eligible.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &query.id));
        let picks = sample(&mut rng, eligible.len(), n);
        let scored = picks
            .iter()
            .enumerate()
            .map(|(i, p)| (eligible[p].id.clone(), (n - i) as f64))
            .collect();
        Ok(rank_scores(scored, n))
    }
}

pub struct Bm25Selector {
    index: Bm25Index,
    params: Bm25Params,
}

impl Bm25Selector {
    pub fn new(pool: &DemonstrationPool, params: Bm25Params) -> Self {
        Bm25Selector {
            index: Bm25Index::new(pool),
            params,
        }
    }
}

impl Selector for Bm25Selector {
    fn id(&self) -> &str {
        "bm25"
    }

    fn rank(&mut self, query: &Example, k: usize) -> Result<Ranking> {
        Ok(without_query(self.index.rank(&query.input, k + 1, self.params), query, k))
    }
}

/// Cosine similarity under a text embedder.
pub struct EmbedSelector<E: TextEmbedder> {
    embedder: E,
    index: EmbeddingIndex,
    name: String,
}

impl<E: TextEmbedder> EmbedSelector<E> {
    pub fn new(pool: &DemonstrationPool, embedder: E) -> Result<Self> {
        Self::named(pool, embedder, "embed")
    }

    pub fn named(pool: &DemonstrationPool, embedder: E, name: &str) -> Result<Self> {
        let index = EmbeddingIndex::build(pool, &embedder)?;
        Ok(EmbedSelector {
            embedder,
            index,
            name: name.to_string(),
        })
    }
}

impl<E: TextEmbedder> Selector for EmbedSelector<E> {
    fn id(&self) -> &str {
        &self.name
    }

    fn rank(&mut self, query: &Example, k: usize) -> Result<Ranking> {
        Ok(without_query(self.index.rank(&query.input, k + 1, &self.embedder)?, query, k))
    }
}

/// Scores every shortlisted candidate by `log P(z | demo, query)`.
pub fn score_candidates(
    model: &ModelState,
    latent: &LatentPrompt,
    query: &Example,
    candidates: &[&Example],
    template: &TaskTemplate,
    mut cache: Option<&mut ScoreCache>,
    model_hash: &str,
) -> Result<Ranking> {
    let mut scored = Vec::with_capacity(candidates.len());
    for &demo in candidates {
        let lp: LogProb = cached(
            &mut cache,
            || CacheKey::new(model_hash, "latent", &query.id, &demo.id),
            || logprob_latent_given(model, latent, demo, query, template),
        )?;
        scored.push((demo.id.clone(), lp.value));
    }
    let n = scored.len();
    Ok(rank_scores(scored, n))
}

/// The trained-latent selector.
pub struct GenIclSelector<'a> {
    model: Arc<ModelState>,
    latent: LatentPrompt,
    pool: Arc<DemonstrationPool>,
    template: TaskTemplate,
    embedder: LmEmbedder,
    index: EmbeddingIndex,
    shortlist_n: usize,
    cache: Option<&'a mut ScoreCache>,
    model_hash: String,
}

impl<'a> GenIclSelector<'a> {
    /// `model` must carry the trained latent rows.
    pub fn new(
        model: Arc<ModelState>,
        pool: Arc<DemonstrationPool>,
        template: TaskTemplate,
        shortlist_n: usize,
    ) -> Result<Self> {
        let latent = LatentPrompt::from_model(&model)
            .ok_or_else(|| Error::Config("GenICL selection needs a model with a latent prompt".into()))?;
        let embedder = LmEmbedder::new(Arc::clone(&model));
        let index = EmbeddingIndex::build(&pool, &embedder)?;
        let model_hash = model.content_hash();
        Ok(GenIclSelector {
            model,
            latent,
            pool,
            template,
            embedder,
            index,
            shortlist_n,
            cache: None,
            model_hash,
        })
    }

    pub fn with_cache(mut self, cache: &'a mut ScoreCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Shortlist of `query` (query itself excluded).
    pub fn shortlist(&self, query: &Example) -> Result<Ranking> {
        Ok(without_query(
            self.index.rank(&query.input, self.shortlist_n + 1, &self.embedder)?,
            query,
            self.shortlist_n,
        ))
    }
}

impl<'a> Selector for GenIclSelector<'a> {
    fn id(&self) -> &str {
        "genicl"
    }

    fn rank(&mut self, query: &Example, k: usize) -> Result<Ranking> {
        let shortlist = self.shortlist(query)?;
        if k > shortlist.len() {
            return Err(Error::Selection(format!(
                "K = {k} exceeds the shortlist of {} for query {}",
                shortlist.len(),
                query.id
            )));
        }
        let candidates = resolve(&shortlist, &self.pool);
        score_candidates(
            &self.model,
            &self.latent,
            query,
            &candidates,
            &self.template,
            self.cache.as_deref_mut(),
            &self.model_hash,
        )
    }
}

/// One-shot form of [`GenIclSelector`].
#[allow(clippy::too_many_arguments)]
pub fn select_demonstrations(
    query: &Example,
    pool: &DemonstrationPool,
    model: &ModelState,
    latent: &LatentPrompt,
    shortlist_n: usize,
    config: &SelectionConfig,
    template: &TaskTemplate,
) -> Result<Vec<Example>> {
    if config.k == 0 {
        return Ok(Vec::new());
    }
    if shortlist_n < config.k {
        return Err(Error::Selection(format!("shortlist size {shortlist_n} is below K = {}", config.k)));
    }
    if model.latent_tokens != latent.token_ids {
        return Err(Error::Config("latent prompt is not installed in the model".into()));
    }
    let mut sel = GenIclSelector::new(Arc::new(model.clone()), Arc::new(pool.clone()), template.clone(), shortlist_n)?;
    let s = sel.select(query, config)?;
    Ok(s.resolve(pool)?.into_iter().cloned().collect())
}

/// Everything needed to replay an evaluation's demonstration choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub selector: String,
    pub k: usize,
    pub order: OrderPolicy,
    pub shuffle_seed: u64,
    pub selections: Vec<Selection>,
}

impl SelectionManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io_at(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Replays a manifest as a selector.
pub struct ReplaySelector {
    manifest: SelectionManifest,
}

impl ReplaySelector {
    pub fn new(manifest: SelectionManifest) -> Self {
        ReplaySelector { manifest }
    }
}

impl Selector for ReplaySelector {
    fn id(&self) -> &str {
        &self.manifest.selector
    }

    fn rank(&mut self, query: &Example, _k: usize) -> Result<Ranking> {
        Err(Error::Selection(format!("replay has no ranking for {}", query.id)))
    }

    fn select(&mut self, query: &Example, _config: &SelectionConfig) -> Result<Selection> {
        self.manifest
            .selections
            .iter()
            .find(|s| s.query_id == query.id)
            .cloned()
            .ok_or_else(|| Error::Selection(format!("manifest has no entry for query {}", query.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(n: usize) -> Ranking {
        rank_scores((0..n).map(|i| (format!("d{i:02}"), i as f64)).collect(), n)
    }

    #[test]
    fn orders_are_permutations_of_one_set() {
        let r = ranking(10);
        let mut cfg = SelectionConfig {
            k: 4,
            ..SelectionConfig::default()
        };
        let desc = order_top_k("q", &r, &cfg).unwrap();
        assert_eq!(desc.demo_ids, ["d09", "d08", "d07", "d06"]);
        cfg.order = OrderPolicy::Ascending;
        let asc = order_top_k("q", &r, &cfg).unwrap();
        let mut rev = desc.demo_ids.clone();
        rev.reverse();
        assert_eq!(asc.demo_ids, rev);
        cfg.order = OrderPolicy::Shuffle;
        let sh = order_top_k("q", &r, &cfg).unwrap();
        assert_eq!(sh, order_top_k("q", &r, &cfg).unwrap());
        let mut a = sh.demo_ids.clone();
        a.sort();
        let mut b = desc.demo_ids.clone();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn k_above_candidates_is_an_error() {
        let cfg = SelectionConfig {
            k: 5,
            ..SelectionConfig::default()
        };
        assert!(matches!(order_top_k("q", &ranking(3), &cfg), Err(Error::Selection(_))));
    }

    #[test]
    fn random_selector_is_seeded_and_excludes_query() {
        let pool: Vec<Example> = (0..20).map(|i| Example::new(format!("p{i}"), "x", "y")).collect();
        let pool = Arc::new(DemonstrationPool::new(pool).unwrap());
        let q = pool.examples()[3].clone();
        let cfg = SelectionConfig::default();
        let a = RandomSelector::new(Arc::clone(&pool), 7).select(&q, &cfg).unwrap();
        let b = RandomSelector::new(Arc::clone(&pool), 7).select(&q, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.demo_ids.len(), 8);
        assert!(!a.demo_ids.contains(&q.id));
        let mut ids = a.demo_ids.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn zero_shot_is_empty() {
        let q = Example::new("q", "x", "y");
        assert!(ZeroShot.select(&q, &SelectionConfig::default()).unwrap().demo_ids.is_empty());
    }
}
