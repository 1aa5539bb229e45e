//! Preference data built from LM feedback.
//!
//! A demonstration's preference score for a query is the log-likelihood the
//! frozen scorer assigns to the query's ground-truth answer when that
//! demonstration alone is placed in front of the query. The best and worst
//! candidates of a shortlist become preferred / non-preferred pairs. Answer
//! pairs contrast the ground truth with a sampled wrong answer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_prompt, DemonstrationPool, Example, TaskDataset, TaskKind, TaskTemplate};
use crate::error::{Error, Result};
use crate::lm::{LogProb, ModelState, ScoredSequence};
use crate::runtime::cache::{cached, CacheKey, ScoreCache};
use crate::runtime::hash::derive_seed;

pub const DEFAULT_N_POS: usize = 2;
pub const DEFAULT_N_NEG: usize = 2;

/// Context: one demonstration then the query; target: the query's answer.
pub fn preference_sequence(
    model: &ModelState,
    query: &Example,
    demo: &Example,
    template: &TaskTemplate,
) -> Result<ScoredSequence> {
    let prompt = assemble_prompt(&[demo], query, template)?;
    Ok(ScoredSequence::new(&model.encode_prompt(&prompt), &model.vocab.encode(&query.target)))
}

/// `s_k = log P(y | (x_k, y_k), x)` under `model`.
pub fn preference_score(model: &ModelState, query: &Example, demo: &Example, template: &TaskTemplate) -> Result<LogProb> {
    model.score(&preference_sequence(model, query, demo, template)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query: Example,
    pub preferred: Example,
    pub non_preferred: Example,
    pub preferred_score: LogProb,
    pub non_preferred_score: LogProb,
}

impl PreferencePair {
    pub fn new(
        query: Example,
        preferred: Example,
        non_preferred: Example,
        preferred_score: LogProb,
        non_preferred_score: LogProb,
    ) -> Result<Self> {
        if !(preferred_score.value > non_preferred_score.value) {
            return Err(Error::Construction(format!(
                "pair for {}: preferred score {} is not above {}",
                query.id, preferred_score.value, non_preferred_score.value
            )));
        }
        if preferred.id == non_preferred.id {
            return Err(Error::Construction(format!(
                "pair for {}: preferred and non-preferred are both {}",
                query.id, preferred.id
            )));
        }
        Ok(PreferencePair {
            query,
            preferred,
            non_preferred,
            preferred_score,
            non_preferred_score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerPair {
    pub query: Example,
    pub y_w: String,
    pub y_l: String,
}

/// Scores demonstrations for preference construction, with optional caching.
pub struct PreferenceScorer<'a> {
    pub model: &'a ModelState,
    pub template: &'a TaskTemplate,
    /// Rank by mean per-token log-likelihood instead of the sum.
    pub per_token: bool,
    cache: Option<&'a mut ScoreCache>,
    model_hash: String,
}

impl<'a> PreferenceScorer<'a> {
    pub fn new(model: &'a ModelState, template: &'a TaskTemplate) -> Self {
        PreferenceScorer {
            model,
            template,
            per_token: false,
            cache: None,
            model_hash: String::new(),
        }
    }

    pub fn with_cache(mut self, cache: &'a mut ScoreCache) -> Self {
        self.model_hash = self.model.content_hash();
        self.cache = Some(cache);
        self
    }

    pub fn score(&mut self, query: &Example, demo: &Example) -> Result<LogProb> {
        let (model, template) = (self.model, self.template);
        let hash = &self.model_hash;
        cached(
            &mut self.cache,
            || CacheKey::new(hash, "pref", &query.id, &demo.id),
            || preference_score(model, query, demo, template),
        )
    }

    fn rank_value(&self, lp: &LogProb) -> f64 {
        if self.per_token {
            lp.per_token()
        } else {
            lp.value
        }
    }
}

/// Output of [`build_demo_pairs`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemoPairs {
    pub pairs: Vec<PreferencePair>,
    /// Every candidate scored the same: no preference information exists.
    pub no_signal: bool,
    /// Candidates whose prompt did not fit the context window.
    pub skipped: Vec<String>,
    /// All candidate scores, best first.
    pub scored: Vec<(String, LogProb)>,
}

/// Scores every shortlisted candidate and pairs the top `n_pos` with the bottom `n_neg`.
pub fn build_demo_pairs(
    query: &Example,
    shortlist: &[&Example],
    scorer: &mut PreferenceScorer<'_>,
    n_pos: usize,
    n_neg: usize,
) -> Result<DemoPairs> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation("n_pos and n_neg must be at least 1".into()));
    }
    if shortlist.len() < n_pos + n_neg {
        return Err(Error::Validation(format!(
            "shortlist of {} cannot supply {n_pos} preferred and {n_neg} non-preferred candidates",
            shortlist.len()
        )));
    }
    let mut out = DemoPairs::default();
    let mut scored: Vec<(&Example, LogProb)> = Vec::with_capacity(shortlist.len());
    for &demo in shortlist {
        if demo.id == query.id {
            continue;
        }
        match scorer.score(query, demo) {
            Ok(lp) => scored.push((demo, lp)),
            Err(Error::Window { .. }) => out.skipped.push(demo.id.clone()),
            Err(e) => return Err(e),
        }
    }
    if !out.skipped.is_empty() {
        log::warn!("query {}: {} candidates skipped for window overflow", query.id, out.skipped.len());
    }
    scored.sort_by(|a, b| {
        scorer
            .rank_value(&b.1)
            .total_cmp(&scorer.rank_value(&a.1))
            .then_with(|| a.0.id.cmp(&b.0.id))
    });
    out.scored = scored.iter().map(|(e, lp)| (e.id.clone(), *lp)).collect();
    if scored.len() < 2 {
        out.no_signal = true;
        return Ok(out);
    }
    let first = scorer.rank_value(&scored[0].1);
    if scored.iter().all(|(_, lp)| scorer.rank_value(lp) == first) {
        out.no_signal = true;
        return Ok(out);
    }
    let n_pos = n_pos.min(scored.len() / 2).max(1);
    let n_neg = n_neg.min(scored.len() - n_pos);
    let (pos, rest) = scored.split_at(n_pos);
    let neg = &rest[rest.len() - n_neg..];
    for (w, sw) in pos {
        for (l, sl) in neg {
            if scorer.rank_value(sw) > scorer.rank_value(sl) {
                out.pairs.push(PreferencePair::new(
                    query.clone(),
                    (*w).clone(),
                    (*l).clone(),
                    *sw,
                    *sl,
                )?);
            }
        }
    }
    Ok(out)
}

/// Ground truth versus one sampled wrong answer. The draw is a pure function
/// of `seed` and the query id.
pub fn build_answer_pair(query: &Example, dataset: &TaskDataset, seed: u64) -> Result<AnswerPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &query.id));
    let y_w = query.target.clone();
    let wrong: Vec<&str> = match dataset.kind {
        TaskKind::Classification | TaskKind::MultiChoice => {
            let options = query
                .options
                .as_ref()
                .ok_or_else(|| Error::Construction(format!("query {} has no options", query.id)))?;
            options.iter().map(String::as_str).filter(|o| *o != y_w).collect()
        }
        TaskKind::Generation => {
            // Uniform over other examples whose target differs, which is the
            // distribution of resampling until the texts differ.
            dataset
                .examples
                .iter()
                .filter(|e| e.id != query.id && e.target != y_w)
                .map(|e| e.target.as_str())
                .collect()
        }
    };
    let y_l = wrong
        .choose(&mut rng)
        .ok_or_else(|| Error::Construction(format!("no wrong answer available for query {}", query.id)))?
        .to_string();
    Ok(AnswerPair {
        query: query.clone(),
        y_w,
        y_l,
    })
}

/// One line of a preference dataset file. Examples are referenced by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PreferenceRecord {
    Demo {
        query: String,
        preferred: String,
        non_preferred: String,
        preferred_score: LogProb,
        non_preferred_score: LogProb,
    },
    Answer {
        query: String,
        y_w: String,
        y_l: String,
    },
}

pub fn write_preference_file(path: impl AsRef<Path>, pairs: &[PreferencePair], answers: &[AnswerPair]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(f);
    let records = pairs
        .iter()
        .map(|p| PreferenceRecord::Demo {
            query: p.query.id.clone(),
            preferred: p.preferred.id.clone(),
            non_preferred: p.non_preferred.id.clone(),
            preferred_score: p.preferred_score,
            non_preferred_score: p.non_preferred_score,
        })
        .chain(answers.iter().map(|a| PreferenceRecord::Answer {
            query: a.query.id.clone(),
            y_w: a.y_w.clone(),
            y_l: a.y_l.clone(),
        }));
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io_at(path, e))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))
}

/// Reads a preference file, resolving query ids in `queries` and demo ids in `pool`.
pub fn read_preference_file(
    path: impl AsRef<Path>,
    queries: &TaskDataset,
    pool: &DemonstrationPool,
) -> Result<(Vec<PreferencePair>, Vec<AnswerPair>)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut pairs = Vec::new();
    let mut answers = Vec::new();
    let lookup_q = |id: &str| {
        queries
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("unknown query id {id}")))
    };
    let lookup_d = |id: &str| {
        pool.get(id)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("unknown pool id {id}")))
    };
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io_at(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PreferenceRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            record: format!("line {}", n + 1),
            message: e.to_string(),
        })?;
        match rec {
            PreferenceRecord::Demo {
                query,
                preferred,
                non_preferred,
                preferred_score,
                non_preferred_score,
            } => pairs.push(PreferencePair::new(
                lookup_q(&query)?,
                lookup_d(&preferred)?,
                lookup_d(&non_preferred)?,
                preferred_score,
                non_preferred_score,
            )?),
            PreferenceRecord::Answer { query, y_w, y_l } => answers.push(AnswerPair {
                query: lookup_q(&query)?,
                y_w,
                y_l,
            }),
        }
    }
    Ok((pairs, answers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Metric;
    use crate::lm::{sequence_logprob, ModelConfig, Vocabulary};

    fn small_model(seed: u64) -> ModelState {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            ctx_len: 64,
            ..ModelConfig::default()
        };
        ModelState::init(cfg, Vocabulary::ascii(), seed).unwrap()
    }

    fn uniform_model() -> ModelState {
        let mut m = small_model(0);
        let r = m.param_specs().iter().find(|s| s.name == "tok_emb").unwrap().range();
        m.params_mut()[r].fill(0.0);
        m
    }

    fn template() -> TaskTemplate {
        TaskTemplate::new("{input}:", "{answer}", "\n")
    }

    fn demos(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example::new(format!("d{i:02}"), format!("K{}", (b'A' + i as u8) as char), "abc"))
            .collect()
    }

    #[test]
    fn uniform_model_scores_all_demos_equally() {
        let m = uniform_model();
        let q = Example::new("q", "KX", "xyz");
        let v = m.vocab.len() as f64;
        for d in demos(4) {
            let s = preference_score(&m, &q, &d, &template()).unwrap();
            assert!((s.value + 3.0 * v.ln()).abs() < 1e-12);
        }
        let pool = demos(4);
        let refs: Vec<&Example> = pool.iter().collect();
        let t = template();
        let mut scorer = PreferenceScorer::new(&m, &t);
        let out = build_demo_pairs(&q, &refs, &mut scorer, 1, 1).unwrap();
        assert!(out.no_signal);
        assert!(out.pairs.is_empty());
    }

    #[test]
    fn score_equals_direct_sequence_logprob() {
        let m = small_model(3);
        let q = Example::new("q", "KQ", "xyz");
        let d = Example::new("d", "KA", "abc");
        let ctx = m.encode_prompt("KA:abc\nKQ:");
        let direct = sequence_logprob(&m, &ctx, &m.vocab.encode("xyz")).unwrap();
        let via = preference_score(&m, &q, &d, &template()).unwrap();
        assert!((direct.value - via.value).abs() < 1e-12);
    }

    #[test]
    fn one_by_one_pair_is_argmax_argmin() {
        let m = small_model(5);
        let q = Example::new("q", "KQ", "xyz");
        let pool = demos(4);
        let t = template();
        let scores: Vec<f64> = pool.iter().map(|d| preference_score(&m, &q, d, &t).unwrap().value).collect();
        let argmax = (0..4).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        let argmin = (0..4).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        let refs: Vec<&Example> = pool.iter().collect();
        let mut scorer = PreferenceScorer::new(&m, &t);
        let out = build_demo_pairs(&q, &refs, &mut scorer, 1, 1).unwrap();
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].preferred.id, pool[argmax].id);
        assert_eq!(out.pairs[0].non_preferred.id, pool[argmin].id);
    }

    #[test]
    fn undersized_shortlist_is_rejected() {
        let m = small_model(5);
        let pool = demos(3);
        let refs: Vec<&Example> = pool.iter().collect();
        let t = template();
        let mut scorer = PreferenceScorer::new(&m, &t);
        let q = Example::new("q", "KQ", "xyz");
        assert!(build_demo_pairs(&q, &refs, &mut scorer, 2, 2).is_err());
    }

    #[test]
    fn cache_serves_identical_scores() {
        let m = small_model(5);
        let pool = demos(6);
        let refs: Vec<&Example> = pool.iter().collect();
        let t = template();
        let q = Example::new("q", "KQ", "xyz");
        let plain = build_demo_pairs(&q, &refs, &mut PreferenceScorer::new(&m, &t), 2, 2).unwrap();
        let mut cache = ScoreCache::in_memory();
        let first = build_demo_pairs(&q, &refs, &mut PreferenceScorer::new(&m, &t).with_cache(&mut cache), 2, 2).unwrap();
        assert_eq!(cache.len(), 6);
        let second = build_demo_pairs(&q, &refs, &mut PreferenceScorer::new(&m, &t).with_cache(&mut cache), 2, 2).unwrap();
        assert_eq!(plain, first);
        assert_eq!(first, second);
        assert_eq!(cache.hits(), 6);
    }

    fn binary_dataset() -> TaskDataset {
        let ex = |id: &str, t: &str| Example::new(id, "text", t).with_options(["Yes", "No"]);
        TaskDataset::new(
            "bin",
            TaskKind::Classification,
            vec![ex("a", "Yes"), ex("b", "No")],
            TaskTemplate::new("{input}", " {answer}", "\n"),
            Metric::Accuracy,
        )
        .unwrap()
    }

    #[test]
    fn binary_answer_pair_is_forced_complement() {
        let ds = binary_dataset();
        for seed in 0..10 {
            let p = build_answer_pair(&ds.examples[0], &ds, seed).unwrap();
            assert_eq!((p.y_w.as_str(), p.y_l.as_str()), ("Yes", "No"));
        }
    }

    #[test]
    fn identical_generation_targets_fail() {
        let ds = TaskDataset::new(
            "gen",
            TaskKind::Generation,
            vec![Example::new("a", "x", "same"), Example::new("b", "y", "same")],
            template(),
            Metric::ExactMatch,
        )
        .unwrap();
        assert!(matches!(
            build_answer_pair(&ds.examples[0], &ds, 0),
            Err(Error::Construction(_))
        ));
    }

    #[test]
    fn preference_file_round_trip() {
        let m = small_model(5);
        let pool_ex = demos(5);
        let pool = DemonstrationPool::new(pool_ex.clone()).unwrap();
        let q = Example::new("q", "KQ", "xyz");
        let other = Example::new("r", "KR", "uvw");
        let ds = TaskDataset::new("t", TaskKind::Generation, vec![q, other], template(), Metric::ExactMatch).unwrap();
        let q = &ds.examples[0];
        let t = template();
        let refs: Vec<&Example> = pool_ex.iter().collect();
        let pairs = build_demo_pairs(q, &refs, &mut PreferenceScorer::new(&m, &t), 2, 2).unwrap().pairs;
        let answers = vec![build_answer_pair(q, &ds, 1).unwrap()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        write_preference_file(&path, &pairs, &answers).unwrap();
        let (p2, a2) = read_preference_file(&path, &ds, &pool).unwrap();
        assert_eq!(p2, pairs);
        assert_eq!(a2, answers);
    }
}
