//! End-to-end in-context evaluation of a selector.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::metrics::{positive_label, BinaryCounts};
use crate::corpus::{assemble_prompt, compute_metric, DemonstrationPool, Example, Metric, TaskDataset, TaskKind};
use crate::error::{Error, Result};
use crate::lm::{greedy_generate, sequence_logprob, ModelState, TokenId};
use crate::runtime::hash::hash_json;
use crate::selector::{OrderPolicy, ReplaySelector, Selection, SelectionConfig, SelectionManifest, Selector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub prediction: String,
    pub reference: String,
    pub metric_value: f64,
    pub demo_ids: Vec<String>,
    /// Demonstrations dropped from the front of the prompt to fit the window.
    #[serde(default)]
    pub dropped_demos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub selector_id: String,
    pub k: usize,
    pub order: OrderPolicy,
    pub metric: Metric,
    /// Mean of the per-query values; for F1, the F1 of all predictions pooled.
    pub score: f64,
    pub records: Vec<QueryRecord>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io_at(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn mean_metric(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.records.iter().map(|r| r.metric_value).sum::<f64>() / self.records.len() as f64
        }
    }
}

/// Longest answer the generator may produce for `task`, in characters.
pub fn generation_budget(task: &TaskDataset) -> usize {
    task.examples.iter().map(|e| e.target.chars().count()).max().unwrap_or(0) + 4
}

/// Prompt tokens for `demos` and `query`, dropping leading demonstrations
/// until `reserve` more tokens fit in the window.
pub fn prompt_tokens(
    model: &ModelState,
    demos: &[&Example],
    query: &Example,
    task: &TaskDataset,
    reserve: usize,
) -> Result<(Vec<TokenId>, usize)> {
    let mut start = 0;
    loop {
        let ids = model.encode_prompt(&assemble_prompt(&demos[start..], query, &task.template)?);
        if ids.len() + reserve <= model.config.ctx_len {
            if start > 0 {
                log::warn!("query {}: dropped {start} demonstrations to fit the window", query.id);
            }
            return Ok((ids, start));
        }
        if start == demos.len() {
            return Err(Error::Window {
                context: ids.len(),
                target: reserve,
                limit: model.config.ctx_len,
            });
        }
        start += 1;
    }
}

fn option_reserve(model: &ModelState, query: &Example) -> usize {
    query
        .options
        .iter()
        .flatten()
        .map(|o| model.vocab.encode(o).len())
        .max()
        .unwrap_or(0)
}

/// Highest-scoring option by sequence log-probability; earlier options win ties.
pub fn predict_option(model: &ModelState, context: &[TokenId], options: &[String]) -> Result<String> {
    let mut best: Option<(f64, &String)> = None;
    for o in options {
        let lp = sequence_logprob(model, context, &model.vocab.encode(o))?.value;
        if best.is_none_or(|(b, _)| lp > b) {
            best = Some((lp, o));
        }
    }
    best.map(|(_, o)| o.clone())
        .ok_or_else(|| Error::Validation("no options to score".into()))
}

/// Greedy continuation cut at the first line break.
pub fn predict_generation(model: &ModelState, context: &[TokenId], budget: usize) -> Result<String> {
    let out = greedy_generate(model, context, budget)?;
    Ok(out.split('\n').next().unwrap_or("").trim().to_string())
}

/// The model's answer for `query` with `demos` in front of it.
pub fn predict(model: &ModelState, demos: &[&Example], query: &Example, task: &TaskDataset) -> Result<(String, usize)> {
    match task.kind {
        TaskKind::Classification | TaskKind::MultiChoice => {
            let options = query
                .options
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("query {} has no options", query.id)))?;
            let (ctx, dropped) = prompt_tokens(model, demos, query, task, option_reserve(model, query))?;
            Ok((predict_option(model, &ctx, options)?, dropped))
        }
        TaskKind::Generation => {
            let budget = generation_budget(task);
            let (ctx, dropped) = prompt_tokens(model, demos, query, task, budget.min(model.config.ctx_len / 2))?;
            Ok((predict_generation(model, &ctx, budget)?, dropped))
        }
    }
}

/// Aggregate score of `records` under `metric`.
pub fn aggregate(metric: Metric, records: &[QueryRecord], queries: &TaskDataset) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    match metric {
        Metric::F1 => {
            let mut counts = BinaryCounts::default();
            for r in records {
                let positive = queries
                    .get(&r.query_id)
                    .and_then(|q| q.options.as_deref())
                    .and_then(positive_label)
                    .unwrap_or("yes");
                counts.add(&r.prediction, &r.reference, positive);
            }
            counts.f1()
        }
        _ => records.iter().map(|r| r.metric_value).sum::<f64>() / records.len() as f64,
    }
}

/// Scores one query given its selection.
pub fn evaluate_selection(
    selection: &Selection,
    query: &Example,
    queries: &TaskDataset,
    pool: &DemonstrationPool,
    model: &ModelState,
) -> Result<QueryRecord> {
    let demos = selection.resolve(pool)?;
    let (prediction, dropped_demos) = predict(model, &demos, query, queries)?;
    let metric_value = compute_metric(queries.metric, &prediction, &query.target, query.options.as_deref())?;
    Ok(QueryRecord {
        query_id: query.id.clone(),
        prediction,
        reference: query.target.clone(),
        metric_value,
        demo_ids: selection.demo_ids.clone(),
        dropped_demos,
    })
}

/// Selects demonstrations for every query, predicts and scores. Returns the
/// report and the manifest that replays it.
pub fn evaluate_selector(
    selector: &mut dyn Selector,
    queries: &TaskDataset,
    pool: &DemonstrationPool,
    model: &ModelState,
    config: &SelectionConfig,
    seed: u64,
) -> Result<(EvalReport, SelectionManifest)> {
    if config.k > pool.len() {
        return Err(Error::Config(format!("K = {} exceeds the pool of {}", config.k, pool.len())));
    }
    let mut selections = Vec::with_capacity(queries.len());
    let mut records = Vec::with_capacity(queries.len());
    for q in &queries.examples {
        let sel = selector.select(q, config)?;
        if sel.demo_ids.len() != config.k {
            return Err(Error::Config(format!(
                "selector {} returned {} demonstrations for K = {}",
                selector.id(),
                sel.demo_ids.len(),
                config.k
            )));
        }
        records.push(evaluate_selection(&sel, q, queries, pool, model)?);
        selections.push(sel);
    }
    let manifest = SelectionManifest {
        selector: selector.id().to_string(),
        k: config.k,
        order: config.order,
        shuffle_seed: config.shuffle_seed,
        selections,
    };
    let report = EvalReport {
        task_id: queries.task_id.clone(),
        selector_id: selector.id().to_string(),
        k: config.k,
        order: config.order,
        metric: queries.metric,
        score: aggregate(queries.metric, &records, queries),
        config_hash: hash_json(&(&queries.task_id, selector.id(), config, model.content_hash(), seed)),
        records,
        seed,
    };
    Ok((report, manifest))
}

/// Re-runs an evaluation from its manifest.
pub fn replay(
    manifest: &SelectionManifest,
    queries: &TaskDataset,
    pool: &DemonstrationPool,
    model: &ModelState,
    seed: u64,
) -> Result<EvalReport> {
    let config = SelectionConfig {
        k: manifest.k,
        order: manifest.order,
        shuffle_seed: manifest.shuffle_seed,
    };
    let mut sel = ReplaySelector::new(manifest.clone());
    Ok(evaluate_selector(&mut sel, queries, pool, model, &config, seed)?.0)
}
