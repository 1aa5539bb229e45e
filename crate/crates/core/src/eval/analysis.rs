//! Analyses over selections: ground-truth probability, order sensitivity,
//! useful-example ratios and oracle hit rates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_selection, predict, prompt_tokens, EvalReport, QueryRecord};
use crate::corpus::{compute_metric, DemonstrationPool, Example, TaskDataset};
use crate::error::{Error, Result};
use crate::lm::{sequence_logprob, ModelState};
use crate::runtime::hash::derive_seed;
use crate::selector::{order_top_k, OrderPolicy, SelectionConfig, Selector};

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Distribution {
            count: s.len(),
            mean: if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 },
            min: s.first().copied().unwrap_or(f64::NAN),
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthProb {
    pub selector_id: String,
    /// `log P(y | demos, x)` per query, in query order.
    pub values: Vec<f64>,
    pub summary: Distribution,
}

/// Log-probability of each query's ground truth under its selected prompt.
pub fn ground_truth_prob_report(
    selectors: &mut [&mut dyn Selector],
    queries: &TaskDataset,
    pool: &DemonstrationPool,
    model: &ModelState,
    config: &SelectionConfig,
) -> Result<Vec<GroundTruthProb>> {
    let mut out = Vec::with_capacity(selectors.len());
    for sel in selectors.iter_mut() {
        let mut values = Vec::with_capacity(queries.len());
        for q in &queries.examples {
            let s = sel.select(q, config)?;
            let demos = s.resolve(pool)?;
            let target = model.vocab.encode(&q.target);
            let (ctx, _) = prompt_tokens(model, &demos, q, queries, target.len())?;
            values.push(sequence_logprob(model, &ctx, &target)?.value);
        }
        out.push(GroundTruthProb {
            selector_id: sel.id().to_string(),
            summary: Distribution::of(&values),
            values,
        });
    }
    Ok(out)
}

/// Tab-separated `selector, count, mean, min, q1, median, q3, max`.
pub fn ground_truth_table(rows: &[GroundTruthProb]) -> String {
    let mut s = String::from("selector\tcount\tmean\tmin\tq1\tmedian\tq3\tmax\n");
    for r in rows {
        let d = &r.summary;
        s.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.selector_id, d.count, d.mean, d.min, d.q1, d.median, d.q3, d.max
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub policy: OrderPolicy,
    pub shuffle_seed: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderTable {
    pub k: usize,
    pub rows: Vec<OrderRow>,
    /// Max minus min score over rows.
    pub spread: f64,
    pub reports: Vec<EvalReport>,
}

/// Evaluates one ranking per query under each ordering policy. Shuffle runs
/// once per seed; the other policies ignore seeds.
pub fn order_sensitivity(
    selector: &mut dyn Selector,
    queries: &TaskDataset,
    pool: &DemonstrationPool,
    model: &ModelState,
    k: usize,
    policies: &[OrderPolicy],
    seeds: &[u64],
) -> Result<OrderTable> {
    let mut runs: Vec<SelectionConfig> = Vec::new();
    for &p in policies {
        if p == OrderPolicy::Shuffle {
            runs.extend(seeds.iter().map(|&s| SelectionConfig {
                k,
                order: p,
                shuffle_seed: s,
            }));
        } else {
            runs.push(SelectionConfig {
                k,
                order: p,
                shuffle_seed: 0,
            });
        }
    }
    let mut records: Vec<Vec<QueryRecord>> = vec![Vec::new(); runs.len()];
    for q in &queries.examples {
        let ranking = if k == 0 { None } else { Some(selector.rank(q, k)?) };
        let mut reference_set: Option<Vec<String>> = None;
        for (cfg, recs) in runs.iter().zip(records.iter_mut()) {
            let sel = match &ranking {
                Some(r) => order_top_k(&q.id, r, cfg)?,
                None => crate::selector::Selection::empty(&q.id),
            };
            let mut set = sel.demo_ids.clone();
            set.sort();
            match &reference_set {
                None => reference_set = Some(set),
                Some(r) if *r != set => {
                    return Err(Error::Selection(format!("query {}: selected sets differ across orders", q.id)))
                }
                _ => {}
            }
            recs.push(evaluate_selection(&sel, q, queries, pool, model)?);
        }
    }
    let mut rows = Vec::with_capacity(runs.len());
    let mut reports = Vec::with_capacity(runs.len());
    for (cfg, recs) in runs.iter().zip(records) {
        let score = super::evaluate::aggregate(queries.metric, &recs, queries);
        rows.push(OrderRow {
            policy: cfg.order,
            shuffle_seed: cfg.shuffle_seed,
            score,
        });
        reports.push(EvalReport {
            task_id: queries.task_id.clone(),
            selector_id: selector.id().to_string(),
            k,
            order: cfg.order,
            metric: queries.metric,
            score,
            records: recs,
            config_hash: crate::runtime::hash::hash_json(&(&queries.task_id, selector.id(), cfg)),
            seed: cfg.shuffle_seed,
        });
    }
    let max = rows.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    Ok(OrderTable {
        k,
        spread: if rows.is_empty() { 0.0 } else { max - min },
        rows,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardQuery {
    pub query_id: String,
    pub useful: usize,
    pub sampled: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsefulRatioReport {
    pub hard_queries: Vec<HardQuery>,
    pub histogram: Vec<HistogramBin>,
    /// No query was hard, so the histogram is empty.
    pub no_hard_queries: bool,
}

impl UsefulRatioReport {
    /// Tab-separated `lo, hi, count, percent`.
    pub fn histogram_table(&self) -> String {
        let mut s = String::from("lo\thi\tcount\tpercent\n");
        for b in &self.histogram {
            s.push_str(&format!("{:.4}\t{:.4}\t{}\t{:.6}\n", b.lo, b.hi, b.count, b.percent));
        }
        s
    }
}

/// Evenly spaced bin edges over `[0, 1]`.
pub fn uniform_bins(width: f64) -> Vec<f64> {
    let n = (1.0 / width).round() as usize;
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Bin index of `x` for `edges`; bins are `[lo, hi)` except the last, which includes 1.
fn bin_of(edges: &[f64], x: f64) -> usize {
    let nb = edges.len() - 1;
    (0..nb).find(|&i| x < edges[i + 1]).unwrap_or(nb - 1)
}

/// For each query that the `hard_selector`'s top-8 demonstrations leave
/// wrong, samples `sample_n` pool demonstrations and counts those that, used
/// alone, make the model answer correctly.
pub fn useful_ratio_analysis(
    queries: &TaskDataset,
    pool: &DemonstrationPool,
    model: &ModelState,
    hard_selector: &mut dyn Selector,
    sample_n: usize,
    bin_edges: &[f64],
    seed: u64,
) -> Result<UsefulRatioReport> {
    if bin_edges.len() < 2 || bin_edges[0] != 0.0 || *bin_edges.last().unwrap() != 1.0 {
        return Err(Error::Config("bin edges must run from 0 to 1".into()));
    }
    if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bin edges must increase".into()));
    }
    let top8 = SelectionConfig {
        k: 8.min(pool.len()),
        ..SelectionConfig::default()
    };
    let mut hard = Vec::new();
    for q in &queries.examples {
        let sel = hard_selector.select(q, &top8)?;
        let rec = evaluate_selection(&sel, q, queries, pool, model)?;
        if rec.metric_value >= 1.0 {
            continue;
        }
        let eligible: Vec<&Example> = pool.examples().iter().filter(|e| e.id != q.id).collect();
        let n = sample_n.min(eligible.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &q.id));
        let mut useful = 0;
        for i in sample(&mut rng, eligible.len(), n) {
            let (pred, _) = predict(model, &[eligible[i]], q, queries)?;
            if compute_metric(queries.metric, &pred, &q.target, q.options.as_deref())? >= 1.0 {
                useful += 1;
            }
        }
        hard.push(HardQuery {
            query_id: q.id.clone(),
            useful,
            sampled: n,
            ratio: if n == 0 { 0.0 } else { useful as f64 / n as f64 },
        });
    }
    if hard.is_empty() {
        return Ok(UsefulRatioReport {
            hard_queries: hard,
            histogram: Vec::new(),
            no_hard_queries: true,
        });
    }
    let mut counts = vec![0usize; bin_edges.len() - 1];
    for h in &hard {
        counts[bin_of(bin_edges, h.ratio)] += 1;
    }
    let total = hard.len() as f64;
    let histogram = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| HistogramBin {
            lo: bin_edges[i],
            hi: bin_edges[i + 1],
            count: c,
            percent: 100.0 * c as f64 / total,
        })
        .collect();
    Ok(UsefulRatioReport {
        hard_queries: hard,
        histogram,
        no_hard_queries: false,
    })
}

/// Fraction of queries whose first selected demonstration is oracle-useful.
pub fn top1_hit_rate(
    selector: &mut dyn Selector,
    queries: &TaskDataset,
    pool: &DemonstrationPool,
    useful: impl Fn(&Example, &Example) -> bool,
) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let cfg = SelectionConfig {
        k: 1,
        ..SelectionConfig::default()
    };
    let mut hits = 0;
    for q in &queries.examples {
        let sel = selector.select(q, &cfg)?;
        let demos = sel.resolve(pool)?;
        if demos.first().is_some_and(|d| useful(q, d)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}
