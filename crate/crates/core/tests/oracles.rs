//! Library results against independent recomputations.

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::*;
use genicl::corpus::metrics::{accuracy, binary_f1};
use genicl::corpus::{assemble_prompt, compute_metric, DemonstrationPool, Example};
use genicl::kto::kto_objective;
use genicl::preference::{build_demo_pairs, PreferenceScorer};
use genicl::selector::{GenIclSelector, SelectionConfig, Selector};
use genicl::shortlist::{bm25_rank, Bm25Index, Bm25Params};

#[test]
fn metric_fixture_table() {
    for (metric, pred, reference, expected) in metric_fixture() {
        let got = compute_metric(metric, pred, reference, None).unwrap();
        assert_eq!(got, expected, "{metric} on {pred:?} vs {reference:?}");
    }
    assert_eq!(accuracy(&["pos", "neg", "pos", "neg"], &["pos", "pos", "pos", "neg"]), 0.75);
    // tp = 2, fp = 1, fn = 1
    let f1 = binary_f1(&["yes", "yes", "no", "no", "yes"], &["yes", "no", "yes", "no", "yes"], "yes");
    assert_eq!(f1, 2.0 / 3.0);
    // No positives anywhere: nothing to get wrong on the positive class.
    assert_eq!(binary_f1(&["no", "no"], &["no", "no"], "yes"), 1.0);
    assert_eq!(binary_f1(&["no"], &["yes"], "yes"), 0.0);
}

fn bm25_pool() -> DemonstrationPool {
    DemonstrationPool::new(
        BM25_DOCS
            .iter()
            .enumerate()
            .map(|(i, d)| Example::new(format!("d{i:02}"), *d, "-"))
            .collect(),
    )
    .unwrap()
}

#[test]
fn bm25_matches_okapi_oracle() {
    let pool = bm25_pool();
    let ids: Vec<String> = pool.examples().iter().map(|e| e.id.clone()).collect();
    let index = Bm25Index::new(&pool);
    for query in ["cat", "the cat on the mat", "brown fox", "market prices", "quick dog", "zebra", "fish fish"] {
        let oracle = okapi_scores(&BM25_DOCS, query, 1.5, 0.75);
        let expected = argsort_desc(&ids, &oracle);
        let ranking = bm25_rank(query, &pool, 20, 1.5, 0.75).unwrap();
        let got: Vec<String> = ranking.ids().map(str::to_string).collect();
        assert_eq!(got, expected, "query {query:?}");
        for (s, o) in index.scores(query, Bm25Params::default()).iter().zip(&oracle) {
            assert!((s - o).abs() <= 1e-12 * o.abs().max(1.0));
        }
    }
}

#[test]
fn bm25_hand_value() {
    // Two documents, query "a": df = 1, N = 2, idf = ln(1 + 1.5 / 1.5) = ln 2.
    // Doc "a b" has length 2, avgdl = 1.5, f = 1.
    let pool = DemonstrationPool::new(vec![Example::new("x", "a b", "-"), Example::new("y", "c", "-")]).unwrap();
    let s = Bm25Index::new(&pool).scores("a", Bm25Params::default());
    let norm = 1.0 - 0.75 + 0.75 * 2.0 / 1.5;
    let expected = 2f64.ln() * 2.5 / (1.0 + 1.5 * norm);
    assert!((s[0] - expected).abs() < 1e-15);
    assert_eq!(s[1], 0.0);
}

#[test]
fn kto_hand_value() {
    let o = kto_objective(&[2.0], &[-1.0], 0.0, 0.1, 1.0, 1.0);
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    assert!((o.loss - -(sigmoid(0.2) + sigmoid(0.1))).abs() < 1e-15);
    assert!((o.loss - -1.074813).abs() < 1e-6);
}

#[test]
fn preference_ranking_matches_stepwise_recomputation() {
    let model = tiny_model(3);
    let task = toy_task(51);
    let query = &task.examples[0];
    let candidates: Vec<&Example> = task.examples[1..].iter().collect();
    assert_eq!(candidates.len(), 50);
    let mut scorer = PreferenceScorer::new(&model, &task.template);
    let pairs = build_demo_pairs(query, &candidates, &mut scorer, 2, 2).unwrap();
    let ids: Vec<String> = candidates.iter().map(|c| c.id.clone()).collect();
    let oracle: Vec<f64> = candidates
        .iter()
        .map(|d| {
            let prompt = assemble_prompt(&[d], query, &task.template).unwrap();
            stepwise_logprob(&model, &model.encode_prompt(&prompt), &model.vocab.encode(&query.target))
        })
        .collect();
    let got: Vec<String> = pairs.scored.iter().map(|(id, _)| id.clone()).collect();
    assert_eq!(got, argsort_desc(&ids, &oracle));
    for (id, lp) in &pairs.scored {
        let o = oracle[ids.iter().position(|i| i == id).unwrap()];
        assert!((lp.value - o).abs() < 1e-9);
    }
}

#[test]
fn genicl_top_k_matches_exhaustive() {
    let (model, latent) = with_latent(tiny_model(5), 5);
    let task = toy_task(80);
    let pool = Arc::new(DemonstrationPool::from(&task));
    let mut sel = GenIclSelector::new(Arc::new(model.clone()), pool.clone(), task.template.clone(), 50).unwrap();
    for query in task.examples.iter().step_by(16) {
        let shortlist: Vec<String> = sel.shortlist(query).unwrap().ids().map(str::to_string).collect();
        assert_eq!(shortlist.len(), 50);
        let oracle: Vec<f64> = shortlist
            .iter()
            .map(|id| {
                let demo = pool.get(id).unwrap();
                let prompt = assemble_prompt(&[demo], query, &task.template).unwrap();
                stepwise_logprob(&model, &model.encode_prompt(&prompt), &latent.token_ids)
            })
            .collect();
        let best: BTreeSet<String> = argsort_desc(&shortlist, &oracle).into_iter().take(8).collect();
        let chosen = sel.select(query, &SelectionConfig::default()).unwrap();
        let chosen: BTreeSet<String> = chosen.demo_ids.into_iter().collect();
        assert_eq!(chosen, best, "query {}", query.id);
    }
}
