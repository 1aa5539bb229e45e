#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use genicl::corpus::{Example, Metric, TaskDataset, TaskKind, TaskTemplate};
use genicl::eval::synth::{synth_pretrain_corpus, PretrainCorpusSpec};
use genicl::eval::{contrastive_loss, contrastive_loss_and_grad, identity, ContrastiveExample};
use genicl::kto::{loss_and_grad, Baseline, KtoBatch, LossInputs, TrainConfig};
use genicl::lm::{
    init_latent, load_checkpoint, pretrain_lm, save_checkpoint, sequence_logprob, LatentPrompt, ModelConfig, ModelState,
    PretrainConfig, TokenId, Vocabulary, DEFAULT_LATENT_LEN,
};
use genicl::preference::{build_answer_pair, build_demo_pairs, AnswerPair, PreferencePair, PreferenceScorer};
use genicl::runtime::hash::hash_json;
use genicl::shortlist::LmEmbedder;

/// Untrained 2-layer, 64-wide model over printable ASCII.
pub fn tiny_model(seed: u64) -> ModelState {
    ModelState::init(ModelConfig::default(), Vocabulary::ascii(), seed).unwrap()
}

pub fn with_latent(mut model: ModelState, seed: u64) -> (ModelState, LatentPrompt) {
    let latent = init_latent(DEFAULT_LATENT_LEN, &mut model, seed).unwrap();
    (model, latent)
}

pub fn pretrain_setup() -> (PretrainCorpusSpec, PretrainConfig) {
    (PretrainCorpusSpec::default(), PretrainConfig::default())
}

/// The key-match pretrained model, trained once and kept under the cargo
/// target's temporary directory between runs.
pub fn pretrained() -> ModelState {
    static CELL: OnceLock<Mutex<Option<ModelState>>> = OnceLock::new();
    let cell = CELL.get_or_init(|| Mutex::new(None));
    let mut guard = cell.lock().unwrap();
    if let Some(m) = guard.as_ref() {
        return m.clone();
    }
    let (corpus_spec, cfg) = pretrain_setup();
    let key = hash_json(&(&corpus_spec, &cfg));
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("genicl-pretrained-{}.ckpt", &key[..16]));
    let model = match load_checkpoint(&path) {
        Ok((m, _)) => m,
        Err(_) => {
            let corpus = synth_pretrain_corpus(&corpus_spec);
            let (m, report) = pretrain_lm(&corpus, Vocabulary::ascii(), &cfg).unwrap();
            eprintln!(
                "pretrained key-match model: held-out loss {:.3} -> {:.3}",
                report.initial_heldout_loss, report.final_heldout_loss
            );
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            save_checkpoint(&tmp, &m).unwrap();
            std::fs::rename(&tmp, &path).unwrap();
            m
        }
    };
    *guard = Some(model.clone());
    model
}

/// Small generation task with distinct inputs.
pub fn toy_task(n: usize) -> TaskDataset {
    let examples = (0..n)
        .map(|i| Example::new(format!("e{i:03}"), format!("w{} x{}", i % 7, i % 3), format!("a{}", i % 4)))
        .collect();
    TaskDataset::new(
        "toy",
        TaskKind::Generation,
        examples,
        TaskTemplate::new("Q: {input}\n", "A: {answer}", "\n\n"),
        Metric::ExactMatch,
    )
    .unwrap()
}

/// `log P(target | context)` as a sum of one-token forward passes, one per
/// target position, without teacher forcing.
pub fn stepwise_logprob(model: &ModelState, context: &[TokenId], target: &[TokenId]) -> f64 {
    let mut ctx = context.to_vec();
    let mut total = 0.0;
    for &t in target {
        total += sequence_logprob(model, &ctx, &[t]).unwrap().value;
        ctx.push(t);
    }
    total
}

/// Okapi BM25 written out term by term over whitespace-split, lowercased text.
pub fn okapi_scores(docs: &[&str], query: &str, k1: f64, b: f64) -> Vec<f64> {
    let docs: Vec<Vec<String>> = docs
        .iter()
        .map(|d| d.split_whitespace().map(|w| w.to_lowercase()).collect())
        .collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
    let mut terms: Vec<String> = query.split_whitespace().map(|w| w.to_lowercase()).collect();
    terms.sort();
    terms.dedup();
    docs.iter()
        .map(|d| {
            let mut s = 0.0;
            for t in &terms {
                let df = docs.iter().filter(|o| o.contains(t)).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                let f = d.iter().filter(|w| *w == t).count() as f64;
                s += idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * d.len() as f64 / avgdl));
            }
            s
        })
        .collect()
}

/// Ids sorted by descending score, ascending id on ties.
pub fn argsort_desc(ids: &[String], scores: &[f64]) -> Vec<String> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(ids[a].cmp(&ids[b])));
    idx.into_iter().map(|i| ids[i].clone()).collect()
}

/// Twenty short documents with repeated terms and varied lengths.
pub const BM25_DOCS: [&str; 20] = [
    "the cat sat on the mat",
    "a dog chased the cat",
    "cats and dogs living together",
    "the quick brown fox jumps over the lazy dog",
    "fox",
    "a cat a cat a cat",
    "market prices rose sharply today",
    "the stock market fell",
    "dog food prices",
    "brown bears eat fish",
    "the mat was red",
    "quick quick quick",
    "lazy afternoon on the porch",
    "cat",
    "the the the the",
    "a fox and a cat met a dog on the mat",
    "prices of cat food rose",
    "sharp knives cut fish",
    "red fox brown fox",
    "nothing in common here",
];

/// `(metric, prediction, reference, expected)` for single-pair metrics.
pub fn metric_fixture() -> Vec<(Metric, &'static str, &'static str, f64)> {
    vec![
        (Metric::ExactMatch, "Paris", "Paris", 1.0),
        (Metric::ExactMatch, "  Paris\n", "Paris", 1.0),
        (Metric::ExactMatch, "paris", "Paris", 0.0),
        (Metric::ExactMatch, "Paris France", "Paris", 0.0),
        (Metric::Accuracy, "Positive", "positive", 1.0),
        (Metric::Accuracy, "negative", "positive", 0.0),
        (Metric::RougeL, "a c", "a b c", 0.8),
        (Metric::RougeL, "a b c", "a b c", 1.0),
        (Metric::RougeL, "x y", "a b", 0.0),
        (Metric::RougeL, "a b c d", "a c d e", 0.75),
        (Metric::RougeL, "the cat", "the cat sat on the mat", 0.5),
        (Metric::RougeL, "b a", "a b", 0.5),
    ]
}

/// A latent-prompt model, its reference snapshot, and demo and answer pairs
/// built on the toy task. With `drift`, the policy's latent rows are moved
/// away from the reference.
pub struct KtoFixture {
    pub model: ModelState,
    pub reference: ModelState,
    pub latent: LatentPrompt,
    pub task: TaskDataset,
    pub demo_pairs: Vec<PreferencePair>,
    pub answer_pairs: Vec<AnswerPair>,
}

pub fn kto_fixture(seed: u64, drift: f64) -> KtoFixture {
    let (mut model, latent) = with_latent(tiny_model(seed), seed);
    let reference = model.clone();
    let task = toy_task(24);
    let mut demo_pairs = Vec::new();
    let mut answer_pairs = Vec::new();
    for q in task.examples.iter().take(3) {
        let shortlist: Vec<&Example> = task.examples.iter().filter(|e| e.id != q.id).take(8).collect();
        let mut scorer = PreferenceScorer::new(&reference, &task.template);
        demo_pairs.extend(build_demo_pairs(q, &shortlist, &mut scorer, 1, 1).unwrap().pairs);
        answer_pairs.push(build_answer_pair(q, &task, seed).unwrap());
    }
    if drift != 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1f7);
        let range = model.trainable_range();
        for p in &mut model.params_mut()[range] {
            *p += drift * rng.gen_range(-1.0..1.0);
        }
    }
    KtoFixture {
        model,
        reference,
        latent,
        task,
        demo_pairs,
        answer_pairs,
    }
}

impl KtoFixture {
    pub fn inputs(&self) -> LossInputs<'_> {
        LossInputs {
            model: &self.model,
            reference: &self.reference,
            latent: &self.latent,
            template: &self.task.template,
        }
    }
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between the analytic gradient of the demo
/// (`answer == false`) or answer loss and central differences, over `n`
/// random trainable coordinates.
pub fn kto_fd_max_rel_err(answer: bool, n: usize, seed: u64) -> (f64, usize) {
    let mut fx = kto_fixture(seed, 0.05);
    let config = TrainConfig::default();
    let baseline = Baseline::Fixed(0.02);
    let loss = |fx: &KtoFixture| {
        let batch = if answer {
            KtoBatch::Answer(&fx.answer_pairs)
        } else {
            KtoBatch::Demo(&fx.demo_pairs)
        };
        loss_and_grad(batch, fx.inputs(), &config, baseline).unwrap()
    };
    let (_, grads) = loss(&fx);
    let range = fx.model.trainable_range();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = rand::seq::index::sample(&mut rng, range.len(), n.min(range.len()));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for c in coords.iter() {
        let i = range.start + c;
        let orig = fx.model.params()[i];
        fx.model.params_mut()[i] = orig + h;
        let up = loss(&fx).0.loss_value;
        fx.model.params_mut()[i] = orig - h;
        let down = loss(&fx).0.loss_value;
        fx.model.params_mut()[i] = orig;
        worst = worst.max(rel_err(grads.as_slice()[i], (up - down) / (2.0 * h)));
    }
    (worst, coords.len())
}

/// Same check for the contrastive projection loss on pooled tiny-model features.
pub fn contrastive_fd_max_rel_err(n: usize, seed: u64) -> (f64, usize) {
    let model = Arc::new(tiny_model(seed));
    let embedder = LmEmbedder::new(model.clone());
    let task = toy_task(5);
    let f: Vec<Vec<f64>> = task.examples.iter().map(|e| embedder.features(&e.input).unwrap()).collect();
    let ex = ContrastiveExample {
        query: f[0].clone(),
        positive: f[1].clone(),
        negatives: f[2..].to_vec(),
    };
    let d = model.d_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = identity(d);
    for x in &mut w {
        *x += 0.05 * rng.gen_range(-1.0..1.0);
    }
    let tau = 0.1;
    let (_, grad) = contrastive_loss_and_grad(&w, &ex, tau);
    let coords = rand::seq::index::sample(&mut rng, d * d, n.min(d * d));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in coords.iter() {
        let orig = w[i];
        w[i] = orig + h;
        let up = contrastive_loss(&w, &ex, tau);
        w[i] = orig - h;
        let down = contrastive_loss(&w, &ex, tau);
        w[i] = orig;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * h)));
    }
    (worst, coords.len())
}
