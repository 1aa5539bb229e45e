//! Command-line entry point.
//!
//! Every subcommand writes into the `--out` directory and appends one line to
//! its `manifest.jsonl`. Exit codes: 0 on success, 1 when the pipeline rejects
//! its inputs, 2 on a usage error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::cache::ScoreCache;
use super::config::{cache_path, load_task, LoadedTask, Overrides, RunConfig, TaskFile};
use super::hash::{hash_examples, sha256_hex};
use super::manifest::{RunManifest, ARTIFACT_FORMAT_VERSION};
use crate::corpus::{write_dataset, DemonstrationPool, Example, TaskDataset};
use crate::error::{Error, Result};
use crate::eval::synth::{synth_pretrain_corpus, synth_task_generate, SyntheticTask, KEY_META};
use crate::eval::{
    ablation_suite, contrastive_baseline_train, evaluate_selector, ground_truth_prob_report, ground_truth_table,
    order_sensitivity, uniform_bins, useful_ratio_analysis, AblationInputs, EvalReport,
};
use crate::kto::Trainer;
use crate::lm::{init_latent, load_checkpoint, pretrain_lm, save_checkpoint, ModelState, Vocabulary, DEFAULT_LATENT_LEN};
use crate::preference::{build_answer_pair, build_demo_pairs, write_preference_file, PreferenceScorer};
use crate::selector::{
    Bm25Selector, EmbedSelector, GenIclSelector, OrderPolicy, RandomSelector, SelectionConfig, SelectionManifest,
    Selector, ZeroShot,
};
use crate::shortlist::{resolve, Bm25Params, EmbeddingIndex, LmEmbedder, Ranking};

pub const SELECTORS: [&str; 6] = ["zero_shot", "random", "bm25", "embed", "contrastive", "genicl"];

#[derive(Parser, Debug)]
#[command(name = "genicl", version, about = "Demonstration selection by generative preference learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Task description file.
    #[arg(long, global = true)]
    task: Option<PathBuf>,
    /// Demonstration pool replacing the task's own.
    #[arg(long, global = true)]
    pool: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    selector: Option<String>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Single-threaded, fixed-order execution (the only mode; recorded in the manifest).
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic key-match task and its pretraining corpus.
    Synth,
    /// Pretrains the scorer LM.
    Pretrain,
    /// Preference scores of every query's shortlist.
    Score,
    /// Demonstration and answer preference pairs.
    Pairs,
    /// Trains the latent prompt.
    Train,
    /// Selects demonstrations for every evaluation query.
    Select,
    /// Selects, predicts and scores.
    Eval,
    /// Ground-truth probability, order sensitivity, useful ratio or contrastive training.
    Analyze {
        /// Overrides `analysis.kind`.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Objective ablations.
    Ablate,
    /// Summarizes evaluation reports into a table.
    Report {
        /// Report files; defaults to `<out>/report.json`.
        reports: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Score => "score",
            Command::Pairs => "pairs",
            Command::Train => "train",
            Command::Select => "select",
            Command::Eval => "eval",
            Command::Analyze { .. } => "analyze",
            Command::Ablate => "ablate",
            Command::Report { .. } => "report",
        }
    }
}

/// What a command read and wrote, for the manifest.
#[derive(Default)]
struct Trace {
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Trace {
    fn input(&mut self, role: &str, hash: String) {
        self.inputs.insert(role.to_string(), hash);
    }

    fn output(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }
}

/// Runs one command line (`argv[0]` is the program name) and returns its exit code.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            let msg = serde_json::json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{msg}");
            1
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io(_) | Error::IoAt { .. } => "io",
        Error::Schema { .. } => "schema",
        Error::Validation(_) => "validation",
        Error::Render { .. } => "render",
        Error::Config(_) => "config",
        Error::Window { .. } => "window",
        Error::Training { .. } => "training",
        Error::Scoring(_) => "scoring",
        Error::Selection(_) => "selection",
        Error::Construction(_) => "construction",
        Error::Checkpoint { .. } => "checkpoint",
        Error::VersionMismatch { .. } => "version",
        Error::Json(_) => "json",
        Error::Toml(_) => "toml",
    }
}

fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let name = cli.command.name();
    let f = &cli.flags;
    let overrides = Overrides {
        seed: f.seed,
        task: f.task.clone(),
        pool: f.pool.clone(),
        checkpoint: f.checkpoint.clone(),
        out: f.out.clone(),
        k: f.k,
        selector: f.selector.clone(),
        steps: f.steps,
        deterministic: f.deterministic,
    };
    let cfg = RunConfig::load(f.config.as_deref())?.resolve(&overrides, name);
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io_at(&cfg.out, e))?;
    let mut trace = Trace::default();
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &mut trace)?,
        Command::Pretrain => cmd_pretrain(&cfg, &mut trace)?,
        Command::Score => cmd_score(&cfg, &mut trace)?,
        Command::Pairs => cmd_pairs(&cfg, &mut trace)?,
        Command::Train => cmd_train(&cfg, &mut trace)?,
        Command::Select => cmd_select(&cfg, &mut trace)?,
        Command::Eval => cmd_eval(&cfg, &mut trace)?,
        Command::Analyze { kind } => cmd_analyze(&cfg, kind.as_deref().unwrap_or(&cfg.analysis.kind), &mut trace)?,
        Command::Ablate => cmd_ablate(&cfg, &mut trace)?,
        Command::Report { reports } => cmd_report(&cfg, reports, &mut trace)?,
    }
    RunManifest {
        command: name.to_string(),
        argv: argv.to_vec(),
        config: cfg.to_json(),
        input_hashes: trace.inputs,
        outputs: trace.outputs,
        seed: cfg.seed,
        deterministic: cfg.deterministic,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        format_version: ARTIFACT_FORMAT_VERSION,
    }
    .append(&cfg.out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io_at(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Validation(format!("{flag} is required")))
}

fn task(cfg: &RunConfig, trace: &mut Trace) -> Result<LoadedTask> {
    let t = load_task(require(&cfg.task, "--task")?, cfg.pool.as_deref())?;
    trace.input("queries", hash_examples(&t.queries.examples));
    trace.input("pool", hash_examples(&t.pool_dataset.examples));
    if let Some(test) = &t.test {
        trace.input("test", hash_examples(&test.examples));
    }
    Ok(t)
}

fn checkpoint(cfg: &RunConfig, trace: &mut Trace) -> Result<ModelState> {
    let (model, _) = load_checkpoint(require(&cfg.checkpoint, "--checkpoint")?)?;
    trace.input("checkpoint", model.content_hash());
    Ok(model)
}

fn open_cache() -> Result<ScoreCache> {
    match cache_path() {
        Some(p) => ScoreCache::open(p),
        None => Ok(ScoreCache::in_memory()),
    }
}

/// Oracle usefulness, when every example carries a synthetic key.
fn key_oracle(t: &LoadedTask) -> Option<fn(&Example, &Example) -> bool> {
    let keyed = |ds: &TaskDataset| ds.examples.iter().all(|e| e.metadata.contains_key(KEY_META));
    (keyed(&t.pool_dataset) && keyed(t.eval_queries())).then_some(SyntheticTask::is_useful as fn(&Example, &Example) -> bool)
}

fn cmd_synth(cfg: &RunConfig, trace: &mut Trace) -> Result<()> {
    let t = synth_task_generate(&cfg.synth)?;
    let out = &cfg.out;
    write_dataset(trace.output(out.join("pool.jsonl")), &t.pool.examples)?;
    write_dataset(trace.output(out.join("queries.jsonl")), &t.queries.examples)?;
    write_dataset(trace.output(out.join("test.jsonl")), &t.test.examples)?;
    TaskFile {
        id: t.pool.task_id.clone(),
        builtin: None,
        kind: Some(t.pool.kind),
        metric: Some(t.pool.metric),
        queries: "queries.jsonl".into(),
        pool: "pool.jsonl".into(),
        test: Some("test.jsonl".into()),
        template: Some(t.pool.template.clone()),
    }
    .write(&trace.output(out.join("task.toml")))?;
    write_json(&trace.output(out.join("codes.json")), &t.codes)?;
    let mut corpus = synth_pretrain_corpus(&cfg.synthetic_corpus).join("\n");
    corpus.push('\n');
    write_text(&trace.output(out.join("corpus.txt")), &corpus)
}

fn cmd_pretrain(cfg: &RunConfig, trace: &mut Trace) -> Result<()> {
    let corpus: Vec<String> = match &cfg.corpus {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::io_at(p, e))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_owned)
            .collect(),
        None => synth_pretrain_corpus(&cfg.synthetic_corpus),
    };
    trace.input("corpus", sha256_hex(corpus.join("\n").as_bytes()));
    let (model, report) = pretrain_lm(&corpus, Vocabulary::ascii(), &cfg.pretrain)?;
    save_checkpoint(trace.output(cfg.out.join("model.ckpt")), &model)?;
    write_json(&trace.output(cfg.out.join("pretrain_report.json")), &report)
}

/// Embedding shortlist of every training query (query excluded).
fn shortlists(model: &Arc<ModelState>, t: &LoadedTask, pool: &DemonstrationPool, n: usize) -> Result<Vec<Ranking>> {
    let embedder = LmEmbedder::new(model.clone());
    let index = EmbeddingIndex::build(pool, &embedder)?;
    t.queries
        .examples
        .iter()
        .map(|q| {
            let mut r = index.rank(&q.input, n + 1, &embedder)?;
            r.candidates.retain(|c| c.example_id != q.id);
            r.candidates.truncate(n);
            Ok(r)
        })
        .collect()
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    query: &'a str,
    demo: &'a str,
    logprob: f64,
    tokens: usize,
}

fn cmd_score(cfg: &RunConfig, trace: &mut Trace) -> Result<()> {
    let t = task(cfg, trace)?;
    let model = Arc::new(checkpoint(cfg, trace)?);
    let pool = t.pool();
    let lists = shortlists(&model, &t, &pool, cfg.train.shortlist_n)?;
    let mut cache = open_cache()?;
    let mut scorer = PreferenceScorer::new(&model, &t.queries.template).with_cache(&mut cache);
    let mut out = Vec::new();
    for (q, list) in t.queries.examples.iter().zip(&lists) {
        for d in resolve(list, &pool) {
            let lp = scorer.score(q, d)?;
            serde_json::to_writer(
                &mut out,
                &ScoreLine {
                    query: &q.id,
                    demo: &d.id,
                    logprob: lp.value,
                    tokens: lp.token_count,
                },
            )?;
            out.push(b'\n');
        }
    }
    let path = trace.output(cfg.out.join("scores.jsonl"));
    std::fs::write(&path, out).map_err(|e| Error::io_at(&path, e))
}

fn cmd_pairs(cfg: &RunConfig, trace: &mut Trace) -> Result<()> {
    let t = task(cfg, trace)?;
    let model = Arc::new(checkpoint(cfg, trace)?);
    let pool = t.pool();
    let lists = shortlists(&model, &t, &pool, cfg.train.shortlist_n)?;
    let mut cache = open_cache()?;
    let mut scorer = PreferenceScorer::new(&model, &t.queries.template).with_cache(&mut cache);
    scorer.per_token = cfg.train.per_token;
    let (mut pairs, mut answers) = (Vec::new(), Vec::new());
    for (q, list) in t.queries.examples.iter().zip(&lists) {
        let demos = resolve(list, &pool);
        let dp = build_demo_pairs(q, &demos, &mut scorer, cfg.train.n_pos, cfg.train.n_neg)?;
        pairs.extend(dp.pairs);
        match build_answer_pair(q, &t.queries, cfg.seed) {
            Ok(a) => answers.push(a),
            Err(Error::Construction(m)) => log::warn!("{m}"),
            Err(e) => return Err(e),
        }
    }
    write_preference_file(trace.output(cfg.out.join("preferences.jsonl")), &pairs, &answers)
}

fn cmd_train(cfg: &RunConfig, trace: &mut Trace) -> Result<()> {
    let t = task(cfg, trace)?;
    let mut model = checkpoint(cfg, trace)?;
    let out = trace.output(cfg.out.join("model.ckpt"));
    if cfg.train.steps == 0 {
        return save_checkpoint(out, &model);
    }
    let latent = match crate::lm::LatentPrompt::from_model(&model) {
        Some(l) => l,
        None => init_latent(DEFAULT_LATENT_LEN, &mut model, cfg.seed)?,
    };
    let mut cache = open_cache()?;
    let mut trainer = Trainer::new(cfg.train.clone()).with_cache(&mut cache);
    if cfg.train.checkpoint_every > 0 {
        trainer = trainer.with_checkpoints(trace.output(cfg.out.join("checkpoints")));
    }
    let outcome = trainer.train(&t.queries, &t.pool(), model, &latent)?;
    save_checkpoint(out, &outcome.model)?;
    outcome.log.write_jsonl(trace.output(cfg.out.join("train_log.jsonl")))
}

/// Builds a selector by name. Baselines are built from the model without its
/// latent rows, so they cannot depend on them.
fn build_selector<'a>(
    name: &str,
    cfg: &RunConfig,
    t: &LoadedTask,
    pool: &Arc<DemonstrationPool>,
    model: &Arc<ModelState>,
    cache: &'a mut ScoreCache,
) -> Result<Box<dyn Selector + 'a>> {
    let base = || Arc::new(model.without_latent());
    Ok(match name {
        "zero_shot" => Box::new(ZeroShot),
        "random" => Box::new(RandomSelector::new(pool.clone(), cfg.seed)),
        "bm25" => Box::new(Bm25Selector::new(pool, Bm25Params::default())),
        "embed" => Box::new(EmbedSelector::new(pool, LmEmbedder::new(base()))?),
        "contrastive" => {
            let outcome = contrastive_baseline_train(&t.queries, pool, base(), &cfg.contrastive)?;
            Box::new(EmbedSelector::named(pool, outcome.embedder, "contrastive")?)
        }
        "genicl" => Box::new(
            GenIclSelector::new(model.clone(), pool.clone(), t.queries.template.clone(), cfg.select.shortlist_n)?
                .with_cache(cache),
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown selector {other:?}; expected one of {}",
                SELECTORS.join(", ")
            )))
        }
    })
}

fn selection_config(cfg: &RunConfig) -> SelectionConfig {
    SelectionConfig {
        k: cfg.select.k,
        order: cfg.select.order,
        shuffle_seed: cfg.seed,
    }
}

fn cmd_select(cfg: &RunConfig, trace: &mut Trace) -> Result<()> {
    let t = task(cfg, trace)?;
    let model = Arc::new(checkpoint(cfg, trace)?);
    let pool = Arc::new(t.pool());
    let mut cache = open_cache()?;
    let mut sel = build_selector(&cfg.select.selector, cfg, &t, &pool, &model, &mut cache)?;
    let sc = selection_config(cfg);
    let selections = t
        .eval_queries()
        .examples
        .iter()
        .map(|q| sel.select(q, &sc))
        .collect::<Result<Vec<_>>>()?;
    SelectionManifest {
        selector: sel.id().to_string(),
        k: sc.k,
        order: sc.order,
        shuffle_seed: sc.shuffle_seed,
        selections,
    }
    .write(trace.output(cfg.out.join("selection.json")))
}

fn cmd_eval(cfg: &RunConfig, trace: &mut Trace) -> Result<()> {
    let t = task(cfg, trace)?;
    let model = Arc::new(checkpoint(cfg, trace)?);
    let pool = Arc::new(t.pool());
    let mut cache = open_cache()?;
    let mut sel = build_selector(&cfg.select.selector, cfg, &t, &pool, &model, &mut cache)?;
    let (report, manifest) = evaluate_selector(sel.as_mut(), t.eval_queries(), &pool, &model, &selection_config(cfg), cfg.seed)?;
    report.write(trace.output(cfg.out.join("report.json")))?;
    manifest.write(trace.output(cfg.out.join("selection.json")))?;
    println!("{}\t{}\tk={}\t{}={:.4}", report.task_id, report.selector_id, report.k, report.metric, report.score);
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, kind: &str, trace: &mut Trace) -> Result<()> {
    const KINDS: [&str; 4] = ["ground_truth", "order", "useful_ratio", "contrastive"];
    let kinds: Vec<&str> = match kind {
        "all" => KINDS.to_vec(),
        k if KINDS.contains(&k) => vec![k],
        other => return Err(Error::Config(format!("unknown analysis {other:?}"))),
    };
    let t = task(cfg, trace)?;
    let model = Arc::new(checkpoint(cfg, trace)?);
    let pool = Arc::new(t.pool());
    let queries = t.eval_queries();
    let out = &cfg.out;
    for kind in kinds {
        match kind {
            "ground_truth" => {
                let mut caches: Vec<ScoreCache> = cfg.analysis.selectors.iter().map(|_| ScoreCache::in_memory()).collect();
                let mut sels = Vec::new();
                for (name, cache) in cfg.analysis.selectors.iter().zip(caches.iter_mut()) {
                    sels.push(build_selector(name, cfg, &t, &pool, &model, cache)?);
                }
                let mut refs: Vec<&mut dyn Selector> = sels.iter_mut().map(|s| s.as_mut() as &mut dyn Selector).collect();
                let rows = ground_truth_prob_report(&mut refs, queries, &pool, &model, &selection_config(cfg))?;
                write_json(&trace.output(out.join("ground_truth.json")), &rows)?;
                write_text(&trace.output(out.join("ground_truth.tsv")), &ground_truth_table(&rows))?;
            }
            "order" => {
                let mut cache = open_cache()?;
                let mut sel = build_selector(&cfg.select.selector, cfg, &t, &pool, &model, &mut cache)?;
                let table = order_sensitivity(
                    sel.as_mut(),
                    queries,
                    &pool,
                    &model,
                    cfg.select.k,
                    &OrderPolicy::ALL,
                    &cfg.analysis.order_seeds,
                )?;
                let mut tsv = String::from("policy\tshuffle_seed\tscore\n");
                for r in &table.rows {
                    tsv.push_str(&format!("{}\t{}\t{:.6}\n", r.policy, r.shuffle_seed, r.score));
                }
                tsv.push_str(&format!("spread\t-\t{:.6}\n", table.spread));
                write_json(&trace.output(out.join("order.json")), &table)?;
                write_text(&trace.output(out.join("order.tsv")), &tsv)?;
            }
            "useful_ratio" => {
                let mut cache = open_cache()?;
                let mut hard = build_selector(&cfg.analysis.hard_selector, cfg, &t, &pool, &model, &mut cache)?;
                let report = useful_ratio_analysis(
                    queries,
                    &pool,
                    &model,
                    hard.as_mut(),
                    cfg.analysis.sample_n,
                    &uniform_bins(cfg.analysis.bin_width),
                    cfg.seed,
                )?;
                write_json(&trace.output(out.join("useful_ratio.json")), &report)?;
                write_text(&trace.output(out.join("useful_ratio.tsv")), &report.histogram_table())?;
            }
            "contrastive" => {
                let outcome = contrastive_baseline_train(&t.queries, &pool, Arc::new(model.without_latent()), &cfg.contrastive)?;
                #[derive(Serialize)]
                struct Summary<'a> {
                    losses: &'a [f64],
                    skipped: usize,
                    projection: Option<&'a [f64]>,
                }
                write_json(
                    &trace.output(out.join("contrastive.json")),
                    &Summary {
                        losses: &outcome.losses,
                        skipped: outcome.skipped,
                        projection: outcome.embedder.projection(),
                    },
                )?;
            }
            _ => unreachable!(),
        }
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, trace: &mut Trace) -> Result<()> {
    let t = task(cfg, trace)?;
    let model = checkpoint(cfg, trace)?.without_latent();
    let pool = Arc::new(t.pool());
    let oracle = key_oracle(&t);
    let inputs = AblationInputs {
        train: &t.queries,
        eval: t.eval_queries(),
        pool: &pool,
        pretrained: &model,
        selection: selection_config(cfg),
        useful: oracle.as_ref().map(|f| f as &dyn Fn(&Example, &Example) -> bool),
    };
    let table = ablation_suite(&inputs, &cfg.ablation.variants, &cfg.train, &cfg.ablation.seeds)?;
    write_json(&trace.output(cfg.out.join("ablation.json")), &table)?;
    write_text(&trace.output(cfg.out.join("ablation.tsv")), &table.to_tsv())?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn cmd_report(cfg: &RunConfig, reports: &[PathBuf], trace: &mut Trace) -> Result<()> {
    let paths = if reports.is_empty() {
        vec![cfg.out.join("report.json")]
    } else {
        reports.to_vec()
    };
    let mut tsv = String::from("task\tselector\tk\torder\tmetric\tscore\tqueries\n");
    for p in &paths {
        let r = EvalReport::read(p)?;
        trace.input(&p.display().to_string(), sha256_hex(&std::fs::read(p).map_err(|e| Error::io_at(p, e))?));
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\n",
            r.task_id,
            r.selector_id,
            r.k,
            r.order,
            r.metric,
            r.score,
            r.records.len()
        ));
    }
    write_text(&trace.output(cfg.out.join("summary.tsv")), &tsv)?;
    print!("{tsv}");
    Ok(())
}
