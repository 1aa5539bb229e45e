//! Run configuration: defaults, then a TOML file, then command-line flags.
//!
//! A single top-level `seed` drives every random choice; the `seed` fields of
//! the nested sections are overwritten with it when the configuration is resolved.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::templates::builtin;
use crate::corpus::{load_dataset, DemonstrationPool, Metric, TaskDataset, TaskKind, TaskTemplate};
use crate::error::{Error, Result};
use crate::eval::synth::{PretrainCorpusSpec, SyntheticTaskSpec};
use crate::eval::{ContrastiveConfig, Variant};
use crate::kto::TrainConfig;
use crate::lm::PretrainConfig;
use crate::selector::{OrderPolicy, DEFAULT_K};
use crate::shortlist::DEFAULT_SHORTLIST;

pub const CACHE_DIR_ENV: &str = "GENICL_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectSection {
    pub selector: String,
    pub k: usize,
    pub order: OrderPolicy,
    pub shortlist_n: usize,
}

impl Default for SelectSection {
    fn default() -> Self {
        SelectSection {
            selector: "genicl".into(),
            k: DEFAULT_K,
            order: OrderPolicy::Descending,
            shortlist_n: DEFAULT_SHORTLIST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSection {
    /// `ground_truth`, `order`, `useful_ratio`, `contrastive` or `all`.
    pub kind: String,
    pub sample_n: usize,
    pub bin_width: f64,
    /// Shuffle seeds for the order analysis.
    pub order_seeds: Vec<u64>,
    /// Selectors compared by the ground-truth analysis.
    pub selectors: Vec<String>,
    /// Selector whose top-8 defines hard queries.
    pub hard_selector: String,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            kind: "all".into(),
            sample_n: 100,
            bin_width: 0.05,
            order_seeds: vec![0, 1, 2],
            selectors: vec!["zero_shot".into(), "random".into(), "bm25".into(), "embed".into(), "genicl".into()],
            hard_selector: "embed".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSection {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    /// Task description file (TOML).
    pub task: Option<PathBuf>,
    /// Replaces the task file's pool.
    pub pool: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    /// Plain-text pretraining corpus, one sequence per line. The synthetic
    /// key-match corpus is used when absent.
    pub corpus: Option<PathBuf>,
    pub select: SelectSection,
    pub pretrain: PretrainConfig,
    pub synthetic_corpus: PretrainCorpusSpec,
    pub train: TrainConfig,
    pub synth: SyntheticTaskSpec,
    pub analysis: AnalysisSection,
    pub contrastive: ContrastiveConfig,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            task: None,
            pool: None,
            checkpoint: None,
            out: PathBuf::from("out"),
            corpus: None,
            select: SelectSection::default(),
            pretrain: PretrainConfig::default(),
            synthetic_corpus: PretrainCorpusSpec::default(),
            train: TrainConfig::desk(),
            synth: SyntheticTaskSpec::default(),
            analysis: AnalysisSection::default(),
            contrastive: ContrastiveConfig::default(),
            ablation: AblationSection::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the file or default value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub task: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub selector: Option<String>,
    pub steps: Option<usize>,
    pub deterministic: bool,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io_at(p, e))?;
                Self::from_toml_str(&text)
            }
        }
    }

    /// Applies flags, then spreads the top-level seed. `--steps` sets the
    /// pretraining steps for `pretrain` and the training steps otherwise.
    pub fn resolve(mut self, flags: &Overrides, command: &str) -> Self {
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = &flags.$field {
                    self.$field = Some(v.clone());
                }
            };
        }
        take!(task);
        take!(pool);
        take!(checkpoint);
        if let Some(o) = &flags.out {
            self.out = o.clone();
        }
        if let Some(k) = flags.k {
            self.select.k = k;
        }
        if let Some(s) = &flags.selector {
            self.select.selector = s.clone();
        }
        if let Some(n) = flags.steps {
            if command == "pretrain" {
                self.pretrain.steps = n;
            } else {
                self.train.steps = n;
            }
        }
        self.deterministic |= flags.deterministic;
        self.pretrain.seed = self.seed;
        self.synthetic_corpus.seed = self.seed;
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// A task description file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub id: String,
    /// Name of a bundled task supplying template, kind and metric.
    #[serde(default)]
    pub builtin: Option<String>,
    #[serde(default)]
    pub kind: Option<TaskKind>,
    #[serde(default)]
    pub metric: Option<Metric>,
    /// Training queries.
    pub queries: PathBuf,
    pub pool: PathBuf,
    /// Evaluation queries; the training queries are evaluated when absent.
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub template: Option<TaskTemplate>,
}

/// Queries and pool of one task.
#[derive(Debug, Clone)]
pub struct LoadedTask {
    pub queries: TaskDataset,
    pub pool_dataset: TaskDataset,
    pub test: Option<TaskDataset>,
    pub queries_path: PathBuf,
    pub pool_path: PathBuf,
}

impl LoadedTask {
    pub fn eval_queries(&self) -> &TaskDataset {
        self.test.as_ref().unwrap_or(&self.queries)
    }

    pub fn pool(&self) -> DemonstrationPool {
        DemonstrationPool::from(&self.pool_dataset)
    }
}

impl TaskFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Ok(toml::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io_at(path, e))
    }

    fn parts(&self) -> Result<(TaskTemplate, TaskKind, Metric)> {
        let bundled = match &self.builtin {
            Some(name) => Some(builtin(name).ok_or_else(|| Error::Config(format!("unknown builtin task {name:?}")))?),
            None => None,
        };
        let template = self
            .template
            .clone()
            .or_else(|| bundled.as_ref().map(|b| b.0.clone()))
            .ok_or_else(|| Error::Config(format!("task {} has no template", self.id)))?;
        template.check()?;
        let kind = self
            .kind
            .or(bundled.as_ref().map(|b| b.1))
            .ok_or_else(|| Error::Config(format!("task {} has no kind", self.id)))?;
        let metric = self
            .metric
            .or(bundled.as_ref().map(|b| b.2))
            .ok_or_else(|| Error::Config(format!("task {} has no metric", self.id)))?;
        Ok((template, kind, metric))
    }

    /// Loads queries and pool; `pool_override` replaces the file's pool path.
    pub fn load_task(&self, base: &Path, pool_override: Option<&Path>) -> Result<LoadedTask> {
        let (template, kind, metric) = self.parts()?;
        let queries_path = base.join(&self.queries);
        let pool_path = pool_override.map(Path::to_path_buf).unwrap_or_else(|| base.join(&self.pool));
        let queries = load_dataset(&queries_path, &self.id, kind, template.clone(), metric)?;
        let pool_dataset = load_dataset(&pool_path, &self.id, kind, template.clone(), metric)?;
        let test = match &self.test {
            Some(t) => Some(load_dataset(base.join(t), &self.id, kind, template, metric)?),
            None => None,
        };
        Ok(LoadedTask {
            queries,
            pool_dataset,
            test,
            queries_path,
            pool_path,
        })
    }
}

/// Loads the task named by `path`.
pub fn load_task(path: &Path, pool_override: Option<&Path>) -> Result<LoadedTask> {
    let file = TaskFile::load(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    file.load_task(base, pool_override)
}

/// Score-cache file under the directory named by the environment, if set.
pub fn cache_path() -> Option<PathBuf> {
    std::env::var_os(CACHE_DIR_ENV).map(|d| PathBuf::from(d).join("scores.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_defaults() {
        let file = RunConfig::from_toml_str("seed = 4\n[select]\nk = 3\nselector = \"bm25\"\n[train]\nsteps = 9\n").unwrap();
        assert_eq!(file.select.k, 3);
        assert_eq!(file.select.order, OrderPolicy::Descending);
        assert_eq!(file.train.beta, TrainConfig::desk().beta);
        let flags = Overrides {
            k: Some(5),
            steps: Some(2),
            ..Overrides::default()
        };
        let r = file.resolve(&flags, "train");
        assert_eq!((r.select.k, r.select.selector.as_str(), r.train.steps, r.seed), (5, "bm25", 2, 4));
        assert_eq!(r.train.seed, 4);
    }

    #[test]
    fn steps_flag_targets_pretraining_for_pretrain() {
        let flags = Overrides {
            steps: Some(7),
            ..Overrides::default()
        };
        let r = RunConfig::default().resolve(&flags, "pretrain");
        assert_eq!(r.pretrain.steps, 7);
        assert_eq!(r.train.steps, TrainConfig::desk().steps);
    }

    #[test]
    fn unknown_keys_are_rejected_by_type() {
        assert!(RunConfig::from_toml_str("seed = \"x\"").is_err());
    }
}
