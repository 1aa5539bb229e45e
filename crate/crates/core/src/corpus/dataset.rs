use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::Metric;
use super::template::TaskTemplate;
use crate::error::{Error, Result};

/// One task instance: an input, its target and, for label tasks, the option set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    #[serde(default)]
    pub task_id: String,
    pub input: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Example {
    pub fn new(id: impl Into<String>, input: impl Into<String>, target: impl Into<String>) -> Self {
        Example {
            id: id.into(),
            task_id: String::new(),
            input: input.into(),
            target: target.into(),
            options: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_options<S: Into<String>>(mut self, options: impl IntoIterator<Item = S>) -> Self {
        self.options = Some(options.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    MultiChoice,
    Generation,
}

impl TaskKind {
    pub fn requires_options(self) -> bool {
        !matches!(self, TaskKind::Generation)
    }

    /// Metrics that are meaningful for this kind of task.
    pub fn allows_metric(self, metric: Metric) -> bool {
        match self {
            TaskKind::Classification => matches!(metric, Metric::Accuracy | Metric::F1),
            TaskKind::MultiChoice => matches!(metric, Metric::Accuracy),
            TaskKind::Generation => matches!(metric, Metric::RougeL | Metric::ExactMatch),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "classification" => Ok(TaskKind::Classification),
            "multi_choice" | "multichoice" => Ok(TaskKind::MultiChoice),
            "generation" => Ok(TaskKind::Generation),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::MultiChoice => "multi_choice",
            TaskKind::Generation => "generation",
        })
    }
}

/// A validated task: its examples, the template used to render them and the metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: String,
    pub kind: TaskKind,
    pub examples: Vec<Example>,
    pub template: TaskTemplate,
    pub metric: Metric,
}

impl TaskDataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        task_id: impl Into<String>,
        kind: TaskKind,
        examples: Vec<Example>,
        template: TaskTemplate,
        metric: Metric,
    ) -> Result<Self> {
        let task_id = task_id.into();
        if !kind.allows_metric(metric) {
            return Err(Error::Validation(format!(
                "metric {metric} does not apply to {kind} tasks"
            )));
        }
        let mut seen = HashSet::new();
        let mut examples = examples;
        for ex in &mut examples {
            if !seen.insert(ex.id.clone()) {
                return Err(Error::Validation(format!("duplicate example id {}", ex.id)));
            }
            validate_example(ex, kind)?;
            if ex.task_id.is_empty() {
                ex.task_id = task_id.clone();
            }
        }
        Ok(TaskDataset {
            task_id,
            kind,
            examples,
            template,
            metric,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// A copy of this dataset restricted to `examples[range]`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TaskDataset {
        TaskDataset {
            examples: self.examples[range].to_vec(),
            ..self.clone()
        }
    }
}

fn validate_example(ex: &Example, kind: TaskKind) -> Result<()> {
    if ex.target.is_empty() {
        return Err(Error::Validation(format!("record {}: empty target", ex.id)));
    }
    match (&ex.options, kind.requires_options()) {
        (None, true) => Err(Error::Schema {
            record: ex.id.clone(),
            message: format!("missing field `options` required by {kind} tasks"),
        }),
        (Some(opts), _) if !opts.contains(&ex.target) => Err(Error::Validation(format!(
            "record {}: target {:?} is not one of the options {:?}",
            ex.id, ex.target, opts
        ))),
        _ => Ok(()),
    }
}

/// Parses line-delimited JSON records. Blank lines are ignored.
pub fn parse_dataset(
    text: &str,
    task_id: &str,
    kind: TaskKind,
    template: TaskTemplate,
    metric: Metric,
) -> Result<TaskDataset> {
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Schema {
            record: format!("line {}", lineno + 1),
            message: e.to_string(),
        })?;
        let record = value
            .get("id")
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .unwrap_or_else(|| format!("line {}", lineno + 1));
        for field in ["id", "input", "target"] {
            if value.get(field).is_none() {
                return Err(Error::Schema {
                    record,
                    message: format!("missing field `{field}`"),
                });
            }
        }
        let example: Example = serde_json::from_value(value).map_err(|e| Error::Schema {
            record: record.clone(),
            message: e.to_string(),
        })?;
        examples.push(example);
    }
    if examples.is_empty() {
        log::warn!("dataset for task {task_id} is empty");
    }
    TaskDataset::new(task_id, kind, examples, template, metric)
}

/// Loads a dataset file, preserving record order.
pub fn load_dataset(
    path: impl AsRef<Path>,
    task_id: &str,
    kind: TaskKind,
    template: TaskTemplate,
    metric: Metric,
) -> Result<TaskDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    parse_dataset(&text, task_id, kind, template, metric)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    file.write_all(&out).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

/// The set of examples demonstrations are drawn from, indexed by id.
#[derive(Debug, Clone, Default)]
pub struct DemonstrationPool {
    examples: Vec<Example>,
    index: HashMap<String, usize>,
}

impl DemonstrationPool {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let mut index = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate pool id {}", ex.id)));
            }
        }
        Ok(DemonstrationPool { examples, index })
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.index.get(id).map(|&i| &self.examples[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

impl From<&TaskDataset> for DemonstrationPool {
    fn from(ds: &TaskDataset) -> Self {
        // TaskDataset already guarantees unique ids.
        DemonstrationPool::new(ds.examples.clone()).expect("task dataset ids are unique")
    }
}
