//! Task datasets, templates, prompt assembly and evaluation metrics.
//!
//! Dataset files hold one JSON record per line with the fields `id`,
//! `input`, `target`, and optionally `options` and `metadata`. Template
//! files are TOML with `input_pattern`, `answer_pattern` and
//! `demo_separator` keys.

mod dataset;
pub mod metrics;
mod template;
pub mod templates;

pub use dataset::{load_dataset, parse_dataset, write_dataset, DemonstrationPool, Example, TaskDataset, TaskKind};
pub use metrics::{compute_metric, Metric};
pub use template::{assemble_prompt, render_example, TaskTemplate};
