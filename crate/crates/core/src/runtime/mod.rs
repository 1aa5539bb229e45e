//! Score cache, content hashes, run manifests and the command line.

pub mod cache;
pub mod cli;
pub mod config;
pub mod hash;
pub mod manifest;

pub use cache::{CacheKey, ScoreCache};
pub use cli::run_command;
pub use config::{load_task, LoadedTask, Overrides, RunConfig, TaskFile, CACHE_DIR_ENV};
pub use manifest::RunManifest;
