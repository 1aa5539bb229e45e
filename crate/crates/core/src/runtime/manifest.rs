//! Append-only run manifests.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

/// One executed command: what went in, what came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    /// Content hash per input role (`queries`, `pool`, `checkpoint`, ...).
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub deterministic: bool,
    pub wall_clock_secs: f64,
    pub format_version: u32,
}

impl RunManifest {
    /// Appends one line to `dir/manifest.jsonl`.
    pub fn append(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let mut line = serde_json::to_vec(self)?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io_at(&path, e))?;
        f.write_all(&line).map_err(|e| Error::io_at(&path, e))?;
        Ok(path)
    }

    pub fn read_all(dir: impl AsRef<Path>) -> Result<Vec<RunManifest>> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let f = std::fs::File::open(&path).map_err(|e| Error::io_at(&path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io_at(&path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}
