//! Append-only score cache.
//!
//! Each line is one JSON record `{model, scorer, query, demo, value, tokens}`.
//! The model hash is part of the key, so scores from an earlier checkpoint
//! are never served after retraining. Lines that fail to parse are skipped
//! and counted.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LogProb;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub model: String,
    /// Which quantity was scored, e.g. `pref` or `latent`.
    pub scorer: String,
    pub query: String,
    pub demo: String,
}

impl CacheKey {
    pub fn new(model: &str, scorer: &str, query: &str, demo: &str) -> Self {
        CacheKey {
            model: model.to_string(),
            scorer: scorer.to_string(),
            query: query.to_string(),
            demo: demo.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(flatten)]
    key: CacheKey,
    value: f64,
    tokens: usize,
}

#[derive(Debug, Default)]
pub struct ScoreCache {
    entries: HashMap<CacheKey, LogProb>,
    file: Option<(PathBuf, File)>,
    corrupt_lines: usize,
    hits: usize,
    misses: usize,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        ScoreCache::default()
    }

    /// Opens (creating if needed) the cache file at `path` and loads it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut cache = ScoreCache::default();
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io_at(&path, e))?;
            for line in BufReader::new(f).split(b'\n') {
                let line = line.map_err(|e| Error::io_at(&path, e))?;
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                match serde_json::from_slice::<Record>(&line) {
                    Ok(r) if r.value.is_finite() => {
                        cache.entries.insert(
                            r.key,
                            LogProb {
                                value: r.value,
                                token_count: r.tokens,
                            },
                        );
                    }
                    _ => cache.corrupt_lines += 1,
                }
            }
            if cache.corrupt_lines > 0 {
                log::warn!("{}: skipped {} corrupt cache lines", path.display(), cache.corrupt_lines);
            }
        } else if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io_at(&path, e))?;
        cache.file = Some((path, file));
        Ok(cache)
    }

    pub fn get(&mut self, key: &CacheKey) -> Option<LogProb> {
        let v = self.entries.get(key).copied();
        if v.is_some() {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        v
    }

    /// Stores `value`; with a backing file the record is appended as a single write.
    pub fn put(&mut self, key: CacheKey, value: LogProb) -> Result<()> {
        if let Some((path, file)) = &mut self.file {
            let mut line = serde_json::to_vec(&Record {
                key: key.clone(),
                value: value.value,
                tokens: value.token_count,
            })?;
            line.push(b'\n');
            file.write_all(&line).map_err(|e| Error::io_at(path.as_path(), e))?;
        }
        self.entries.insert(key, value);
        Ok(())
    }

    /// Returns the cached value or computes, stores and returns it.
    pub fn get_or_insert_with(&mut self, key: CacheKey, f: impl FnOnce() -> Result<LogProb>) -> Result<LogProb> {
        if let Some(v) = self.get(&key) {
            return Ok(v);
        }
        let v = f()?;
        self.put(key, v)?;
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn corrupt_lines(&self) -> usize {
        self.corrupt_lines
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn misses(&self) -> usize {
        self.misses
    }
}

/// Cache handle that may be absent.
pub(crate) fn cached(
    cache: &mut Option<&mut ScoreCache>,
    key: impl FnOnce() -> CacheKey,
    f: impl FnOnce() -> Result<LogProb>,
) -> Result<LogProb> {
    match cache {
        Some(c) => c.get_or_insert_with(key(), f),
        None => f(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(v: f64) -> LogProb {
        LogProb {
            value: v,
            token_count: 3,
        }
    }

    #[test]
    fn put_then_get() {
        let mut c = ScoreCache::in_memory();
        let k = CacheKey::new("m1", "pref", "q", "d");
        c.put(k.clone(), lp(-1.25)).unwrap();
        assert_eq!(c.get(&k), Some(lp(-1.25)));
        assert_eq!(c.get(&CacheKey::new("m2", "pref", "q", "d")), None);
    }

    #[test]
    fn file_round_trip_and_corrupt_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/cache.jsonl");
        {
            let mut c = ScoreCache::open(&path).unwrap();
            c.put(CacheKey::new("m", "pref", "q1", "d1"), lp(-0.1)).unwrap();
            c.put(CacheKey::new("m", "pref", "q1", "d2"), lp(-0.2)).unwrap();
        }
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&path, text).unwrap();
        let mut c = ScoreCache::open(&path).unwrap();
        assert_eq!(c.corrupt_lines(), 1);
        assert_eq!(c.len(), 2);
        assert_eq!(c.get(&CacheKey::new("m", "pref", "q1", "d2")), Some(lp(-0.2)));
    }
}
