//! Key-match synthetic tasks with exact usefulness labels.
//!
//! Every input is a run of random digits ending in an uppercase key letter;
//! the target is a short lowercase code fixed per key and written directly
//! after the input (`381Kxyz`). A demonstration helps a query exactly when
//! the two share a key, because only then does the prompt contain the code to
//! copy. The key is stored in `metadata["key"]`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Metric, TaskDataset, TaskKind, TaskTemplate};
use crate::error::{Error, Result};

pub const KEY_META: &str = "key";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub n_keys: usize,
    pub pool_size: usize,
    /// Training queries.
    pub query_count: usize,
    /// Held-out evaluation queries.
    pub test_count: usize,
    /// Characters per input, key included.
    pub input_len: usize,
    pub code_len: usize,
    /// Give every key the same number of pool examples (± 1).
    pub balanced_pool: bool,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            n_keys: 8,
            pool_size: 256,
            query_count: 200,
            test_count: 200,
            input_len: 4,
            code_len: 3,
            balanced_pool: true,
            seed: 0,
        }
    }
}

pub fn synth_template() -> TaskTemplate {
    TaskTemplate::new("{input}", "{answer}", "\n")
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    /// Demonstration pool.
    pub pool: TaskDataset,
    /// Training queries, disjoint from the pool.
    pub queries: TaskDataset,
    /// Evaluation queries, disjoint from both.
    pub test: TaskDataset,
    /// Key letter to code.
    pub codes: BTreeMap<char, String>,
}

impl SyntheticTask {
    /// Oracle usefulness of `demo` for `query`.
    pub fn is_useful(query: &Example, demo: &Example) -> bool {
        match (query.metadata.get(KEY_META), demo.metadata.get(KEY_META)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    /// Usefulness labels of every pool example for `query`, in pool order.
    pub fn labels(&self, query: &Example) -> Vec<bool> {
        self.pool.examples.iter().map(|d| Self::is_useful(query, d)).collect()
    }
}

fn random_digit(rng: &mut ChaCha8Rng) -> char {
    (b'0' + rng.gen_range(0..10u8)) as char
}

fn random_code(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect()
}

fn keyed_input(rng: &mut ChaCha8Rng, key: char, len: usize) -> String {
    (1..len).map(|_| random_digit(rng)).chain(std::iter::once(key)).collect()
}

/// Draws `n` distinct codes.
fn distinct_codes(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let c = random_code(rng, len);
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

pub fn synth_task_generate(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    if spec.n_keys < 2 || spec.n_keys > 26 {
        return Err(Error::Config("n_keys must be between 2 and 26".into()));
    }
    if spec.pool_size < spec.n_keys {
        return Err(Error::Config("pool_size must be at least n_keys".into()));
    }
    if spec.input_len == 0 || spec.code_len == 0 {
        return Err(Error::Config("input_len and code_len must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut letters: Vec<char> = ('A'..='Z').collect();
    letters.shuffle(&mut rng);
    let keys: Vec<char> = letters[..spec.n_keys].to_vec();
    let codes: BTreeMap<char, String> = keys
        .iter()
        .copied()
        .zip(distinct_codes(&mut rng, spec.n_keys, spec.code_len))
        .collect();

    let mut pool_keys: Vec<char> = if spec.balanced_pool {
        (0..spec.pool_size).map(|i| keys[i % spec.n_keys]).collect()
    } else {
        (0..spec.pool_size).map(|_| keys[rng.gen_range(0..spec.n_keys)]).collect()
    };
    pool_keys.shuffle(&mut rng);
    let make = |rng: &mut ChaCha8Rng, id: String, key: char| {
        Example::new(id, keyed_input(rng, key, spec.input_len), codes[&key].clone()).with_meta(KEY_META, key.to_string())
    };
    let pool: Vec<Example> = pool_keys
        .iter()
        .enumerate()
        .map(|(i, &k)| make(&mut rng, format!("p{i:04}"), k))
        .collect();
    let draw = |rng: &mut ChaCha8Rng, prefix: char, n: usize| -> Vec<Example> {
        (0..n)
            .map(|i| {
                let k = keys[rng.gen_range(0..spec.n_keys)];
                make(rng, format!("{prefix}{i:04}"), k)
            })
            .collect()
    };
    let queries = draw(&mut rng, 'q', spec.query_count);
    let test = draw(&mut rng, 't', spec.test_count);
    let task_id = format!("keymatch-{}", spec.seed);
    Ok(SyntheticTask {
        spec: spec.clone(),
        pool: TaskDataset::new(task_id.clone(), TaskKind::Generation, pool, synth_template(), Metric::ExactMatch)?,
        queries: TaskDataset::new(task_id.clone(), TaskKind::Generation, queries, synth_template(), Metric::ExactMatch)?,
        test: TaskDataset::new(task_id, TaskKind::Generation, test, synth_template(), Metric::ExactMatch)?,
        codes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainCorpusSpec {
    pub lines: usize,
    pub max_demos: usize,
    pub input_len: usize,
    pub code_len: usize,
    /// Most distinct keys used in one line (at least 2).
    pub max_line_keys: usize,
    /// Probability that the query's key appears among the line's demonstrations.
    pub match_prob: f64,
    pub seed: u64,
}

impl Default for PretrainCorpusSpec {
    fn default() -> Self {
        PretrainCorpusSpec {
            lines: 10_000,
            max_demos: 8,
            input_len: 4,
            code_len: 3,
            max_line_keys: 4,
            match_prob: 0.8,
            seed: 0,
        }
    }
}

/// In-context key-match lines with a fresh key-to-code mapping per line, so
/// the only way to predict a query's code is to find it among the demonstrations.
pub fn synth_pretrain_corpus(spec: &PretrainCorpusSpec) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.lines)
        .map(|_| {
            let n_demos = rng.gen_range(0..=spec.max_demos);
            let mut letters: Vec<char> = ('A'..='Z').collect();
            letters.shuffle(&mut rng);
            let n_line_keys = rng.gen_range(2..=spec.max_line_keys.clamp(2, 25));
            let keys = &letters[..n_line_keys];
            let codes = distinct_codes(&mut rng, n_line_keys + 1, spec.code_len);
            let demo_keys: Vec<usize> = (0..n_demos).map(|_| rng.gen_range(0..n_line_keys)).collect();
            let mut line = String::new();
            for &k in &demo_keys {
                line.push_str(&keyed_input(&mut rng, keys[k], spec.input_len));
                line.push_str(&codes[k]);
                line.push('\n');
            }
            let (qkey, qcode) = if !demo_keys.is_empty() && rng.gen_bool(spec.match_prob) {
                let k = demo_keys[rng.gen_range(0..demo_keys.len())];
                (keys[k], codes[k].clone())
            } else {
                // A key absent from the demonstrations, with its own code.
                let absent = letters
                    .iter()
                    .copied()
                    .find(|c| !demo_keys.iter().any(|&k| keys[k] == *c))
                    .expect("at most 25 keys in use");
                (absent, codes[n_line_keys].clone())
            };
            line.push_str(&keyed_input(&mut rng, qkey, spec.input_len));
            line.push_str(&qcode);
            line
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_pool_partitions_by_key() {
        let spec = SyntheticTaskSpec {
            n_keys: 2,
            pool_size: 10,
            query_count: 4,
            ..SyntheticTaskSpec::default()
        };
        let t = synth_task_generate(&spec).unwrap();
        let mut per_key: BTreeMap<String, usize> = BTreeMap::new();
        for e in &t.pool.examples {
            *per_key.entry(e.metadata[KEY_META].clone()).or_default() += 1;
            assert_eq!(e.target, t.codes[&e.input.chars().last().unwrap()]);
        }
        assert_eq!(per_key.values().copied().collect::<Vec<_>>(), [5, 5]);
        for q in &t.queries.examples {
            let useful = t.labels(q).iter().filter(|&&u| u).count();
            assert_eq!(useful, 5);
        }
    }

    #[test]
    fn same_seed_same_task() {
        let spec = SyntheticTaskSpec::default();
        let a = synth_task_generate(&spec).unwrap();
        let b = synth_task_generate(&spec).unwrap();
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.queries, b.queries);
        let c = synth_task_generate(&SyntheticTaskSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.pool, c.pool);
    }

    #[test]
    fn corpus_lines_have_fixed_block_structure() {
        let lines = synth_pretrain_corpus(&PretrainCorpusSpec {
            lines: 50,
            ..PretrainCorpusSpec::default()
        });
        for l in &lines {
            for block in l.split('\n') {
                assert_eq!(block.len(), 7);
                assert!(block[..3].chars().all(|c| c.is_ascii_digit()));
                assert!(block[3..4].chars().all(|c| c.is_ascii_uppercase()));
                assert!(block[4..].chars().all(|c| c.is_ascii_lowercase()));
            }
        }
    }
}
