//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes   "GICLCKPT"
//! version   u32 LE
//! hdr_len   u64 LE
//! header    hdr_len bytes of JSON (config, vocabulary, latent tokens, mask, seed, count, sha256)
//! params    count × f64 LE
//! ```
//! Parameters are stored as raw bits, so a load reproduces every score exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::latent::LatentPrompt;
use super::model::{ModelConfig, ModelState, TrainableMask};
use super::tokenizer::{TokenId, Vocabulary};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GICLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    latent_tokens: Vec<TokenId>,
    trainable: TrainableMask,
    seed: u64,
    param_count: usize,
    params_sha256: String,
}

fn params_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl ModelState {
    /// Content hash over architecture, vocabulary, latent tokens and parameter bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(serde_json::to_vec(&self.vocab).expect("vocab serializes"));
        h.update(serde_json::to_vec(&self.latent_tokens).expect("ids serialize"));
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            latent_tokens: self.latent_tokens.clone(),
            trainable: self.trainable.clone(),
            seed: self.seed,
            param_count: self.params.len(),
            params_sha256: params_digest(&self.params),
        };
        let hdr = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + hdr.len() + self.params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hdr.len() as u64).to_le_bytes());
        out.extend_from_slice(&hdr);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                message: "not a checkpoint file (bad magic)".into(),
            });
        }
        let version = u32::from_le_bytes(cur.take(4, "format version")?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hdr_len = u64::from_le_bytes(cur.take(8, "header length")?.try_into().unwrap()) as usize;
        let hdr_at = cur.pos;
        let header: Header = serde_json::from_slice(cur.take(hdr_len, "header")?).map_err(|e| Error::Checkpoint {
            offset: hdr_at as u64,
            message: format!("bad header: {e}"),
        })?;
        let mut params = Vec::with_capacity(header.param_count);
        for _ in 0..header.param_count {
            params.push(f64::from_le_bytes(cur.take(8, "parameters")?.try_into().unwrap()));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint {
                offset: cur.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - cur.pos),
            });
        }
        if params_digest(&params) != header.params_sha256 {
            return Err(Error::Checkpoint {
                offset: (hdr_at + hdr_len) as u64,
                message: "parameter checksum mismatch".into(),
            });
        }
        ModelState::from_parts(
            header.config,
            header.vocab,
            params,
            header.trainable,
            header.latent_tokens,
            header.seed,
        )
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.bytes.len() as u64,
                message: format!(
                    "file truncated while reading {what}: needed {n} bytes at offset {}",
                    self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ModelState) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_checkpoint_bytes()).map_err(|e| Error::io_at(path, e))
}

/// Loads a model and the latent prompt it carries, if any.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelState, Option<LatentPrompt>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    let model = ModelState::from_checkpoint_bytes(&bytes)?;
    let latent = LatentPrompt::from_model(&model);
    Ok((model, latent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_latent, sequence_logprob};

    fn model() -> ModelState {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            ctx_len: 32,
            ..ModelConfig::default()
        };
        let mut m = ModelState::init(cfg, Vocabulary::ascii(), 3).unwrap();
        init_latent(4, &mut m, 1).unwrap();
        m
    }

    #[test]
    fn round_trip_preserves_scores_bitwise() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &m).unwrap();
        let (back, latent) = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(latent.unwrap().token_ids, m.latent_tokens);
        assert_eq!(back.content_hash(), m.content_hash());
        let ctx = m.encode_prompt("probe ");
        let tgt = m.vocab.encode("text");
        let a = sequence_logprob(&m, &ctx, &tgt).unwrap().value;
        let b = sequence_logprob(&back, &ctx, &tgt).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn truncated_file_names_offset() {
        let bytes = model().to_checkpoint_bytes();
        let cut = &bytes[..bytes.len() - 13];
        match ModelState::from_checkpoint_bytes(cut) {
            Err(Error::Checkpoint { offset, message }) => {
                assert_eq!(offset, cut.len() as u64);
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = model().to_checkpoint_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            ModelState::from_checkpoint_bytes(&bytes),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn corrupted_parameters_fail_checksum() {
        let mut bytes = model().to_checkpoint_bytes();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(matches!(ModelState::from_checkpoint_bytes(&bytes), Err(Error::Checkpoint { .. })));
    }
}
