//! Generative preference learning for in-context demonstration selection.
//!
//! A latent prompt `z` (a few trainable special tokens) is trained so that a
//! language model assigns high probability `P(z | demo, query)` to
//! demonstrations that help it answer the query. Training alternates two
//! KTO-style objectives against a frozen reference copy of the model: a
//! demonstration-level loss over preferred / non-preferred demonstrations
//! scored by LM feedback, and an answer-level loss over correct / wrong
//! answers. At inference the pool is shortlisted and the top-K candidates by
//! `P(z | demo, query)` become the in-context demonstrations.
//!
//! Modules, bottom-up:
//! - [`corpus`]: datasets, templates, prompt assembly, metrics
//! - [`lm`]: the tiny transformer scorer, latent prompt, checkpoints
//! - [`shortlist`]: BM25 and embedding pre-retrieval
//! - [`preference`]: preference scores, demonstration pairs, answer pairs
//! - [`kto`]: the two losses, KL baselines and the alternating trainer
//! - [`selector`]: inference-time selection and ordering
//! - [`eval`]: evaluation harness, analyses, ablations, synthetic tasks
//! - [`runtime`]: score cache, run manifests and the command line

// `!(x > 0.0)` is used on purpose: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod eval;
pub mod kto;
pub mod lm;
pub mod preference;
pub mod runtime;
pub mod selector;
pub mod shortlist;

pub use error::{Error, Result};
