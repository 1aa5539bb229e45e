//! The tiny autoregressive scorer, its frozen reference copy and the latent prompt.

mod checkpoint;
mod latent;
mod model;
pub(crate) mod ops;
mod optim;
mod pretrain;
mod scoring;
mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use latent::{init_latent, snapshot_reference, FrozenModel, LatentPrompt, DEFAULT_LATENT_LEN};
pub use model::{Grads, KvPrefix, ModelConfig, ModelState, ParamSpec, TrainableMask};
pub use optim::{AdamW, LrSchedule};
pub use pretrain::{heldout_loss, pretrain_lm, PretrainConfig, PretrainReport};
pub use scoring::{
    answer_sequence, greedy_generate, latent_sequence, logprob_answer_given, logprob_latent_given,
    sequence_logprob, LogProb, ScoredSequence,
};
pub use tokenizer::{TokenId, Vocabulary, BOS, EOS, UNK};
