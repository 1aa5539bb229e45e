//! Conditional log-likelihoods used by preference scoring, training and selection.

use serde::{Deserialize, Serialize};

use super::latent::LatentPrompt;
use super::model::{Grads, KvPrefix, ModelState};
use super::tokenizer::TokenId;
use crate::corpus::{assemble_prompt, render_example, Example, TaskTemplate};
use crate::error::{Error, Result};

/// Sum of natural-log token probabilities of a teacher-forced target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProb {
    pub value: f64,
    pub token_count: usize,
}

impl LogProb {
    pub const EMPTY: LogProb = LogProb {
        value: 0.0,
        token_count: 0,
    };

    pub fn per_token(&self) -> f64 {
        if self.token_count == 0 {
            0.0
        } else {
            self.value / self.token_count as f64
        }
    }
}

/// A tokenized context followed by a target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredSequence {
    pub tokens: Vec<TokenId>,
    pub context_len: usize,
}

impl ScoredSequence {
    pub fn new(context: &[TokenId], target: &[TokenId]) -> Self {
        let mut tokens = Vec::with_capacity(context.len() + target.len());
        tokens.extend_from_slice(context);
        tokens.extend_from_slice(target);
        ScoredSequence {
            tokens,
            context_len: context.len(),
        }
    }

    pub fn context(&self) -> &[TokenId] {
        &self.tokens[..self.context_len]
    }

    pub fn target(&self) -> &[TokenId] {
        &self.tokens[self.context_len..]
    }
}

impl ModelState {
    /// `<bos>` followed by the encoded text.
    pub fn encode_prompt(&self, text: &str) -> Vec<TokenId> {
        let mut ids = vec![self.vocab.bos()];
        ids.extend(self.vocab.encode(text));
        ids
    }

    fn check_fits(&self, seq: &ScoredSequence) -> Result<()> {
        if seq.tokens.len() > self.config.ctx_len {
            return Err(Error::Window {
                context: seq.context_len,
                target: seq.tokens.len() - seq.context_len,
                limit: self.config.ctx_len,
            });
        }
        Ok(())
    }

    pub fn score(&self, seq: &ScoredSequence) -> Result<LogProb> {
        self.check_fits(seq)?;
        let logps = self.logprob_pass(&seq.tokens, seq.context_len, None, None)?;
        Ok(LogProb {
            value: logps.iter().sum(),
            token_count: logps.len(),
        })
    }

    /// Scores `seq` continuing from `prefix` and, when `grad` is given,
    /// accumulates `coef · ∇ log p(target)` into it.
    pub fn score_with_grad(
        &self,
        seq: &ScoredSequence,
        prefix: Option<&KvPrefix>,
        grad: Option<(f64, &mut Grads)>,
    ) -> Result<LogProb> {
        self.check_fits(seq)?;
        let logps = self.logprob_pass(&seq.tokens, seq.context_len, prefix, grad)?;
        Ok(LogProb {
            value: logps.iter().sum(),
            token_count: logps.len(),
        })
    }
}

/// `Σ_t log p(target_t | context, target_<t)`, teacher-forced.
pub fn sequence_logprob(model: &ModelState, context: &[TokenId], target: &[TokenId]) -> Result<LogProb> {
    model.score(&ScoredSequence::new(context, target))
}

/// Context: one demonstration (with its target) then the query (without);
/// target: the latent tokens.
pub fn latent_sequence(
    model: &ModelState,
    latent: &LatentPrompt,
    demo: &Example,
    query: &Example,
    template: &TaskTemplate,
) -> Result<ScoredSequence> {
    let prompt = assemble_prompt(&[demo], query, template)?;
    Ok(ScoredSequence::new(&model.encode_prompt(&prompt), &latent.token_ids))
}

/// Context: the latent tokens then the query (without target); target: `answer`.
pub fn answer_sequence(
    model: &ModelState,
    latent: &LatentPrompt,
    query: &Example,
    answer: &str,
    template: &TaskTemplate,
) -> Result<ScoredSequence> {
    let mut context = vec![model.vocab.bos()];
    context.extend_from_slice(&latent.token_ids);
    context.extend(model.vocab.encode(&render_example(template, query, false)?));
    Ok(ScoredSequence::new(&context, &model.vocab.encode(answer)))
}

/// `log P(z | (x_k, y_k), x)`.
pub fn logprob_latent_given(
    model: &ModelState,
    latent: &LatentPrompt,
    demo: &Example,
    query: &Example,
    template: &TaskTemplate,
) -> Result<LogProb> {
    model.score(&latent_sequence(model, latent, demo, query, template)?)
}

/// `log P(y | z, x)`.
pub fn logprob_answer_given(
    model: &ModelState,
    latent: &LatentPrompt,
    query: &Example,
    answer: &str,
    template: &TaskTemplate,
) -> Result<LogProb> {
    model.score(&answer_sequence(model, latent, query, answer, template)?)
}

/// Argmax decoding until `<eos>` or `max_len` tokens. Special tokens other
/// than `<eos>` are never emitted.
pub fn greedy_generate(model: &ModelState, context: &[TokenId], max_len: usize) -> Result<String> {
    if context.is_empty() {
        return Err(Error::Scoring("generation needs a non-empty context".into()));
    }
    let eos = model.vocab.eos();
    let banned: Vec<TokenId> = (0..model.vocab.len())
        .filter(|&t| t != eos && model.vocab.token(t).chars().count() > 1)
        .collect();
    let mut prefix = model.build_prefix(&context[..context.len() - 1])?;
    let mut last = context[context.len() - 1];
    let mut out = Vec::new();
    for _ in 0..max_len {
        if prefix.len() + 1 > model.config.ctx_len {
            break;
        }
        let trace = model.forward(&[last], Some(&prefix))?;
        let mut probs = model.next_token_probs(&trace.hidden, &[0]).remove(0);
        for &b in &banned {
            probs[b] = f64::NEG_INFINITY;
        }
        let next = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0;
        if next == eos {
            break;
        }
        out.push(next);
        prefix.extend(&trace);
        last = next;
    }
    Ok(model.vocab.decode(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_latent, ModelConfig, Vocabulary};

    /// A model whose logits are identically zero: every next-token distribution is uniform.
    fn uniform_model(vocab: Vocabulary) -> ModelState {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            ctx_len: 64,
            ..ModelConfig::default()
        };
        let mut m = ModelState::init(cfg, vocab, 0).unwrap();
        let r = m.layout.tok_emb.clone();
        m.params[r].fill(0.0);
        m
    }

    /// Vocabulary of exactly `n` tokens: 3 specials plus `n - 3` characters.
    fn vocab_of(n: usize) -> Vocabulary {
        Vocabulary::from_chars((0..n - 3).map(|i| char::from(b'a' + i as u8)))
    }

    #[test]
    fn uniform_model_gives_t_log_v() {
        let m = uniform_model(vocab_of(16));
        let lp = sequence_logprob(&m, &[0, 3], &[4, 5, 6]).unwrap();
        assert!((lp.value + 3.0 * 16f64.ln()).abs() < 1e-12);
        assert_eq!(lp.token_count, 3);
    }

    #[test]
    fn empty_target_is_zero() {
        let m = uniform_model(vocab_of(16));
        assert_eq!(sequence_logprob(&m, &[0, 3], &[]).unwrap(), LogProb::EMPTY);
    }

    #[test]
    fn hand_softmax_chain_on_two_logit_head() {
        // Zero every output row except two, so logits are [h·e_a, h·e_b, 0, ...].
        // The final LayerNorm has gain 0 and a fixed bias, so h is the bias.
        let mut m = uniform_model(vocab_of(5));
        let d = m.d_model();
        let bias: Vec<f64> = (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let g = m.layout.lnf_g.clone();
        m.params[g].fill(0.0);
        let b = m.layout.lnf_b.clone();
        m.params[b].copy_from_slice(&bias);
        m.embedding_row_mut(3)[0] = 2.0; // logit 2 for token 3
        m.embedding_row_mut(4)[0] = -1.0; // logit -1 for token 4
        let z = 2f64.exp() + (-1f64).exp() + 3.0;
        let expected = (2.0 - z.ln()) + (-1.0 - z.ln());
        let lp = sequence_logprob(&m, &[0], &[3, 4]).unwrap();
        assert!((lp.value - expected).abs() < 1e-12, "{} vs {expected}", lp.value);
    }

    #[test]
    fn answer_path_equals_explicit_concatenation() {
        let mut m = uniform_model(Vocabulary::ascii());
        let r = m.layout.tok_emb.clone();
        for (i, p) in m.params[r].iter_mut().enumerate() {
            *p = ((i * 7919) % 101) as f64 / 500.0 - 0.1;
        }
        let latent = init_latent(3, &mut m, 1).unwrap();
        let t = TaskTemplate::new("Q: {input}", " A: {answer}", "\n");
        let q = Example::new("q", "two plus two", "four");
        let via_op = logprob_answer_given(&m, &latent, &q, "four", &t).unwrap();
        let mut ctx = vec![m.vocab.bos()];
        ctx.extend(&latent.token_ids);
        ctx.extend(m.vocab.encode("Q: two plus two A: "));
        let direct = sequence_logprob(&m, &ctx, &m.vocab.encode("four")).unwrap();
        assert!((via_op.value - direct.value).abs() < 1e-9);
        assert_eq!(logprob_answer_given(&m, &latent, &q, "", &t).unwrap().value, 0.0);
    }

    #[test]
    fn uniform_answer_two_tokens() {
        let mut m = uniform_model(vocab_of(13));
        // 13 + 3 latent rows (all zero after reset below) = 16
        let latent = init_latent(3, &mut m, 0).unwrap();
        let r = m.layout.tok_emb.clone();
        m.params[r].fill(0.0);
        let t = TaskTemplate::new("{input}", "{answer}", "\n");
        let q = Example::new("q", "ab", "cd");
        let lp = logprob_answer_given(&m, &latent, &q, "cd", &t).unwrap();
        assert!((lp.value + 2.0 * 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_respects_bounds_and_is_deterministic() {
        let m = ModelState::init(
            ModelConfig {
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                ctx_len: 32,
                ..ModelConfig::default()
            },
            Vocabulary::from_chars("abc".chars()),
            4,
        )
        .unwrap();
        let ctx = m.encode_prompt("ab");
        let a = greedy_generate(&m, &ctx, 5).unwrap();
        assert_eq!(a, greedy_generate(&m, &ctx, 5).unwrap());
        assert!(a.chars().count() <= 5);
    }

    #[test]
    fn greedy_stops_at_eos() {
        let mut m = uniform_model(vocab_of(6));
        let eos = m.vocab.eos();
        let g = m.layout.lnf_g.clone();
        m.params[g].fill(0.0);
        let b = m.layout.lnf_b.clone();
        m.params[b][0] = 1.0;
        m.embedding_row_mut(eos)[0] = 5.0;
        assert_eq!(greedy_generate(&m, &[0, 3], 10).unwrap(), "");
    }

    #[test]
    fn greedy_max_len_one_emits_one_token() {
        let mut m = uniform_model(vocab_of(6));
        let g = m.layout.lnf_g.clone();
        m.params[g].fill(0.0);
        let b = m.layout.lnf_b.clone();
        m.params[b][0] = 1.0;
        m.embedding_row_mut(4)[0] = 5.0;
        assert_eq!(greedy_generate(&m, &[0, 3], 1).unwrap(), "b");
    }
}
