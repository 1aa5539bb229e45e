//! The KTO-style objective shared by both training stages.
//!
//! For a batch of `n` pairs with policy/reference log-ratios `r_w`, `r_l`:
//!
//! ```text
//! L = -(1/n) Σ_i [ λ_w σ(β r_w,i - s_ref) + λ_l σ(s_ref - β r_l,i) ]
//! ```
//!
//! `s_ref` is a clamped, gradient-detached estimate of the policy/reference
//! KL computed on mismatched pairings inside the batch.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::corpus::{Example, TaskTemplate};
use crate::error::{Error, Result};
use crate::lm::ops::sigmoid;
use crate::lm::{answer_sequence, latent_sequence, Grads, KvPrefix, LatentPrompt, ModelState, ScoredSequence, TrainableMask};
use crate::preference::{AnswerPair, PreferencePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `log P(z | (x_k, y_k), x)`
    LatentGivenDemo,
    /// `log P(y | z, x)`
    AnswerGivenLatent,
}

/// One scored completion in either direction.
#[derive(Debug, Clone, Copy)]
pub enum KtoItem<'a> {
    Demo { demo: &'a Example, query: &'a Example },
    Answer { query: &'a Example, answer: &'a str },
}

impl<'a> KtoItem<'a> {
    pub fn direction(&self) -> Direction {
        match self {
            KtoItem::Demo { .. } => Direction::LatentGivenDemo,
            KtoItem::Answer { .. } => Direction::AnswerGivenLatent,
        }
    }

    fn key(&self) -> (Direction, String, String) {
        match self {
            KtoItem::Demo { demo, query } => (self.direction(), demo.id.clone(), query.id.clone()),
            KtoItem::Answer { query, answer } => (self.direction(), query.id.clone(), answer.to_string()),
        }
    }

    fn label(&self) -> String {
        match self {
            KtoItem::Demo { demo, query } => format!("query {} demo {}", query.id, demo.id),
            KtoItem::Answer { query, answer } => format!("query {} answer {answer:?}", query.id),
        }
    }

    pub fn sequence(&self, model: &ModelState, latent: &LatentPrompt, template: &TaskTemplate) -> Result<ScoredSequence> {
        match self {
            KtoItem::Demo { demo, query } => latent_sequence(model, latent, demo, query, template),
            KtoItem::Answer { query, answer } => answer_sequence(model, latent, query, answer, template),
        }
    }
}

/// A batch for one of the two stages.
#[derive(Debug, Clone, Copy)]
pub enum KtoBatch<'a> {
    Demo(&'a [PreferencePair]),
    Answer(&'a [AnswerPair]),
}

impl<'a> KtoBatch<'a> {
    pub fn len(&self) -> usize {
        match self {
            KtoBatch::Demo(b) => b.len(),
            KtoBatch::Answer(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn query(&self, i: usize) -> &'a Example {
        match self {
            KtoBatch::Demo(b) => &b[i].query,
            KtoBatch::Answer(b) => &b[i].query,
        }
    }

    /// The desirable and undesirable items of pair `i`.
    fn items(&self, i: usize) -> (KtoItem<'a>, KtoItem<'a>) {
        match *self {
            KtoBatch::Demo(b) => (
                KtoItem::Demo {
                    demo: &b[i].preferred,
                    query: &b[i].query,
                },
                KtoItem::Demo {
                    demo: &b[i].non_preferred,
                    query: &b[i].query,
                },
            ),
            KtoBatch::Answer(b) => (
                KtoItem::Answer {
                    query: &b[i].query,
                    answer: &b[i].y_w,
                },
                KtoItem::Answer {
                    query: &b[i].query,
                    answer: &b[i].y_l,
                },
            ),
        }
    }

    /// Both completions of pair `i` re-attached to the context of the next
    /// pair (cyclically) that belongs to a different query.
    fn mismatched(&self, i: usize) -> Option<[KtoItem<'a>; 2]> {
        let n = self.len();
        let own = &self.query(i).id;
        let j = (1..n).map(|o| (i + o) % n).find(|&j| &self.query(j).id != own)?;
        let other = self.query(j);
        Some(match *self {
            KtoBatch::Demo(b) => [
                KtoItem::Demo {
                    demo: &b[i].preferred,
                    query: other,
                },
                KtoItem::Demo {
                    demo: &b[i].non_preferred,
                    query: other,
                },
            ],
            KtoBatch::Answer(b) => [
                KtoItem::Answer {
                    query: other,
                    answer: &b[i].y_w,
                },
                KtoItem::Answer {
                    query: other,
                    answer: &b[i].y_l,
                },
            ],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KTOBatchStats {
    pub ref_baseline: f64,
    pub mean_log_ratio_preferred: f64,
    pub mean_log_ratio_nonpreferred: f64,
    pub loss_value: f64,
    pub n_pairs: usize,
}

/// How the KL baseline of a batch is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    Estimate,
    /// Use this value; lets finite-difference checks hold the detached term fixed.
    Fixed(f64),
}

/// `max(0, β · mean(ratios))`; zero for an empty slice.
pub fn baseline_from_ratios(ratios: &[f64], beta: f64) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    (beta * ratios.iter().sum::<f64>() / ratios.len() as f64).max(0.0)
}

/// Value and partial derivatives of the objective in the log-ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: f64,
    pub d_rw: Vec<f64>,
    pub d_rl: Vec<f64>,
}

pub fn kto_objective(r_w: &[f64], r_l: &[f64], s_ref: f64, beta: f64, lambda_w: f64, lambda_l: f64) -> Objective {
    assert_eq!(r_w.len(), r_l.len());
    let n = r_w.len() as f64;
    let mut loss = 0.0;
    let mut d_rw = Vec::with_capacity(r_w.len());
    let mut d_rl = Vec::with_capacity(r_l.len());
    for (&w, &l) in r_w.iter().zip(r_l) {
        let sw = sigmoid(beta * w - s_ref);
        let sl = sigmoid(s_ref - beta * l);
        loss -= lambda_w * sw + lambda_l * sl;
        d_rw.push(-lambda_w * sw * (1.0 - sw) * beta / n);
        d_rl.push(lambda_l * sl * (1.0 - sl) * beta / n);
    }
    Objective {
        loss: loss / n,
        d_rw,
        d_rl,
    }
}

/// Models and rendering shared by every loss evaluation.
#[derive(Clone, Copy)]
pub struct LossInputs<'a> {
    pub model: &'a ModelState,
    pub reference: &'a ModelState,
    pub latent: &'a LatentPrompt,
    pub template: &'a TaskTemplate,
}

fn check_compatible(model: &ModelState, reference: &ModelState) -> Result<()> {
    if model.vocab != reference.vocab {
        return Err(Error::Config(
            "policy and reference vocabularies differ (latent tokens must be installed before the snapshot)".into(),
        ));
    }
    if model.config != reference.config {
        return Err(Error::Config("policy and reference architectures differ".into()));
    }
    Ok(())
}

/// `log P_M(item) - log P_ref(item)`.
pub fn log_ratio(inputs: LossInputs<'_>, item: KtoItem<'_>) -> Result<f64> {
    check_compatible(inputs.model, inputs.reference)?;
    let seq = item.sequence(inputs.model, inputs.latent, inputs.template)?;
    Ok(inputs.model.score(&seq)?.value - inputs.reference.score(&seq)?.value)
}

/// Caches that stay valid while only the latent rows change: reference
/// scores, and key/value prefixes of contexts free of latent tokens.
#[derive(Default)]
pub(crate) struct ScoreMemo {
    reference: HashMap<(Direction, String, String), f64>,
    prefixes: HashMap<(Direction, String, String), KvPrefix>,
}

impl ScoreMemo {
    fn reference_score(&mut self, inputs: LossInputs<'_>, item: &KtoItem<'_>, seq: &ScoredSequence) -> Result<f64> {
        let key = item.key();
        if let Some(v) = self.reference.get(&key) {
            return Ok(*v);
        }
        let v = inputs.reference.score(seq)?.value;
        self.reference.insert(key, v);
        Ok(v)
    }

    /// Policy log-probability; with `grad`, `∇ log P` is added into it.
    fn policy_score(
        &mut self,
        inputs: LossInputs<'_>,
        item: &KtoItem<'_>,
        seq: &ScoredSequence,
        grad: Option<&mut Grads>,
        reuse_prefix: bool,
    ) -> Result<f64> {
        let model = inputs.model;
        let prefix_ok = reuse_prefix
            && match &model.trainable {
            TrainableMask::EmbeddingRows(rows) => {
                seq.context_len > 1 && !seq.tokens[..seq.context_len - 1].iter().any(|t| rows.contains(t))
            }
                TrainableMask::All => false,
            };
        let grad = grad.map(|g| (1.0, g));
        if !prefix_ok {
            return Ok(model.score_with_grad(seq, None, grad)?.value);
        }
        let key = item.key();
        if !self.prefixes.contains_key(&key) {
            let p = model.build_prefix(&seq.tokens[..seq.context_len - 1])?;
            self.prefixes.insert(key.clone(), p);
        }
        Ok(model.score_with_grad(seq, self.prefixes.get(&key), grad)?.value)
    }

    /// Prefixes are kept only for `reuse_prefix` items, which recur every epoch.
    fn ratio(
        &mut self,
        inputs: LossInputs<'_>,
        item: &KtoItem<'_>,
        grad: Option<&mut Grads>,
        reuse_prefix: bool,
    ) -> Result<f64> {
        let seq = item.sequence(inputs.model, inputs.latent, inputs.template)?;
        let r = self.reference_score(inputs, item, &seq)?;
        let p = self.policy_score(inputs, item, &seq, grad, reuse_prefix)?;
        Ok(p - r)
    }

    pub(crate) fn baseline(&mut self, inputs: LossInputs<'_>, batch: KtoBatch<'_>, beta: f64) -> Result<f64> {
        let mut ratios = Vec::new();
        for i in 0..batch.len() {
            if let Some(items) = batch.mismatched(i) {
                for item in &items {
                    ratios.push(self.ratio(inputs, item, None, false)?);
                }
            }
        }
        if ratios.is_empty() {
            log::warn!("batch has no second query to mismatch against; KL baseline set to 0");
        }
        Ok(baseline_from_ratios(&ratios, beta))
    }

    pub(crate) fn loss(
        &mut self,
        inputs: LossInputs<'_>,
        batch: KtoBatch<'_>,
        config: &TrainConfig,
        baseline: Baseline,
        want_grad: bool,
        step: usize,
    ) -> Result<(KTOBatchStats, Option<Grads>)> {
        check_compatible(inputs.model, inputs.reference)?;
        if batch.is_empty() {
            return Err(Error::Validation("loss batch is empty".into()));
        }
        let s_ref = match baseline {
            Baseline::Estimate => self.baseline(inputs, batch, config.beta)?,
            Baseline::Fixed(v) => v,
        };
        let n = batch.len();
        let mut r_w = Vec::with_capacity(n);
        let mut r_l = Vec::with_capacity(n);
        let mut g_w = Vec::new();
        let mut g_l = Vec::new();
        for i in 0..n {
            let (w, l) = batch.items(i);
            for (item, rs, gs) in [(w, &mut r_w, &mut g_w), (l, &mut r_l, &mut g_l)] {
                let mut g = want_grad.then(|| Grads::zeros(inputs.model));
                let r = self.ratio(inputs, &item, g.as_mut(), true)?;
                if !r.is_finite() {
                    return Err(Error::Training {
                        step,
                        message: format!("non-finite log-ratio for {}", item.label()),
                    });
                }
                rs.push(r);
                if let Some(g) = g {
                    gs.push(g);
                }
            }
        }
        let obj = kto_objective(&r_w, &r_l, s_ref, config.beta, config.lambda_w, config.lambda_l);
        if !obj.loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("non-finite loss for batch starting at query {}", batch.query(0).id),
            });
        }
        let grads = want_grad.then(|| {
            let mut total = Grads::zeros(inputs.model);
            for (g, c) in g_w.iter().zip(&obj.d_rw).chain(g_l.iter().zip(&obj.d_rl)) {
                total.add_scaled(g, *c);
            }
            total
        });
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok((
            KTOBatchStats {
                ref_baseline: s_ref,
                mean_log_ratio_preferred: mean(&r_w),
                mean_log_ratio_nonpreferred: mean(&r_l),
                loss_value: obj.loss,
                n_pairs: n,
            },
            grads,
        ))
    }
}

/// KL baseline of `batch` from mismatched pairings, clamped at 0.
pub fn estimate_ref_baseline(inputs: LossInputs<'_>, batch: KtoBatch<'_>, beta: f64) -> Result<f64> {
    check_compatible(inputs.model, inputs.reference)?;
    ScoreMemo::default().baseline(inputs, batch, beta)
}

/// Demonstration-level loss over preference pairs.
pub fn demo_loss(batch: &[PreferencePair], inputs: LossInputs<'_>, config: &TrainConfig) -> Result<KTOBatchStats> {
    Ok(ScoreMemo::default()
        .loss(inputs, KtoBatch::Demo(batch), config, Baseline::Estimate, false, 0)?
        .0)
}

/// Answer-level loss over answer pairs.
pub fn answer_loss(batch: &[AnswerPair], inputs: LossInputs<'_>, config: &TrainConfig) -> Result<KTOBatchStats> {
    Ok(ScoreMemo::default()
        .loss(inputs, KtoBatch::Answer(batch), config, Baseline::Estimate, false, 0)?
        .0)
}

/// Loss and its gradient with respect to the model's trainable parameters.
pub fn loss_and_grad(
    batch: KtoBatch<'_>,
    inputs: LossInputs<'_>,
    config: &TrainConfig,
    baseline: Baseline,
) -> Result<(KTOBatchStats, Grads)> {
    let (stats, g) = ScoreMemo::default().loss(inputs, batch, config, baseline, true, 0)?;
    Ok((stats, g.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_point_is_minus_half_lambda_sum() {
        let o = kto_objective(&[0.0, 0.0], &[0.0, 0.0], 0.0, 0.1, 1.0, 1.0);
        assert_eq!(o.loss, -1.0);
        let o = kto_objective(&[0.0], &[0.0], 0.0, 0.1, 0.7, 0.3);
        assert!((o.loss + 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_sigmoids() {
        let o = kto_objective(&[2.0], &[-1.0], 0.0, 0.1, 1.0, 1.0);
        let expected = -(1.0 / (1.0 + (-0.2f64).exp()) + 1.0 / (1.0 + (-0.1f64).exp()));
        assert!((o.loss - expected).abs() < 1e-15);
        assert!((o.loss + 1.074813).abs() < 1e-6);
    }

    #[test]
    fn saturation_limit() {
        let o = kto_objective(&[1e4], &[0.0], 0.0, 0.1, 1.0, 0.0);
        assert!((o.loss + 1.0).abs() < 1e-12);
    }

    #[test]
    fn derivative_signs_and_values() {
        let (rw, rl, s, b) = (0.7, -0.4, 0.05, 0.1);
        let o = kto_objective(&[rw], &[rl], s, b, 1.0, 1.0);
        assert!(o.d_rw[0] < 0.0 && o.d_rl[0] > 0.0);
        let h = 1e-6;
        let f = |w: f64, l: f64| kto_objective(&[w], &[l], s, b, 1.0, 1.0).loss;
        let fd_w = (f(rw + h, rl) - f(rw - h, rl)) / (2.0 * h);
        let fd_l = (f(rw, rl + h) - f(rw, rl - h)) / (2.0 * h);
        assert!((fd_w - o.d_rw[0]).abs() < 1e-9);
        assert!((fd_l - o.d_rl[0]).abs() < 1e-9);
    }

    #[test]
    fn baseline_hand_value_and_clamp() {
        assert!((baseline_from_ratios(&[0.2, -0.1, 0.3, 0.0], 0.1) - 0.01).abs() < 1e-15);
        assert_eq!(baseline_from_ratios(&[-0.2, -0.1], 0.1), 0.0);
        assert_eq!(baseline_from_ratios(&[], 0.1), 0.0);
    }
}
