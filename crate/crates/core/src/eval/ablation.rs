//! Objective ablations: each variant retrains the latent from the same
//! initialization and is evaluated with the same protocol.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::analysis::top1_hit_rate;
use super::evaluate::evaluate_selector;
use crate::corpus::{DemonstrationPool, Example, TaskDataset};
use crate::error::{Error, Result};
use crate::kto::{train, TrainConfig};
use crate::lm::{init_latent, ModelState, DEFAULT_LATENT_LEN};
use crate::selector::{GenIclSelector, SelectionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoNonpreferred,
    NoAnswerLoss,
    NoDemoLoss,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoNonpreferred,
        Variant::NoAnswerLoss,
        Variant::NoDemoLoss,
    ];

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoNonpreferred => c.lambda_l = 0.0,
            Variant::NoAnswerLoss => c.answer_stage = false,
            Variant::NoDemoLoss => c.demo_stage = false,
        }
        c
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNonpreferred => "no_nonpreferred",
            Variant::NoAnswerLoss => "no_answer_loss",
            Variant::NoDemoLoss => "no_demo_loss",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    /// Content hash of the model the variant started from.
    pub init_hash: String,
    pub score: f64,
    /// Top-1 oracle-useful hit rate, when an oracle was given.
    pub hit_rate: Option<f64>,
    pub demo_updates: usize,
    pub answer_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: Variant,
    pub mean_score: f64,
    pub mean_hit_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn summary_for(&self, v: Variant) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }

    /// Tab-separated `variant, mean_score, mean_hit_rate`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tmean_score\tmean_hit_rate\n");
        for r in &self.summary {
            let hit = r.mean_hit_rate.map_or_else(|| "-".to_string(), |h| format!("{h:.6}"));
            s.push_str(&format!("{}\t{:.6}\t{}\n", r.variant, r.mean_score, hit));
        }
        s
    }
}

/// Oracle usefulness of a demonstration for a query.
pub type UsefulFn<'a> = &'a dyn Fn(&Example, &Example) -> bool;

/// Inputs shared by every variant.
pub struct AblationInputs<'a> {
    /// Training queries.
    pub train: &'a TaskDataset,
    /// Evaluation queries.
    pub eval: &'a TaskDataset,
    pub pool: &'a Arc<DemonstrationPool>,
    /// Pretrained model without a latent prompt.
    pub pretrained: &'a ModelState,
    pub selection: SelectionConfig,
    pub useful: Option<UsefulFn<'a>>,
}

/// The pretrained model with a fresh latent prompt for `seed`.
pub fn initial_model(pretrained: &ModelState, seed: u64) -> Result<ModelState> {
    let mut m = pretrained.clone();
    init_latent(DEFAULT_LATENT_LEN, &mut m, seed)?;
    Ok(m)
}

/// Trains and evaluates every variant once per seed.
pub fn ablation_suite(
    inputs: &AblationInputs<'_>,
    variants: &[Variant],
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if !inputs.pretrained.latent_tokens.is_empty() {
        return Err(Error::Config("ablations start from a model without a latent prompt".into()));
    }
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        let init = initial_model(inputs.pretrained, seed)?;
        let init_hash = init.content_hash();
        let latent = crate::lm::LatentPrompt::from_model(&init).expect("latent just installed");
        for &v in variants {
            let start = init.clone();
            if start.content_hash() != init_hash {
                return Err(Error::Validation(format!("variant {v} does not share the initialization")));
            }
            let cfg = TrainConfig {
                seed,
                ..v.apply(config)
            };
            let outcome = train(inputs.train, inputs.pool, start, &latent, &cfg)?;
            let model = Arc::new(outcome.model);
            let mut sel = GenIclSelector::new(
                model.clone(),
                inputs.pool.clone(),
                inputs.eval.template.clone(),
                cfg.shortlist_n,
            )?;
            let (report, _) = evaluate_selector(&mut sel, inputs.eval, inputs.pool, &model, &inputs.selection, seed)?;
            let hit_rate = match inputs.useful {
                Some(f) => Some(top1_hit_rate(&mut sel, inputs.eval, inputs.pool, f)?),
                None => None,
            };
            log::info!("ablation {v} seed {seed}: score {:.4} hit {:?}", report.score, hit_rate);
            rows.push(AblationRow {
                variant: v,
                seed,
                init_hash: init_hash.clone(),
                score: report.score,
                hit_rate,
                demo_updates: outcome.log.demo_updates,
                answer_updates: outcome.log.answer_updates,
            });
        }
    }
    let summary = variants
        .iter()
        .map(|&v| {
            let of: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
            let n = of.len().max(1) as f64;
            AblationSummary {
                variant: v,
                mean_score: of.iter().map(|r| r.score).sum::<f64>() / n,
                mean_hit_rate: inputs
                    .useful
                    .map(|_| of.iter().filter_map(|r| r.hit_rate).sum::<f64>() / n),
            }
        })
        .collect();
    Ok(AblationTable { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_switch_one_knob() {
        let base = TrainConfig::default();
        assert_eq!(Variant::Full.apply(&base), base);
        assert_eq!(Variant::NoNonpreferred.apply(&base).lambda_l, 0.0);
        assert!(!Variant::NoAnswerLoss.apply(&base).answer_stage);
        assert!(!Variant::NoDemoLoss.apply(&base).demo_stage);
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }
}
