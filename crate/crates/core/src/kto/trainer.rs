//! Alternating two-stage training of the latent prompt.
//!
//! Each batch of queries first updates θ on the demonstration-level loss,
//! then on the answer-level loss, each with its own optimizer state and
//! learning rate. Preference pairs are scored once with the frozen reference
//! and reused; wrong answers are redrawn every epoch.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::loss::{Baseline, KTOBatchStats, KtoBatch, LossInputs, ScoreMemo};
use crate::corpus::{DemonstrationPool, Example, TaskDataset};
use crate::error::{Error, Result};
use crate::lm::{save_checkpoint, snapshot_reference, AdamW, LatentPrompt, LrSchedule, ModelState, TrainableMask};
use crate::preference::{build_answer_pair, build_demo_pairs, AnswerPair, PreferencePair, PreferenceScorer};
use crate::runtime::cache::ScoreCache;
use crate::runtime::hash::derive_seed;
use crate::shortlist::{resolve, EmbeddingIndex, LmEmbedder, TextEmbedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr_demo: f64,
    pub lr_answer: f64,
    /// Absent when the stage is disabled or the batch had no preference signal.
    pub demo: Option<KTOBatchStats>,
    pub answer: Option<KTOBatchStats>,
    /// `L_d + L_a` over the stages that ran.
    pub total_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    /// Batches whose demonstration step was skipped for lack of pairs.
    pub skipped_batches: usize,
    pub demo_updates: usize,
    pub answer_updates: usize,
    /// Queries whose shortlist scored uniformly.
    pub no_signal_queries: usize,
}

impl TrainingLog {
    /// One JSON record per step.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut w = BufWriter::new(f);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io_at(path, e))?;
        }
        w.flush().map_err(|e| Error::io_at(path, e))
    }

    pub fn demo_losses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.demo.map(|s| s.loss_value)).collect()
    }

    pub fn answer_losses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.answer.map(|s| s.loss_value)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub log: TrainingLog,
}

/// Training driver. Optional pieces are attached with the `with_*` methods.
pub struct Trainer<'a> {
    config: TrainConfig,
    cache: Option<&'a mut ScoreCache>,
    checkpoint_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig) -> Self {
        Trainer {
            config,
            cache: None,
            checkpoint_dir: None,
        }
    }

    pub fn with_cache(mut self, cache: &'a mut ScoreCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Trains `model`'s latent rows on the queries of `queries`, drawing
    /// demonstrations from `pool`.
    pub fn train(
        &mut self,
        queries: &TaskDataset,
        pool: &DemonstrationPool,
        mut model: ModelState,
        latent: &LatentPrompt,
    ) -> Result<TrainOutcome> {
        let cfg = self.config.clone();
        cfg.validate()?;
        if model.latent_tokens != latent.token_ids {
            return Err(Error::Config("latent prompt is not installed in the model".into()));
        }
        if !matches!(model.trainable, TrainableMask::EmbeddingRows(_)) {
            log::warn!("training with a full-parameter mask");
        }
        if queries.is_empty() {
            return Err(Error::Validation("no training queries".into()));
        }
        let mut log = TrainingLog::default();
        if cfg.steps == 0 {
            return Ok(TrainOutcome { model, log });
        }

        let reference = snapshot_reference(&model);
        let template = &queries.template;
        let embedder = LmEmbedder::new(reference.shared());
        let index = if cfg.demo_stage {
            Some(EmbeddingIndex::build(pool, &embedder)?)
        } else {
            None
        };
        let mut pairs_for: HashMap<usize, Vec<PreferencePair>> = HashMap::new();
        let mut memo = ScoreMemo::default();
        let range = model.trainable_range();
        let mut opt_d = AdamW::new(range.clone(), cfg.weight_decay);
        let mut opt_a = AdamW::new(range, cfg.weight_decay);
        let sched_d = LrSchedule::constant_after_warmup(cfg.eta1, cfg.warmup_steps);
        let sched_a = LrSchedule::constant_after_warmup(cfg.eta2, cfg.warmup_steps);

        let mut epoch = 0;
        let mut order = epoch_order(queries.len(), cfg.seed, epoch);
        let mut cursor = 0;
        for step in 0..cfg.steps {
            if cursor >= order.len() {
                epoch += 1;
                order = epoch_order(queries.len(), cfg.seed, epoch);
                cursor = 0;
            }
            let batch_idx: Vec<usize> = order[cursor..(cursor + cfg.batch_size).min(order.len())].to_vec();
            cursor += batch_idx.len();
            let lr_demo = sched_d.at(step);
            let lr_answer = sched_a.at(step);
            let mut record = StepRecord {
                step,
                epoch,
                lr_demo,
                lr_answer,
                demo: None,
                answer: None,
                total_loss: 0.0,
            };

            if cfg.demo_stage {
                let mut batch: Vec<PreferencePair> = Vec::new();
                for &qi in &batch_idx {
                    if let Entry::Vacant(slot) = pairs_for.entry(qi) {
                        let query = &queries.examples[qi];
                        let pairs = self.pairs_for_query(
                            query,
                            pool,
                            index.as_ref().expect("index built for the demo stage"),
                            &embedder,
                            &reference,
                            queries,
                        )?;
                        if pairs.is_empty() {
                            log.no_signal_queries += 1;
                        }
                        slot.insert(pairs);
                    }
                    batch.extend(pairs_for[&qi].iter().cloned());
                }
                if batch.is_empty() {
                    log.skipped_batches += 1;
                } else {
                    let inputs = LossInputs {
                        model: &model,
                        reference: &reference,
                        latent,
                        template,
                    };
                    let (stats, grads) =
                        memo.loss(inputs, KtoBatch::Demo(&batch), &cfg, Baseline::Estimate, true, step)?;
                    let grads = grads.expect("gradient requested");
                    check_finite(grads.as_slice(), step)?;
                    opt_d.step(model.params_mut(), grads.as_slice(), lr_demo);
                    log.demo_updates += 1;
                    record.total_loss += stats.loss_value;
                    record.demo = Some(stats);
                }
            }

            if cfg.answer_stage {
                let seed = derive_seed(cfg.seed, &format!("answers/{epoch}"));
                let batch: Vec<AnswerPair> = batch_idx
                    .iter()
                    .map(|&qi| build_answer_pair(&queries.examples[qi], queries, seed))
                    .collect::<Result<_>>()?;
                let inputs = LossInputs {
                    model: &model,
                    reference: &reference,
                    latent,
                    template,
                };
                let (stats, grads) = memo.loss(inputs, KtoBatch::Answer(&batch), &cfg, Baseline::Estimate, true, step)?;
                let grads = grads.expect("gradient requested");
                check_finite(grads.as_slice(), step)?;
                opt_a.step(model.params_mut(), grads.as_slice(), lr_answer);
                log.answer_updates += 1;
                record.total_loss += stats.loss_value;
                record.answer = Some(stats);
            }

            log::debug!(
                "step {step} L_d {:?} L_a {:?}",
                record.demo.map(|s| s.loss_value),
                record.answer.map(|s| s.loss_value)
            );
            log.records.push(record);

            if let Some(dir) = &self.checkpoint_dir {
                if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
                    save_checkpoint(dir.join(format!("step-{:06}.ckpt", step + 1)), &model)?;
                }
            }
        }
        Ok(TrainOutcome { model, log })
    }

    fn pairs_for_query(
        &mut self,
        query: &Example,
        pool: &DemonstrationPool,
        index: &EmbeddingIndex,
        embedder: &dyn TextEmbedder,
        reference: &ModelState,
        queries: &TaskDataset,
    ) -> Result<Vec<PreferencePair>> {
        let cfg = &self.config;
        // One extra candidate so that a query present in the pool can be dropped.
        let ranking = index.rank(&query.input, cfg.shortlist_n + 1, embedder)?;
        let mut shortlist = resolve(&ranking, pool);
        shortlist.retain(|e| e.id != query.id);
        shortlist.truncate(cfg.shortlist_n);
        let mut scorer = PreferenceScorer::new(reference, &queries.template);
        scorer.per_token = cfg.per_token;
        if let Some(c) = self.cache.as_deref_mut() {
            scorer = scorer.with_cache(c);
        }
        Ok(build_demo_pairs(query, &shortlist, &mut scorer, cfg.n_pos, cfg.n_neg)?.pairs)
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}"))));
    order
}

fn check_finite(g: &[f64], step: usize) -> Result<()> {
    if g.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Training {
            step,
            message: "non-finite gradient".into(),
        })
    }
}

/// Trains with default plumbing (no cache, no checkpoints).
pub fn train(
    queries: &TaskDataset,
    pool: &DemonstrationPool,
    model: ModelState,
    latent: &LatentPrompt,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(config.clone()).train(queries, pool, model, latent)
}
