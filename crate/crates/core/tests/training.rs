//! Training loop contracts and evaluation harness behavior on small models.

mod common;

use std::sync::Arc;

use common::*;
use genicl::corpus::DemonstrationPool;
use genicl::eval::{ablation_suite, evaluate_selector, replay, AblationInputs, Variant};
use genicl::kto::{answer_loss, demo_loss, estimate_ref_baseline, loss_and_grad, train, Baseline, KtoBatch, TrainConfig};
use genicl::selector::{GenIclSelector, OrderPolicy, RandomSelector, SelectionConfig, ZeroShot};

fn small_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        shortlist_n: 8,
        ..TrainConfig::desk()
    }
}

#[test]
fn identity_point() {
    let fx = kto_fixture(1, 0.0);
    let cfg = TrainConfig::default();
    let d = demo_loss(&fx.demo_pairs, fx.inputs(), &cfg).unwrap();
    let a = answer_loss(&fx.answer_pairs, fx.inputs(), &cfg).unwrap();
    assert!((d.loss_value + 1.0).abs() <= 1e-6, "{}", d.loss_value);
    assert!((a.loss_value + 1.0).abs() <= 1e-6, "{}", a.loss_value);
    assert_eq!(d.ref_baseline, 0.0);
    assert_eq!(a.ref_baseline, 0.0);
    assert_eq!(estimate_ref_baseline(fx.inputs(), KtoBatch::Demo(&fx.demo_pairs), 0.1).unwrap(), 0.0);
}

#[test]
fn baseline_carries_no_gradient() {
    let fx = kto_fixture(2, 0.3);
    let cfg = TrainConfig::default();
    for batch in [KtoBatch::Demo(&fx.demo_pairs), KtoBatch::Answer(&fx.answer_pairs)] {
        let (est, g_est) = loss_and_grad(batch, fx.inputs(), &cfg, Baseline::Estimate).unwrap();
        let (fixed, g_fixed) = loss_and_grad(batch, fx.inputs(), &cfg, Baseline::Fixed(est.ref_baseline)).unwrap();
        assert_eq!(est.loss_value, fixed.loss_value);
        assert_eq!(g_est.as_slice(), g_fixed.as_slice());
    }
}

#[test]
fn training_touches_only_latent_rows() {
    let (model, latent) = with_latent(tiny_model(3), 3);
    let before = model.clone();
    let task = toy_task(20);
    let pool = DemonstrationPool::from(&task);
    let out = train(&task, &pool, model, &latent, &small_train_config(2)).unwrap();
    assert_eq!(out.log.answer_updates, 2);
    let range = before.trainable_range();
    let (a, b) = (before.params(), out.model.params());
    assert!(a[..range.start].iter().zip(&b[..range.start]).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a[range.end..].iter().zip(&b[range.end..]).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(&a[range.clone()], &b[range]);
}

#[test]
fn training_is_deterministic() {
    let task = toy_task(20);
    let pool = DemonstrationPool::from(&task);
    let run = || {
        let (model, latent) = with_latent(tiny_model(4), 4);
        train(&task, &pool, model, &latent, &small_train_config(3)).unwrap()
    };
    let (x, y) = (run(), run());
    assert_eq!(x.model.content_hash(), y.model.content_hash());
    assert_eq!(x.log, y.log);
}

#[test]
fn zero_steps_return_the_input_model() {
    let (model, latent) = with_latent(tiny_model(5), 5);
    let task = toy_task(12);
    let out = train(&task, &DemonstrationPool::from(&task), model.clone(), &latent, &small_train_config(0)).unwrap();
    assert_eq!(out.model.content_hash(), model.content_hash());
    assert!(out.log.records.is_empty());
}

#[test]
fn zero_shot_and_replay() {
    let model = tiny_model(6);
    let task = toy_task(16);
    let pool = DemonstrationPool::from(&task);
    let queries = task.slice(0..4);
    let (report, _) = evaluate_selector(&mut ZeroShot, &queries, &pool, &model, &SelectionConfig { k: 0, ..SelectionConfig::default() }, 0).unwrap();
    assert!(report.records.iter().all(|r| r.demo_ids.is_empty()));

    let cfg = SelectionConfig { k: 3, ..SelectionConfig::default() };
    let pool_arc = Arc::new(pool.clone());
    let (r1, m1) = evaluate_selector(&mut RandomSelector::new(pool_arc.clone(), 9), &queries, &pool, &model, &cfg, 9).unwrap();
    let (r2, m2) = evaluate_selector(&mut RandomSelector::new(pool_arc, 9), &queries, &pool, &model, &cfg, 9).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    let again = replay(&m1, &queries, &pool, &model, 9).unwrap();
    let values = |r: &genicl::eval::EvalReport| r.records.iter().map(|x| x.metric_value).collect::<Vec<_>>();
    assert_eq!(values(&again), values(&r1));
    let mean = values(&r1).iter().sum::<f64>() / r1.records.len() as f64;
    assert_eq!(r1.score, mean);
}

#[test]
fn single_demo_orders_agree() {
    let (model, _) = with_latent(tiny_model(7), 7);
    let task = toy_task(30);
    let pool = Arc::new(DemonstrationPool::from(&task));
    let queries = task.slice(0..5);
    let mut reports = Vec::new();
    for order in OrderPolicy::ALL {
        let mut sel = GenIclSelector::new(Arc::new(model.clone()), pool.clone(), task.template.clone(), 12).unwrap();
        let cfg = SelectionConfig { k: 1, order, shuffle_seed: 3 };
        reports.push(evaluate_selector(&mut sel, &queries, &pool, &model, &cfg, 0).unwrap().0.records);
    }
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn ablation_rows_share_initialization() {
    let pretrained = tiny_model(8);
    let task = toy_task(24);
    let pool = Arc::new(DemonstrationPool::from(&task));
    let eval = task.slice(0..4);
    let inputs = AblationInputs {
        train: &task,
        eval: &eval,
        pool: &pool,
        pretrained: &pretrained,
        selection: SelectionConfig { k: 2, ..SelectionConfig::default() },
        useful: None,
    };
    let table = ablation_suite(&inputs, &Variant::ALL, &small_train_config(2), &[0]).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.init_hash == table.rows[0].init_hash));
    let row = |v| table.rows.iter().find(|r| r.variant == v).unwrap();
    assert_eq!(row(Variant::NoDemoLoss).demo_updates, 0);
    assert_eq!(row(Variant::NoAnswerLoss).answer_updates, 0);
    assert_eq!(row(Variant::Full).answer_updates, 2);

    // A single-variant list gives the same number as a direct evaluation.
    let only = ablation_suite(&inputs, &[Variant::Full], &small_train_config(2), &[0]).unwrap();
    assert_eq!(only.rows.len(), 1);
    assert_eq!(only.rows[0].score, row(Variant::Full).score);
    let (start, latent) = with_latent(pretrained.clone(), 0);
    let cfg = TrainConfig { seed: 0, ..small_train_config(2) };
    let trained = Arc::new(train(&task, &pool, start, &latent, &cfg).unwrap().model);
    let mut sel = GenIclSelector::new(trained.clone(), pool.clone(), task.template.clone(), cfg.shortlist_n).unwrap();
    let (direct, _) = evaluate_selector(&mut sel, &eval, &pool, &trained, &inputs.selection, 0).unwrap();
    assert_eq!(direct.score, only.rows[0].score);

    let mut with_latent_model = pretrained.clone();
    genicl::lm::init_latent(10, &mut with_latent_model, 0).unwrap();
    let bad = AblationInputs { pretrained: &with_latent_model, ..inputs };
    assert!(ablation_suite(&bad, &[Variant::Full], &small_train_config(1), &[0]).is_err());
}
