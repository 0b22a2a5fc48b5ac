mod common;

use sdnet::data::{Augment, Dataset};
use sdnet::model::MultiExitModel;
use sdnet::trainer::{evaluate, train, EvalOptions, LrSchedule, Regime, RunOutput, TrainPlan, METRICS_HEADER};
use sdnet::Error;

use common::*;

fn toy_plan(regime: Regime, epochs: usize) -> TrainPlan {
    TrainPlan {
        regime,
        epochs,
        batch_size: 16,
        lr: LrSchedule {
            initial: 0.05,
            ..LrSchedule::default()
        },
        augment: Augment::None,
        seed: 3,
        ..TrainPlan::default()
    }
}

#[test]
fn dsn_equals_self_distill_without_distillation() {
    let splits = blobs(120, 3, 1.0, vec![6], 1);
    let cfg = mlp_config(&[12, 12, 12], 6, 3);
    let run = |plan: &TrainPlan| {
        let mut m = MultiExitModel::<f64>::build(&cfg, 0).unwrap();
        train(&mut m, &splits, plan, None).unwrap()
    };
    let dsn = run(&toy_plan(Regime::Dsn, 4));
    let mut sd_plan = toy_plan(Regime::SelfDistill, 4);
    sd_plan.distill.alpha = 0.0;
    sd_plan.distill.lambda = 0.0;
    let sd = run(&sd_plan);
    for (a, b) in dsn.iter().zip(&sd) {
        assert_eq!(a.step_losses.len(), b.step_losses.len());
        for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
    let full = run(&toy_plan(Regime::SelfDistill, 4));
    assert_ne!(full[0].step_losses, sd[0].step_losses);
}

#[test]
fn standard_regime_optimizes_only_the_deepest_exit() {
    let splits = blobs(120, 3, 1.0, vec![6], 2);
    let cfg = mlp_config(&[12, 12], 6, 3);
    let mut m = MultiExitModel::<f64>::build(&cfg, 0).unwrap();
    let records = train(&mut m, &splits, &toy_plan(Regime::Standard, 3), None).unwrap();
    for r in &records {
        let deep = r.exits.last().unwrap().train.ce;
        assert!((r.train_total - deep).abs() < 1e-12, "{} vs {deep}", r.train_total);
    }
    // Shallow head weights never receive gradient under the standard objective.
    let fresh = MultiExitModel::<f64>::build(&cfg, 0).unwrap();
    let name = "head1.fc.weight";
    let before = fresh.params().find(name).unwrap().tensor.data().to_vec();
    let after = m.params().find(name).unwrap().tensor.data().to_vec();
    let wd_only = before.iter().zip(&after).all(|(b, a)| a.abs() <= b.abs());
    assert!(wd_only);
}

#[test]
fn separable_task_is_solved_by_both_exits() {
    let splits = blobs(200, 3, 0.3, vec![4], 5);
    let cfg = mlp_config(&[16, 16], 4, 3);
    let mut m = MultiExitModel::<f64>::build(&cfg, 1).unwrap();
    let records = train(&mut m, &splits, &toy_plan(Regime::SelfDistill, 50), None).unwrap();
    let report = evaluate(&m, &splits.train, &EvalOptions::default()).unwrap();
    assert_eq!(report.accuracy, vec![100.0, 100.0]);
    assert_eq!(report.ensemble_accuracy, 100.0);
    assert!(records[49].train_total < records[0].train_total);
    for r in &records {
        for e in &r.exits {
            assert!((0.0..=100.0).contains(&e.train_accuracy) && (0.0..=100.0).contains(&e.test_accuracy));
        }
    }
}

#[test]
fn same_seed_same_records() {
    let splits = blobs(90, 3, 1.0, vec![3, 6, 6], 4);
    let cfg = plain_cnn(3);
    let mut cfg = cfg;
    cfg.input_shape = vec![3, 6, 6];
    let mut plan = toy_plan(Regime::SelfDistill, 2);
    plan.augment = Augment::CropFlip;
    let run = || {
        let mut m = MultiExitModel::<f32>::build(&cfg, 9).unwrap();
        train(&mut m, &splits, &plan, None).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_names_epoch_and_step() {
    let splits = blobs(60, 3, 1.0, vec![4], 1);
    let cfg = mlp_config(&[8, 8], 4, 3);
    let mut m = MultiExitModel::<f32>::build(&cfg, 0).unwrap();
    let mut plan = toy_plan(Regime::SelfDistill, 5);
    plan.lr.initial = 1e30;
    match train(&mut m, &splits, &plan, None) {
        Err(Error::NonFiniteLoss { epoch, step }) => {
            assert!(epoch >= 1 && step < 4, "epoch {epoch} step {step}");
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn zero_weight_model_is_at_chance() {
    let splits = blobs(120, 4, 1.0, vec![5], 1);
    let mut m = MultiExitModel::<f64>::build(&mlp_config(&[6, 6], 5, 4), 0).unwrap();
    m.zero_weights();
    let report = evaluate(&m, &splits.test, &EvalOptions::default()).unwrap();
    for a in report.accuracy {
        assert_eq!(a, 25.0);
    }
}

#[test]
fn empty_split_is_an_error() {
    let m = MultiExitModel::<f64>::build(&mlp_config(&[6, 6], 5, 4), 0).unwrap();
    let empty = Dataset::new(vec![], vec![5], vec![], 4).unwrap();
    assert!(evaluate(&m, &empty, &EvalOptions::default()).is_err());
}

#[test]
fn artifacts_are_written() {
    let splits = blobs(90, 3, 1.0, vec![4], 1);
    let cfg = mlp_config(&[8, 8, 8], 4, 3);
    let mut m = MultiExitModel::<f32>::build(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput {
        dir: dir.path().to_path_buf(),
    };
    let mut plan = toy_plan(Regime::SelfDistill, 4);
    plan.checkpoint_every = 2;
    plan.record_grad_stats = true;
    let records = train(&mut m, &splits, &plan, Some(&out)).unwrap();
    assert!(out.epoch_checkpoint(2).exists());
    assert!(out.final_checkpoint().exists());
    let csv = std::fs::read_to_string(out.metrics_path()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 1 + 4 * (2 * 3 + 1));
    assert!(!csv.contains('\r'));
    let grads = std::fs::read_to_string(out.grad_stats_path()).unwrap();
    assert_eq!(grads.lines().count(), 1 + 4 * m.layers().len());
    assert!(records.iter().all(|r| r.grad_stats.is_some()));
    let mut loaded = MultiExitModel::<f32>::build(&cfg, 1).unwrap();
    sdnet::checkpoint::load_model(&mut loaded, &out.final_checkpoint()).unwrap();
    assert_eq!(loaded.params(), m.params());
}

#[test]
fn finetune_phase_adds_epochs() {
    let splits = blobs(60, 3, 1.0, vec![4], 1);
    let cfg = mlp_config(&[8, 8], 4, 3);
    let mut m = MultiExitModel::<f64>::build(&cfg, 0).unwrap();
    let mut plan = toy_plan(Regime::SelfDistill, 2);
    plan.finetune_epochs = 2;
    let records = train(&mut m, &splits, &plan, None).unwrap();
    assert_eq!(records.len(), 4);
    let r = &records[3];
    assert!((r.train_total - r.exits.last().unwrap().train.ce).abs() < 1e-12);
}
