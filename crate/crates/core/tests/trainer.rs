mod common;

use std::fs;

use imas::maps::LabelMap;
use imas::model::{load_checkpoint, ModelPair, SegNet};
use imas::tensor::Sgd;
use imas::trainer::{read_metrics, run, train_step, Confusion, Mode, RunPaths, TrainConfig};
use imas::Error;

#[test]
fn supervised_run_has_no_unlabeled_term() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::small_dataset(&dir.path().join("data"), 8, 2, 16, 3, 2);
    let cfg = TrainConfig {
        mode: Mode::Supervised,
        ..common::quick_config()
    };
    let out = dir.path().join("run");
    let summary = run(&cfg, &data, &out).unwrap();
    assert_eq!(summary.steps, 3);
    let rows = read_metrics(&RunPaths::new(&out).metrics).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows[1..] {
        assert_eq!(r.l_u, Some(0.0));
        assert!(r.mean_gamma.is_none());
        assert!(r.l_x.unwrap() > 0.0);
    }
    let (pair, _) = load_checkpoint(&RunPaths::new(&out).last).unwrap();
    assert_eq!(pair.student.flat_params(), pair.teacher.flat_params());
}

#[test]
fn zero_learning_rate_freezes_student_but_not_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::small_dataset(dir.path(), 6, 2, 16, 3, 2);
    let cfg = TrainConfig {
        base_lr: 0.0,
        ..common::quick_config()
    };
    let mut pair = ModelPair::init(cfg.model_config(3), 1, cfg.alpha).unwrap();
    pair.teacher = SegNet::he_init(cfg.model_config(3), 2).unwrap();
    let s0 = pair.student.flat_params();
    let t0 = pair.teacher.flat_params();
    let mut sgd = Sgd::new(pair.student.params(), 0.0, cfg.momentum, cfg.poly_power, 10).unwrap();
    train_step(&mut pair, &mut sgd, &data.labeled, &data.unlabeled[..2], &cfg, 16, 0).unwrap();
    assert_eq!(pair.student.flat_params(), s0);
    let (a, b) = (cfg.alpha, 1.0 - cfg.alpha);
    for ((&t, &t_old), &s) in pair.teacher.flat_params().iter().zip(&t0).zip(&s0) {
        assert_eq!(t, (a * t_old as f64 + b * s as f64) as f32);
    }
    assert_ne!(pair.teacher.flat_params(), t0);
}

#[test]
fn identical_configs_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::small_dataset(&dir.path().join("data"), 8, 2, 16, 3, 2);
    let cfg = common::quick_config();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&cfg, &data, &a).unwrap();
    run(&cfg, &data, &b).unwrap();
    let (pa, pb) = (RunPaths::new(&a), RunPaths::new(&b));
    for (x, y) in [(&pa.metrics, &pb.metrics), (&pa.hardness, &pb.hardness), (&pa.evals, &pb.evals), (&pa.last, &pb.last)] {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn zero_epochs_only_logs_the_initial_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::small_dataset(&dir.path().join("data"), 6, 2, 16, 3, 2);
    let cfg = TrainConfig {
        epochs: 0,
        ..common::quick_config()
    };
    let out = dir.path().join("run");
    let summary = run(&cfg, &data, &out).unwrap();
    assert_eq!(summary.steps, 0);
    let rows = read_metrics(&RunPaths::new(&out).metrics).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].step, 0);
    assert!(rows[0].val_miou.is_some());
    assert!(RunPaths::new(&out).last.exists());
}

#[test]
fn halted_then_resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::small_dataset(&dir.path().join("data"), 8, 2, 16, 3, 2);
    let cfg = TrainConfig {
        epochs: 2,
        ..common::quick_config()
    };
    let straight = dir.path().join("straight");
    let full = run(&cfg, &data, &straight).unwrap();

    let split = dir.path().join("split");
    let halted = TrainConfig {
        halt_after: Some(5),
        ..cfg.clone()
    };
    assert_eq!(run(&halted, &data, &split).unwrap().steps, 5);
    let resumed = TrainConfig {
        resume: Some(RunPaths::new(&split).last),
        ..cfg.clone()
    };
    let back = run(&resumed, &data, &split).unwrap();
    assert_eq!(back.steps, full.steps);
    assert_eq!(back.best_step, full.best_step);
    let (a, b) = (RunPaths::new(&straight), RunPaths::new(&split));
    assert_eq!(fs::read(&a.metrics).unwrap(), fs::read(&b.metrics).unwrap());
    assert_eq!(fs::read(&a.hardness).unwrap(), fs::read(&b.hardness).unwrap());
    assert_eq!(fs::read(&a.last).unwrap(), fs::read(&b.last).unwrap());
}

#[test]
fn resume_rejects_mismatched_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::small_dataset(&dir.path().join("data"), 6, 2, 16, 3, 2);
    let cfg = common::quick_config();
    let out = dir.path().join("run");
    run(&cfg, &data, &out).unwrap();
    let bad = TrainConfig {
        epochs: 3,
        resume: Some(RunPaths::new(&out).last),
        ..cfg
    };
    assert!(matches!(run(&bad, &data, &out), Err(Error::Config(_))));
}

#[test]
fn exploding_learning_rate_aborts_with_instance_ids() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::small_dataset(&dir.path().join("data"), 6, 2, 16, 3, 2);
    let cfg = TrainConfig {
        base_lr: 1e30,
        momentum: 0.0,
        epochs: 4,
        ..common::quick_config()
    };
    match run(&cfg, &data, &dir.path().join("run")) {
        Err(Error::NumericAbort { step, instances }) => {
            assert!(step >= 1);
            assert!(!instances.is_empty());
        }
        other => panic!("expected a numeric abort, got {other:?}"),
    }
}

#[test]
fn miou_matches_hand_confusion() {
    // truth 0 0 1 1 / pred 0 1 1 1 and truth 2 2 / pred 2 0
    let mut c = Confusion::new(3);
    c.add(&LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap(), &[0, 1, 1, 1]).unwrap();
    c.add(&LabelMap::new(1, 2, vec![2, 2]).unwrap(), &[2, 0]).unwrap();
    let iou = c.class_iou();
    // class 0: tp 1, fp 1, fn 1; class 1: tp 2, fp 1; class 2: tp 1, fn 1
    let want = [1.0 / 3.0, 2.0 / 3.0, 0.5];
    for (got, w) in iou.iter().zip(want) {
        assert!((got.unwrap() - w).abs() < 1e-12);
    }
    assert!((c.miou() - (1.0 / 3.0 + 2.0 / 3.0 + 0.5) / 3.0).abs() < 1e-12);
}
