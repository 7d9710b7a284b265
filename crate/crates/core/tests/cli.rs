use std::path::Path;
use std::process::{Command, Output};

fn imas(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imas"))
        .args(args)
        .current_dir(cwd)
        .env("IMAS_THREADS", "1")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &["--epochs", "1", "--batch", "2", "--eval-every", "1"];

fn gen(dir: &Path) {
    let o = imas(&["gen-data", "--out", "d", "--n-train", "6", "--n-val", "2", "--size", "16", "--classes", "3", "--seed", "4"], dir);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = imas(&["train", "--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for needle in ["--tau", "default: 0.95", "--lambda-u", "default: 3", "--alpha", "default: 0.996", "--mode", "default: imas"] {
        assert!(text.contains(needle), "missing {needle:?} in help");
    }
}

#[test]
fn unknown_flags_and_bad_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(imas(&["train", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(imas(&["frobnicate"], dir.path()).status.code(), Some(2));
    gen(dir.path());
    let o = imas(&["train", "--data", "d", "--out", "r", "--mode", "fancy"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = imas(&["train", "--data", "d", "--out", "r", "--fraction", "1/3", "--tau", "1.5"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = imas(&["train", "--data", "d", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(2), "an unsplit dataset has no labelled ids");
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = imas(&["split", "--data", "nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir);
    let o = imas(&["split", "--data", "d", "--fraction", "2"], dir);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("2 labelled, 4 unlabelled"));

    let mut args = vec!["train", "--data", "d", "--out", "r", "--seed", "3"];
    args.extend_from_slice(TINY);
    let o = imas(&args, dir);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("\"tau\": 0.95") && text.contains("\"mode\": \"imas\""), "resolved config is printed");
    for f in ["metrics.csv", "hardness.csv", "eval.csv", "final.ckpt", "best.ckpt", "summary.json", "config.json"] {
        assert!(dir.join("r").join(f).exists(), "{f}");
    }

    let o = imas(&["eval", "--checkpoint", "r/final.ckpt", "--data", "d"], dir);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("student mIoU") && stdout(&o).contains("teacher mIoU"));

    let o = imas(&["inspect-hardness", "--checkpoint", "r/final.ckpt", "--data", "d", "--ids", "train_00000,val_00001", "--csv", "h.csv"], dir);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.join("h.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("step,instance_id,gamma"));

    let o = imas(&["inspect-hardness", "--checkpoint", "r/final.ckpt", "--data", "d", "--ids", "train_99999"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("valid ids") && stderr(&o).contains("train_00005"));

    let o = imas(&["export-plots-data", "--run", "r", "--out", "plots"], dir);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["gamma.csv", "loss.csv", "miou.csv"] {
        assert!(dir.join("plots").join(f).exists());
    }
}

#[test]
fn train_with_fraction_splits_in_place_of_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir);
    let mut args = vec!["train", "--data", "d", "--out", "r", "--mode", "standard_cr", "--fraction", "1/3"];
    args.extend_from_slice(TINY);
    let o = imas(&args, dir);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let part = std::fs::read_to_string(dir.join("r/partition.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&part).unwrap();
    assert_eq!(v["labeled"].as_array().unwrap().len(), 2);
}

#[test]
fn numeric_abort_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir);
    let mut args = vec!["train", "--data", "d", "--out", "r", "--fraction", "2", "--lr", "1e30"];
    args.extend_from_slice(&["--epochs", "4", "--batch", "2"]);
    let o = imas(&args, dir);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("train_"));
}
