use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use odenorm_cli::summary::{self, Outcome};

fn odenorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odenorm")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.toml");
    let text = format!(
        "[model]\narch = \"odenet4\"\nbase_channels = 4\n\n\
         [solver]\nscheme = \"Euler\"\nn_evals = 2\n\n\
         [plan]\nepochs = 5\nlr_drops = []\n\n\
         [data]\nkind = \"spirals\"\nn_per_class = 10\nn_test_per_class = 10\n\n\
         [criterion]\nschemes = [\"Euler\", \"RK4\"]\nbudgets = [4, 8]\n\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_criterion_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let o = odenorm(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let ckpt = out.join("model.ckpt");
    assert!(ckpt.exists());

    let o = odenorm(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy="));

    let report = tmp.path().join("report.csv");
    let o = odenorm(&["criterion", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("verdict="));
    let text = fs::read_to_string(&report).unwrap();
    assert!(odenorm::CriterionReport::parse_csv(&text).is_ok());
}

#[test]
fn training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = odenorm(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "4", "--epochs", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
        (fs::read(out.join("metrics.csv")).unwrap(), fs::read(out.join("model.ckpt")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn missing_cifar_dir_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-cifar");
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, format!("[data]\nkind = \"cifar10-small\"\ndir = \"{}\"\n", missing.display())).unwrap();
    let o = odenorm(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such-cifar"), "{}", stderr(&o));
}

#[test]
fn bad_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let ckpt = tmp.path().join("bad.ckpt");
    fs::write(&ckpt, b"not a checkpoint at all").unwrap();
    let o = odenorm(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn grid_not_finer_than_training_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let o = odenorm(&["train", "--config", s(&cfg), "--out", s(&out), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    // the checkpoint was trained at (Euler, 2)
    let coarse = tmp.path().join("coarse.toml");
    fs::write(&coarse, fs::read_to_string(&cfg).unwrap().replace("budgets = [4, 8]", "budgets = [2, 8]")).unwrap();
    let o = odenorm(&[
        "criterion",
        "--config",
        s(&coarse),
        "--checkpoint",
        s(&out.join("model.ckpt")),
        "--out",
        s(&tmp.path().join("r.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "[model]\narch = \"odenet4\"\nwidth = 3\n").unwrap();
    let o = odenorm(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));
}

#[test]
fn two_variant_sweep_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "[sweep]\nschedules = [\"BN-BN-BN\", \"BN-BN-NF\"]\nsolvers = [\"Euler:2\"]\n");
    let out = tmp.path().join("sweep");
    let o = odenorm(&["sweep", "--config", s(&cfg), "--out", s(&out), "--epochs", "1", "--parallel"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = summary::parse_csv(&fs::read_to_string(out.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| matches!(r.outcome, Outcome::Done { .. })));
    for r in &rows {
        assert!(out.join(&r.variant).join("report.csv").exists());
    }
}

#[test]
fn diverging_variant_fails_the_sweep_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "[sweep]\nschedules = [\"NF-NF-NF\"]\nsolvers = [\"Euler:2\"]\n");
    let out = tmp.path().join("sweep");
    let o = odenorm(&["sweep", "--config", s(&cfg), "--out", s(&out), "--epochs", "1", "--lr", "1e200"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let rows = summary::parse_csv(&fs::read_to_string(out.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(rows[0].outcome, Outcome::Failed);
}
