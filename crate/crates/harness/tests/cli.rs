use std::path::Path;
use std::process::{Command, Output};

use cst_harness::config::{DataSource, ExperimentConfig, Method};

fn cst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cst")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn repo_config(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    std::fs::write(&path, "[data]\nn_train = lots\n").unwrap();
    let out = cst(&["sweep", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");

    std::fs::write(&path, "[cst]\nbogus = 1\n").unwrap();
    assert_eq!(
        cst(&["sweep", "--config", path.to_str().unwrap()]).status.code(),
        Some(1)
    );
    assert_eq!(cst(&["sweep", "--config", "/no/such/file.conf"]).status.code(), Some(1));
    assert_eq!(cst(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(cst(&["--help"]).status.code(), Some(0));
}

#[test]
fn shipped_configs_parse() {
    for name in ["synthetic.conf", "overlap.conf", "quick.conf"] {
        ExperimentConfig::load(&repo_config(name), &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let synthetic = ExperimentConfig::load(&repo_config("synthetic.conf"), &[]).unwrap();
    let defaults = ExperimentConfig {
        name: synthetic.name.clone(),
        ..ExperimentConfig::default()
    };
    assert_eq!(synthetic.canonical_text(), defaults.canonical_text());
    let overlap = ExperimentConfig::load(&repo_config("overlap.conf"), &[]).unwrap();
    assert_eq!(overlap.datasets.len(), 3);
    assert_eq!(overlap.methods, vec![Method::Backbone, Method::Pl]);
    // the multilabel template only parses once its data files exist
    assert!(ExperimentConfig::load(&repo_config("multilabel.conf"), &[]).is_err());
}

#[test]
fn gen_data_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let quick = repo_config("quick.conf");
    let quick = quick.to_str().unwrap();
    let out = cst(&[
        "gen-data",
        "--config",
        quick,
        "--set",
        "data.demand=D2",
        "--seed",
        "7",
        "--out",
        d.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train = d.join("D2_seed7_train.csv");
    let test = d.join("D2_seed7_test.csv");
    assert!(train.exists() && test.exists());

    let model = d.join("pl.model");
    let out = cst(&[
        "train",
        "--config",
        quick,
        "--data",
        train.to_str().unwrap(),
        "--backbone",
        "UDM",
        "--method",
        "PL",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = cst(&[
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("nll,hamming,best_action_accuracy"));
    let values: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(values[0].is_finite() && values[0] > 0.0);
    assert!((0.0..=1.0).contains(&values[1]) && (0.0..=1.0).contains(&values[2]));

    let out = cst(&[
        "evaluate",
        "--model",
        d.join("missing").to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = cst(&[
        "train",
        "--config",
        quick,
        "--backbone",
        "XYZ",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let quick = repo_config("quick.conf");
    let out = cst(&[
        "sweep",
        "--config",
        quick.to_str().unwrap(),
        "--set",
        "experiment.seeds=0",
        "--set",
        "data.demand=D1",
        "--set",
        "backbone.kinds=DM",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "config.resolved",
        "per_seed.csv",
        "aggregated.csv",
        "loss_history.csv",
        "imputations.csv",
        "lambda_selection.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let agg = std::fs::read_to_string(dir.path().join("aggregated.csv")).unwrap();
    assert!(agg.starts_with("dataset,backbone,method,metric,mean,stderr,seeds,config_hash"));
    assert!(agg.lines().any(|l| l.starts_with("D1,DM,PL+CVAT,nll,")));
}

#[test]
fn toy_demo_writes_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = cst(&[
        "toy-demo",
        "--seeds",
        "0",
        "--iterations",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = std::fs::read_to_string(dir.path().join("toy_grid.csv")).unwrap();
    // snapshots 0, 1 and 2 on a 100x100 grid for two actions, plus a header
    assert_eq!(grid.lines().count(), 1 + 3 * 100 * 100 * 2);
    assert!(stdout(&out).contains("seed 0"));
}

#[test]
fn multilabel_config_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("ml.conf");
    std::fs::write(dir.path().join("a_train.svm"), "0 1:1\n1 2:1\n").unwrap();
    std::fs::write(dir.path().join("a_test.svm"), "0 1:1\n").unwrap();
    std::fs::write(
        &conf,
        "[data]\nsource = libsvm\nname = a\ntrain_file = a_train.svm\ntest_file = a_test.svm\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&conf, &[]).unwrap();
    match &cfg.datasets[0] {
        DataSource::LibSvm { train_file, .. } => assert_eq!(train_file, &dir.path().join("a_train.svm")),
        other => panic!("{other:?}"),
    }
}
