use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use multiexit::network::ArchConfig;
use multiexit::tensor::format;
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multiexit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn train(out: &Path, extra: &[&str]) {
    let arch = configs().join("toy.json");
    let mut args = vec![
        "train",
        "--arch",
        arch.to_str().unwrap(),
        "--data",
        "synthetic:4,10,16",
        "--epochs",
        "2",
        "--batch-size",
        "16",
        "--lr",
        "0.05",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn accuracies(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).collect()
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train(&run, &["--mode", "msd"]);
    for f in ["config.json", "log.csv", "report.json", "checkpoints/last.ckpt", "checkpoints/best.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let report = json(run.join("report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 3);
    let config = json(run.join("config.json"));
    assert_eq!(config["epochs"], 2);
    assert_eq!(config["data"], "synthetic:4,10,16");
    assert_eq!(config["tau"], 3.0);
    let log = std::fs::read_to_string(run.join("log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss1,loss2,loss3,beta_used,total"));
    assert_eq!(log.lines().count(), 1 + 2 * 3);
}

#[test]
fn joint_mode_logs_zero_distillation() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("joint");
    train(&run, &["--mode", "joint"]);
    let mut rdr = csv::Reader::from_path(run.join("log.csv")).unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[3].parse::<f64>().unwrap(), 0.0);
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn reruns_reproduce_report_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    train(&a, &["--seed", "3"]);
    train(&b, &["--seed", "3"]);
    let config = a.join("config.json");
    ok(&["train", "--config", config.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    let bytes = |p: &Path| std::fs::read(p.join("report.json")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(bytes(&a), bytes(&c));
}

#[test]
fn flags_override_the_settings_file() {
    let dir = tempfile::tempdir().unwrap();
    let settings = dir.path().join("settings.json");
    let arch = configs().join("toy.json");
    std::fs::write(
        &settings,
        serde_json::json!({"arch": arch, "data": "synthetic:4,4,16", "epochs": 3, "lr": 0.01, "seed": 8}).to_string(),
    )
    .unwrap();
    let run = dir.path().join("r");
    ok(&["train", "--config", settings.to_str().unwrap(), "--epochs", "1", "--out", run.to_str().unwrap()]);
    let config = json(run.join("config.json"));
    assert_eq!(config["epochs"], 1);
    assert_eq!(config["lr"], 0.01);
    assert_eq!(config["seed"], 8);
}

#[test]
fn eval_diagnose_and_export_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train(&run, &[]);
    let out = run.to_str().unwrap();

    let table = ok(&["eval", "--out", out]);
    assert!(table.contains("Classifier 1"));
    let report = json(run.join("report.json"));
    let last = report["epochs"].as_array().unwrap().last().unwrap().clone();
    let eval = json(run.join("eval.json"));
    assert_eq!(accuracies(&eval["per_classifier_accuracy"]), accuracies(&last["test_accuracy"]));

    ok(&["eval", "--out", out, "--policy", "confidence", "--threshold", "0"]);
    let eval = json(run.join("eval.json"));
    let hist: Vec<u64> = eval["policy"]["exit_histogram"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(hist, vec![20, 0, 0]);

    ok(&["eval", "--out", out, "--policy", "fixed", "--exit", "2"]);
    let eval = json(run.join("eval.json"));
    assert_eq!(eval["policy"]["accuracy"], eval["per_classifier_accuracy"][1]);

    let text = ok(&["diagnose", "--out", out]);
    assert!(text.contains("exclusive to classifier 1"));
    let diag = json(run.join("diagnose.json"));
    let a: Vec<Vec<f64>> = diag["agreement"].as_array().unwrap().iter().map(accuracies).collect();
    for i in 0..3 {
        assert_eq!(a[i][i], 1.0);
        for j in 0..3 {
            assert_eq!(a[i][j], a[j][i]);
        }
    }

    ok(&["export-logits", "--out", out]);
    let logits = format::load::<f32>(run.join("logits/logits.exft")).unwrap();
    assert_eq!(logits.shape(), &[20, 3, 4]);
    let labels = format::load::<f32>(run.join("logits/labels.exft")).unwrap();
    assert_eq!(labels.shape(), &[20]);
}

#[test]
fn architecture_mismatch_names_both_digests() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train(&run, &[]);
    let other = dir.path().join("wide.json");
    let mut arch = json(configs().join("toy.json"));
    arch["stem"]["channels"] = 12.into();
    std::fs::write(&other, arch.to_string()).unwrap();
    let out = cli(&["eval", "--out", run.to_str().unwrap(), "--arch", other.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("architecture mismatch"), "{err}");
    let digest = |p: &Path| ArchConfig::from_json(&std::fs::read_to_string(p).unwrap()).unwrap().digest();
    assert!(err.contains(&digest(&other)), "{err}");
    assert!(err.contains(&digest(&configs().join("toy.json"))), "{err}");
}

#[test]
fn documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let arch = configs().join("toy.json");
    let arch = arch.to_str().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();

    let bad_mode = cli(&["train", "--arch", arch, "--mode", "greedy", "--epochs", "1", "--out", out]);
    assert_eq!(bad_mode.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_mode.stderr).contains("mode"));

    let bad_alpha = cli(&["train", "--arch", arch, "--alpha", "1.5", "--epochs", "1", "--out", out]);
    assert_eq!(bad_alpha.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_alpha.stderr).contains("alpha"));

    let classes = cli(&["train", "--arch", arch, "--data", "synthetic:10,2,16", "--out", out]);
    assert_eq!(classes.status.code(), Some(2));

    let missing = dir.path().join("no-such-dir");
    let wrong = configs().join("resnet18.json");
    let data = format!("cifar100:{}", missing.display());
    let no_data = cli(&["train", "--arch", wrong.to_str().unwrap(), "--data", &data, "--epochs", "1", "--out", out]);
    assert_eq!(no_data.status.code(), Some(3));

    let nan = cli(&[
        "train", "--arch", arch, "--data", "synthetic:4,16,16", "--epochs", "2", "--batch-size", "8", "--lr", "1e30",
        "--out", out,
    ]);
    assert_eq!(nan.status.code(), Some(4), "{}", String::from_utf8_lossy(&nan.stderr));
    assert!(String::from_utf8_lossy(&nan.stderr).contains("batch"));
}
