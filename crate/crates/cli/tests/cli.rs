use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gcp");

fn gcp(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gcp(args);
    assert!(
        out.status.success(),
        "gcp {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic data plus a config small enough for a few seconds per command.
fn setup(dir: &Path) -> std::path::PathBuf {
    ok(&["synth-data", "--samples", "200", "--test-samples", "100", "--out", p(dir)]);
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        r#"seed = 1
out = "run"

[data]
kind = "cifar10"
train = ["train.bin"]
test = ["test.bin"]

[train]
epochs = 2
lr = 0.05
batch_size = 50

[gcp]
eta = 0.5
iterations = 2
lambda = 0.3
calibration_batches = 2
batch_size = 50

[gcp.finetune]
epochs = 1
lr = 0.01
batch_size = 50
"#,
    )
    .unwrap();
    cfg
}

#[test]
fn train_prune_eval_cost_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--config", p(&cfg), "--out", p(out)]);
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,train_loss,eval_top1\n"));
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());

    let model = a.join("model");
    let (pa, pb) = (tmp.path().join("pa"), tmp.path().join("pb"));
    for out in [&pa, &pb] {
        ok(&["prune", "--config", p(&cfg), "--model", p(&model), "--out", p(out)]);
    }
    let history = fs::read_to_string(pa.join("history.json")).unwrap();
    assert_eq!(history, fs::read_to_string(pb.join("history.json")).unwrap());
    assert!(history.contains("\"iteration\": 2"));

    // Masked and materialized models evaluate identically.
    let masked = ok(&["eval", "--config", p(&cfg), "--model", p(&pa.join("pruned_masked"))]);
    let small = ok(&["eval", "--config", p(&cfg), "--model", p(&pa.join("pruned"))]);
    assert_eq!(masked, small);
    assert!(masked.contains("top1 ") && masked.contains("top5 "));

    let same = ok(&["cost", "--model", p(&model), "--reference", p(&model)]);
    assert!(same.contains("reduction: 1.00x"), "{same}");
    let pruned = ok(&["cost", "--model", p(&pa.join("pruned")), "--reference", p(&model)]);
    let factor: f64 = pruned
        .lines()
        .find_map(|l| l.strip_prefix("reduction: "))
        .unwrap()
        .trim_end_matches('x')
        .parse()
        .unwrap();
    assert!(factor >= 1.9, "{pruned}");

    let plot = tmp.path().join("plot");
    ok(&["plot", "--model", p(&pa.join("pruned")), "--reference", p(&model), "--out", p(&plot)]);
    let csv = fs::read_to_string(plot.join("pattern.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(pa.join("pattern.csv")).unwrap());
    let svg = fs::read_to_string(plot.join("pattern.svg")).unwrap();
    assert!(svg.contains("index of convolution layer"));
}

#[test]
fn latency_objective_without_table_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let train_out = tmp.path().join("t");
    ok(&["train", "--config", p(&cfg), "--out", p(&train_out)]);
    let out = gcp(&[
        "prune",
        "--config",
        p(&cfg),
        "--objective",
        "latency",
        "--model",
        p(&train_out.join("model")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("configuration error"), "{err}");
}

#[test]
fn bench_writes_a_table_and_rejects_growth() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let train_out = tmp.path().join("t");
    let cfg_text = fs::read_to_string(&cfg).unwrap().replace("epochs = 2", "epochs = 0");
    fs::write(&cfg, cfg_text).unwrap();
    ok(&["train", "--config", p(&cfg), "--out", p(&train_out)]);
    let model = train_out.join("model");
    let bench = tmp.path().join("bench");
    ok(&[
        "bench-latency",
        "--model",
        p(&model),
        "--batch",
        "2",
        "--repeats",
        "1",
        "--grid",
        "0.5",
        "--out",
        p(&bench),
    ]);
    let table = fs::read_to_string(bench.join("latency.txt")).unwrap();
    assert!(table.lines().filter(|l| !l.starts_with('#')).count() > 9);
    // The measured table drives the latency objective.
    let with_table = fs::read_to_string(&cfg).unwrap().replace(
        "out = \"run\"",
        &format!("out = \"run\"\nlatency_table = {:?}", bench.join("latency.txt")),
    );
    fs::write(&cfg, with_table).unwrap();
    let cost = ok(&["cost", "--config", p(&cfg), "--objective", "latency", "--model", p(&model)]);
    assert!(cost.contains("objective: latency"));

    let out = gcp(&["bench-latency", "--model", p(&model), "--grid", "1.5", "--out", p(&bench)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid input"));
}

#[test]
fn bad_thread_count_and_missing_config() {
    let out = Command::new(BIN)
        .args(["train"])
        .env("GCP_NUM_THREADS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("GCP_NUM_THREADS"));
    let out = gcp(&["train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}
