use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sigood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sigood"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exists_for_every_subcommand() {
    assert_eq!(sigood(&["--help"]).status.code(), Some(0));
    for sub in ["synth", "train", "detect", "eval", "bench", "verify"] {
        let o = sigood(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = sigood(&["eval", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(sigood(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("nope.json");
    let o = sigood(&[
        "detect",
        "--checkpoint",
        path(&ck),
        "--data",
        path(dir.path()),
        "--name",
        "X",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
}

#[test]
fn eval_prints_auc() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.csv");
    fs::write(
        &s,
        "graph_id,score,decision,label\n0,0.9,1,1\n1,0.1,0,0\n2,0.4,0,1\n3,0.5,1,0\n",
    )
    .unwrap();
    let o = sigood(&["eval", "--scores", path(&s)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "auc 0.75");

    let unlabelled = dir.path().join("u.csv");
    fs::write(&unlabelled, "graph_id,score\n0,0.9\n1,0.1\n").unwrap();
    assert_eq!(sigood(&["eval", "--scores", path(&unlabelled)]).status.code(), Some(2));
    let labels = dir.path().join("l.csv");
    fs::write(&labels, "graph_id,label\n1,0\n0,1\n").unwrap();
    let o = sigood(&["eval", "--scores", path(&unlabelled), "--labels", path(&labels)]);
    assert_eq!(stdout(&o).trim(), "auc 1");
}

#[test]
fn eval_rejects_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.csv");
    fs::write(&s, "graph_id,score,label\n0,0.9,1\n1,0.1,1\n").unwrap();
    let o = sigood(&["eval", "--scores", path(&s)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synth_train_detect_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = sigood(&[
        "synth",
        "--out",
        path(&data),
        "--name",
        "TOY",
        "--n-graphs",
        "12",
        "--nodes-min",
        "4",
        "--nodes-max",
        "7",
        "--feature-mean",
        "0,0,0",
        "--seed",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(data.join("TOY_A.txt").exists());
    assert!(data.join("config.toml").exists());

    let ck = dir.path().join("model.json");
    let o = sigood(&[
        "train",
        "--data",
        path(&data),
        "--name",
        "TOY",
        "--checkpoint",
        path(&ck),
        "--epochs",
        "5",
        "--hidden-dim",
        "8",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("sha256"));

    let run = |out: &Path| {
        let o = sigood(&[
            "detect",
            "--checkpoint",
            path(&ck),
            "--data",
            path(&data),
            "--name",
            "TOY",
            "--out",
            path(out),
            "--iterations",
            "5",
            "--tau",
            "-1",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    for f in ["scores.csv", "trace.csv", "distribution.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let scores = fs::read_to_string(a.join("scores.csv")).unwrap();
    assert!(scores.starts_with("graph_id,score,decision\n"));
    assert_eq!(scores.lines().count(), 13);
    let trace = fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 12 * 5 + 1);
    let config = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(config.contains("iterations = 5"));
    assert!(config.contains("seed = 0"));
}

#[test]
fn bench_writes_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.toml");
    fs::write(
        &cfg,
        r#"
[pretrain]
epochs = 10
hidden_dim = 8

[detector]
iterations = 5

[benchmark]
name = "tiny"
methods = ["sigood", "raw-energy"]
seeds = [0, 1]
sweeps = [{ parameter = "iterations", values = [2, 4] }]

[benchmark.protocol]
kind = "ood"

[benchmark.protocol.id]
source = "synth"
family = "er-feature-shift"
n_graphs = 15
nodes_min = 4
nodes_max = 6
edge_prob = 0.3
feature_mean = [0.0, 0.0]
feature_std = 1.0
seed = 1

[benchmark.protocol.ood]
source = "synth"
family = "er-feature-shift"
n_graphs = 3
nodes_min = 4
nodes_max = 6
edge_prob = 0.3
feature_mean = [3.0, 3.0]
feature_std = 1.0
seed = 2
"#,
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = sigood(&["bench", "--config", path(&cfg), "--out", path(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["report.csv", "aggregate.csv", "reference.csv", "sweep.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let report = fs::read_to_string(a.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    let sweep = fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert!(sweep.contains("\n0,iterations,2,") && sweep.contains("\n1,iterations,4,"));
    assert!(a.join("timings.csv").exists());
}

#[test]
fn bench_without_section_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.toml");
    fs::write(&cfg, "").unwrap();
    assert_eq!(sigood(&["bench", "--config", path(&cfg)]).status.code(), Some(2));
    fs::write(&cfg, "unknown = 3").unwrap();
    let o = sigood(&["bench", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown"));
}

#[test]
fn verify_passes() {
    let o = sigood(&["verify", "--instances", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("epo-pipeline"));
    assert!(stdout(&o).contains("reward-derivation"));
}
