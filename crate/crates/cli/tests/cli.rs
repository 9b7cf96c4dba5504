use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = r#"{
  "model": {"kind": "lstm_stack", "embed": 4, "hidden": [8, 8]},
  "train": {"epochs": 2, "batch_size": 4, "unroll_steps": 10, "learning_rate": 2.0}
}"#;

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let text: String = include_str!("../../core/data/sonnets.txt").chars().take(4000).collect();
        std::fs::write(dir.path().join("corpus.txt"), text).unwrap();
        std::fs::write(dir.path().join("config.json"), CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_iss")).current_dir(self.dir.path()).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let mut args = vec!["train", "--config", "config.json", "--corpus", "corpus.txt", "--out", out];
        args.extend_from_slice(extra);
        self.ok(&args)
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn perplexity(stdout: &str) -> f64 {
    stdout.trim().strip_prefix("perplexity ").unwrap().parse().unwrap()
}

#[test]
fn training_twice_gives_identical_metrics() {
    let w = Work::new();
    let flags = ["--lambda", "0", "--tau", "0", "--seed", "7"];
    w.train("a.iss", &[&flags[..], &["--metrics", "a.csv"]].concat());
    w.train("b.iss", &[&flags[..], &["--metrics", "b.csv"]].concat());
    let a = read(&w.path("a.csv"));
    assert_eq!(a, read(&w.path("b.csv")));
    assert_eq!(std::fs::read(w.path("a.iss")).unwrap(), std::fs::read(w.path("b.iss")).unwrap());
    assert!(a.starts_with("epoch,learning_rate,"));
    assert_eq!(a.lines().count(), 3);
}

#[test]
fn analyze_dense_model_reports_no_zero_groups() {
    let w = Work::new();
    w.train("m.iss", &["--lambda", "0", "--tau", "0"]);
    let out = w.ok(&["analyze", "--model", "m.iss", "--out-dir", "report"]);
    assert_eq!(out.matches(" 0 of     8 components zero").count(), 2, "{out}");
    let csv = read(&w.path("report/sparsity.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    let fp = lines[1].rsplit(',').next().unwrap();
    assert_eq!(fp.len(), 64);
    for f in ["tensors.csv", "group_norms.csv", "histogram.csv"] {
        let text = read(&w.path("report").join(f));
        assert!(text.lines().next().unwrap().ends_with("fingerprint"));
        assert!(text.lines().skip(1).all(|l| l.ends_with(fp)), "{f}");
    }
}

#[test]
fn compact_then_eval_matches() {
    let w = Work::new();
    w.train("sparse.iss", &["--lambda", "0.001", "--tau", "0.01"]);
    let analysis = w.ok(&["analyze", "--model", "sparse.iss"]);
    let out = w.ok(&["compact", "--model", "sparse.iss", "--out", "small.iss", "--plan", "plan.json", "--report", "eq.json"]);
    assert!(out.contains("max output difference 0e0"), "{analysis}\n{out}");
    let plan: serde_json::Value = serde_json::from_str(&read(&w.path("plan.json"))).unwrap();
    let layers = plan["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    let kept: usize = layers.iter().map(|l| l["kept"].as_array().unwrap().len()).sum();
    assert!(kept < 16, "{analysis}");
    let eval = |m: &str| perplexity(&w.ok(&["eval", "--model", m, "--corpus", "corpus.txt"]));
    let (big, small) = (eval("sparse.iss"), eval("small.iss"));
    assert!((big - small).abs() <= 1e-6 * big, "{big} vs {small}");
}

#[test]
fn compact_needs_exact_zeros() {
    let w = Work::new();
    w.train("m.iss", &["--lambda", "0", "--tau", "0"]);
    let out = w.run(&["compact", "--model", "m.iss", "--out", "c.iss", "--plan", "p.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("threshold record"));
    w.ok(&["compact", "--model", "m.iss", "--out", "c.iss", "--plan", "p.json", "--threshold", "1e-4"]);
    w.ok(&["compact", "--model", "m.iss", "--out", "d.iss", "--plan", "q.json", "--zero-tol", "0"]);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let w = Work::new();
    assert_eq!(w.run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(w.run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(w.run(&["eval", "--model", "missing.iss"]).status.code(), Some(1));
    std::fs::write(w.path("junk.iss"), b"{\"format_version\": 1}\n").unwrap();
    let out = w.run(&["analyze", "--model", "junk.iss"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn export_groups_and_gradcheck() {
    let w = Work::new();
    w.ok(&["export-groups", "--config", "config.json", "--out", "groups.json"]);
    let doc: serde_json::Value = serde_json::from_str(&read(&w.path("groups.json"))).unwrap();
    assert_eq!(doc["groups"].as_array().unwrap().len(), 16);
    assert_eq!(doc["policy"], "distinct");
    let out = w.ok(&["gradcheck", "--lstm-configs", "3", "--rhn-configs", "2"]);
    assert_eq!(out.matches(" ok").count(), 5);
}

#[test]
fn bench_writes_csv() {
    let w = Work::new();
    w.ok(&["--threads", "2", "bench", "--hidden", "16", "--batch", "3", "--levels", "0,0.5", "--out", "bench.csv"]);
    let csv = read(&w.path("bench.csv"));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("case_id,shape,batch,s,k,"));
    assert!(csv.lines().nth(1).unwrap().starts_with("0,64x32,3,0.0,0,"));
}

#[test]
fn calibrate_tau_writes_thresholded_model() {
    let w = Work::new();
    w.train("m.iss", &["--lambda", "0", "--tau", "0"]);
    let out = w.ok(&["calibrate-tau", "--model", "m.iss", "--corpus", "corpus.txt", "--grid", "0,1e-6", "--out", "t.iss"]);
    assert!(out.contains("chosen tau"));
    w.ok(&["compact", "--model", "t.iss", "--out", "c.iss", "--plan", "p.json"]);
}
