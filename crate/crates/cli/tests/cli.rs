//! End-to-end tests of the `trimodal` binary: every subcommand runs against
//! a small configuration and its artifacts are checked on disk.

use std::collections::HashSet;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_trimodal")
}

const TINY_TOML: &str = r#"
seed = 3
[data]
n = 80
view_size = 8
[model]
view_size = 8
hidden = 12
feature = 10
text_embed = 6
align = 8
repr = 2
[maninneg]
batch_size = 8
anneal_end_step = 20
[optimizer]
warmup_steps = 3
total_steps = 12
[le]
max_epochs = 15
patience = 5
[ft]
max_epochs = 3
patience = 2
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.toml"), TINY_TOML).unwrap();
        Self { dir }
    }

    fn config(&self) -> String {
        self.dir.path().join("config.toml").display().to_string()
    }

    fn out(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }

    fn run(&self, args: &[&str], envs: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(bin());
        cmd.args(args);
        for (k, v) in envs {
            cmd.env(k, v);
        }
        cmd.output().expect("binary runs")
    }

    fn run_ok(&self, args: &[&str], envs: &[(&str, &str)]) -> Output {
        let out = self.run(args, envs);
        assert!(
            out.status.success(),
            "command {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_complete_artifact_set() {
    let ws = Workspace::new();
    let out = ws.out("data");
    ws.run_ok(&["--config", &ws.config(), "--out", &out, "gen-data"], &[]);
    for f in
        ["images.bin", "instances.jsonl", "manifestations.jsonl", "reports.jsonl", "split.json", "manifest.json"]
    {
        assert!(Path::new(&out).join(f).exists(), "missing {f}");
    }
    let split = read_json(&Path::new(&out).join("split.json"));
    let collect = |k: &str| -> Vec<u64> {
        split[k].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect()
    };
    let (train, val, test) = (collect("train"), collect("val"), collect("test"));
    assert_eq!(train.len() + val.len() + test.len(), 80);
    let all: HashSet<u64> = train.iter().chain(&val).chain(&test).copied().collect();
    assert_eq!(all.len(), 80, "split partitions must be disjoint and exhaustive");
}

#[test]
fn pretrain_writes_per_step_metrics_and_a_loadable_summary() {
    let ws = Workspace::new();
    let out = ws.out("run");
    ws.run_ok(&["--config", &ws.config(), "--out", &out, "pretrain"], &[]);
    let metrics = std::fs::read_to_string(Path::new(&out).join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, (0..12).collect::<Vec<u64>>(), "one record per step, in order");
    assert!(Path::new(&out).join("checkpoint.bin").exists());
    let summary = read_json(&Path::new(&out).join("summary.json"));
    assert_eq!(summary["steps"], 12);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn pretraining_twice_yields_identical_checkpoints() {
    let ws = Workspace::new();
    let (a, b) = (ws.out("a"), ws.out("b"));
    ws.run_ok(&["--config", &ws.config(), "--out", &a, "pretrain"], &[]);
    ws.run_ok(&["--config", &ws.config(), "--out", &b, "pretrain"], &[]);
    let ca = std::fs::read(Path::new(&a).join("checkpoint.bin")).unwrap();
    let cb = std::fs::read(Path::new(&b).join("checkpoint.bin")).unwrap();
    assert_eq!(ca, cb, "same config and seed must reproduce the checkpoint bit-for-bit");
}

#[test]
fn environment_overrides_reach_the_run() {
    let ws = Workspace::new();
    let (a, b) = (ws.out("a"), ws.out("b"));
    ws.run_ok(&["--config", &ws.config(), "--out", &a, "pretrain"], &[]);
    ws.run_ok(&["--config", &ws.config(), "--out", &b, "pretrain"], &[("TRIMODAL_SEED", "9")]);
    let ca = std::fs::read(Path::new(&a).join("checkpoint.bin")).unwrap();
    let cb = std::fs::read(Path::new(&b).join("checkpoint.bin")).unwrap();
    assert_ne!(ca, cb, "an overridden seed must change the training trajectory");
    let cfg_echo = std::fs::read_to_string(Path::new(&b).join("config.toml")).unwrap();
    assert!(cfg_echo.contains("seed = 9"), "echoed config must reflect the override");
}

#[test]
fn resume_from_cadence_checkpoint_matches_the_full_run() {
    let ws = Workspace::new();
    let (full, resumed) = (ws.out("full"), ws.out("resumed"));
    let env = [("TRIMODAL_CHECKPOINT_EVERY", "6")];
    ws.run_ok(&["--config", &ws.config(), "--out", &full, "pretrain"], &env);
    let mid = Path::new(&full).join("checkpoint-000006.bin");
    assert!(mid.exists(), "cadence checkpoint at step 6");
    ws.run_ok(
        &["--config", &ws.config(), "--out", &resumed, "pretrain", "--resume", &mid.display().to_string()],
        &env,
    );
    let a = std::fs::read(Path::new(&full).join("checkpoint.bin")).unwrap();
    let b = std::fs::read(Path::new(&resumed).join("checkpoint.bin")).unwrap();
    assert_eq!(a, b, "resumed training must land on the identical final checkpoint");
}

#[test]
fn eval_aggregates_over_seeds_and_writes_csv() {
    let ws = Workspace::new();
    let out = ws.out("run");
    ws.run_ok(&["--config", &ws.config(), "--out", &out, "pretrain"], &[]);
    let ck = Path::new(&out).join("checkpoint.bin").display().to_string();
    ws.run_ok(
        &[
            "--config", &ws.config(), "--out", &out,
            "eval", "--checkpoint", &ck, "--protocol", "lp", "--seeds", "0,1,2",
            "--random-baseline",
        ],
        &[],
    );
    let summary = read_json(&Path::new(&out).join("eval_lp.json"));
    assert_eq!(summary["per_seed"].as_array().unwrap().len(), 3);
    let mean = summary["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
    assert!(summary["random_baseline"]["mean"].as_f64().is_some());
    let csv = std::fs::read_to_string(Path::new(&out).join("eval_lp.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus one row per seed");
    assert!(csv.starts_with("seed,test_auc"));
}

#[test]
fn eval_rejects_a_checkpoint_with_different_dimensions() {
    let ws = Workspace::new();
    let out = ws.out("run");
    ws.run_ok(&["--config", &ws.config(), "--out", &out, "pretrain"], &[]);
    let ck = Path::new(&out).join("checkpoint.bin").display().to_string();
    let fail = ws.run(
        &["--config", &ws.config(), "--out", &out, "eval", "--checkpoint", &ck, "--protocol", "lp"],
        &[("TRIMODAL_MODEL_FEATURE", "16")],
    );
    assert!(!fail.status.success());
    let err = String::from_utf8_lossy(&fail.stderr);
    assert!(err.contains("dimensions"), "error should name the dimension mismatch: {err}");
}

#[test]
fn ablation_table_covers_the_grid() {
    let ws = Workspace::new();
    let out = ws.out("ablate");
    ws.run_ok(
        &["--config", &ws.config(), "--out", &out, "ablate", "--protocol", "lp", "--seeds", "0"],
        &[],
    );
    let csv = std::fs::read_to_string(Path::new(&out).join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 8, "header plus seven grid cells");
    assert!(lines[1].starts_with("image_only,I,"));
    assert!(lines.last().unwrap().starts_with("trimodal,I+M+T,true,maninneg,"));
}

#[test]
fn sample_audit_histogram_is_normalized() {
    let ws = Workspace::new();
    let out = ws.out("audit");
    ws.run_ok(
        &["--config", &ws.config(), "--out", &out, "sample-audit", "--batches", "300", "--step", "0"],
        &[],
    );
    let csv = std::fs::read_to_string(Path::new(&out).join("sample_audit.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "distance,empirical,analytic");
    let mut emp_sum = 0.0;
    let mut ana_sum = 0.0;
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let d: u32 = cells[0].parse().unwrap();
        assert!((1..=18).contains(&d), "distances confined to the sampling window");
        emp_sum += cells[1].parse::<f64>().unwrap();
        ana_sum += cells[2].parse::<f64>().unwrap();
        rows += 1;
    }
    assert_eq!(rows, 18);
    assert!((emp_sum - 1.0).abs() < 1e-9, "empirical histogram sums to 1, got {emp_sum}");
    assert!((ana_sum - 1.0).abs() < 1e-9, "analytic pmf sums to 1, got {ana_sum}");
    let summary = read_json(&Path::new(&out).join("sample_audit.json"));
    assert_eq!(summary["mu"].as_f64().unwrap(), 11.0);
    assert!(summary["tv_distance"].as_f64().unwrap() >= 0.0);
}

#[test]
fn diag_writes_all_three_panels() {
    let ws = Workspace::new();
    let out = ws.out("run");
    ws.run_ok(&["--config", &ws.config(), "--out", &out, "pretrain"], &[]);
    let ck = Path::new(&out).join("checkpoint.bin").display().to_string();
    ws.run_ok(
        &[
            "--config", &ws.config(), "--out", &out,
            "diag", "--checkpoint", &ck, "--permutations", "100", "--bins", "4", "--min-count", "2",
        ],
        &[],
    );
    for f in ["angular.csv", "planar.csv", "alignment.csv", "confusion.csv", "reliability.csv"] {
        assert!(Path::new(&out).join(f).exists(), "missing {f}");
    }
    let diag = read_json(&Path::new(&out).join("diag.json"));
    for section in ["uniformity", "calibration", "retrieval"] {
        assert!(diag.get(section).is_some(), "missing section {section}");
    }
    let p = diag["retrieval"]["permutation"]["p_value"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);
    assert!(diag["calibration"]["ece"].as_f64().unwrap() >= 0.0);
    assert!(diag["uniformity"]["angular_max_min_ratio"].as_f64().unwrap() >= 1.0);
}

#[test]
fn invalid_config_fails_cleanly() {
    let ws = Workspace::new();
    std::fs::write(ws.dir.path().join("bad.toml"), "unknown_key = 1\n").unwrap();
    let bad = ws.dir.path().join("bad.toml").display().to_string();
    let out = ws.run(&["--config", &bad, "--out", &ws.out("x"), "gen-data"], &[]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown_key") || err.contains("unknown field"), "stderr: {err}");
}
