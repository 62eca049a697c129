use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_config() -> PathBuf {
    workspace().join("configs/desk.cfg")
}

/// Small enough to train in a few seconds.
const QUICK: &[&str] = &[
    "--set",
    "data.train_pairs=60",
    "--set",
    "data.val_pairs=20",
    "--set",
    "data.test_pairs=10",
    "--set",
    "data.trajectories=4",
    "--set",
    "data.variable=false",
    "--set",
    "training.steps=100",
    "--set",
    "training.eval_every=50",
    "--set",
    "sweep.count=2",
    "--set",
    "evaluation.dts=[0.1, 0.2]",
    "--set",
    "evaluation.integrators=[\"RK1\", \"RK4\"]",
];

fn hogn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hogn"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env_remove("HOGN_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn with_config(sub: &str, extra: &[&str]) -> Vec<String> {
    let mut v = vec![sub.to_string(), "--config".into(), desk_config().display().to_string()];
    v.extend(QUICK.iter().map(|s| s.to_string()));
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_ok(out: &Path, args: &[String]) -> Value {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = hogn(out, &refs);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("summary is JSON")
}

fn read_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    for flag in ["--help", "--version"] {
        let o = hogn(dir.path(), &[flag]);
        assert_eq!(o.status.code(), Some(0));
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn unknown_subcommand_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = hogn(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(hogn(dir.path(), &[]).status.code(), Some(1));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config().display().to_string();
    let cases: Vec<Vec<&str>> = vec![
        vec!["generate", "--config", "/nonexistent/desk.cfg"],
        vec!["generate", "--config", &cfg, "--set", "training.unknown=1"],
        vec!["generate", "--config", &cfg, "--set", "data.fixed_dt=0.0123"],
        vec!["train", "--config", &cfg, "--model", "HOGN"],
        vec!["train", "--config", &cfg, "--model", "Nonsense"],
        vec!["evaluate", "--config", &cfg, "--run", "missing"],
        vec!["export"],
    ];
    for args in cases {
        let o = hogn(dir.path(), &args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = hogn(dir.path(), &["train", "--config", &cfg, "--model", "HOGN"]);
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["status"], "error");
    assert_eq!(err["kind"], "validation");
}

#[test]
fn io_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let args = with_config("generate", &[]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = hogn(&blocker.join("out"), &refs);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn desk_generate_matches_manifest_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let args = vec!["generate".to_string(), "--config".into(), desk_config().display().to_string()];
    let summary = run_ok(dir.path(), &args);
    let expect = [
        ("pairs-train.jsonl", 2000),
        ("pairs-val.jsonl", 400),
        ("pairs-test.jsonl", 400),
        ("pairs-train-variable.jsonl", 2000),
        ("traj-test-4-0.1.jsonl", 100),
        ("traj-test-5-0.5.jsonl", 100),
        ("traj-val-5-0.1.jsonl", 100),
    ];
    for (name, records) in expect {
        let path = dir.path().join(name);
        let lines = read_lines(&path);
        assert_eq!(lines[0]["records"], records, "{name}");
        assert_eq!(lines.len(), records + 1, "{name}");
    }
    assert_eq!(summary["files"].as_array().unwrap().len(), 6 + 18 + 2);

    let stanza: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("repro/generate.json")).unwrap()).unwrap();
    assert_eq!(stanza["seed"], 0);
    assert_eq!(stanza["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(stanza["version"], env!("CARGO_PKG_VERSION"));

    let before = std::fs::read(dir.path().join("pairs-train.jsonl")).unwrap();
    let stanza_before = std::fs::read(dir.path().join("repro/generate.json")).unwrap();
    run_ok(dir.path(), &args);
    assert_eq!(std::fs::read(dir.path().join("pairs-train.jsonl")).unwrap(), before);
    assert_eq!(std::fs::read(dir.path().join("repro/generate.json")).unwrap(), stanza_before);
}

#[test]
fn train_evaluate_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    run_ok(out, &with_config("generate", &[]));
    let trained = run_ok(out, &with_config("train", &["--model", "HOGN", "--integrator", "RK4"]));
    let run = trained["run"].as_str().unwrap().to_string();
    assert!(out.join(format!("ckpt-{run}.bin")).exists());
    run_ok(out, &with_config("train", &["--model", "DeltaGN"]));

    let eval_args = with_config("evaluate", &[]);
    run_ok(out, &eval_args);
    let metrics = out.join("metrics.jsonl");
    let lines = read_lines(&metrics);
    let cell = lines.iter().find(|l| {
        l["type"] == "eval"
            && l["model"] == "HOGN"
            && l["train_integrator"] == "RK4"
            && l["test_integrator"] == "RK4"
            && l["test_dt"] == 0.1
    });
    let cell = cell.expect("(HOGN, RK4, RK4, 0.1) row present");
    assert_eq!(cell["diagonal"], true);
    assert!(cell["rollout_rmse"].as_f64().unwrap() > 0.0);
    assert!(lines.iter().any(|l| l["type"] == "eval" && l["model"] == "TrueHamiltonian"));
    assert!(lines.iter().any(|l| l["type"] == "curve" && l["run"] == run.as_str() && l["step"] == 100));

    let first = std::fs::read(&metrics).unwrap();
    run_ok(out, &eval_args);
    assert_eq!(std::fs::read(&metrics).unwrap(), first, "re-evaluating rewrites identical metrics");

    let exported = run_ok(out, &["export".to_string()]);
    let table = read_lines(&out.join("export.jsonl"));
    assert_eq!(exported["rows"], table.len());
    assert!(table.iter().all(|l| l["type"] == "eval"));
    // HOGN and TrueHamiltonian × 2 integrators × 2 dts, DeltaGN × 2 dts.
    assert_eq!(table.len(), 2 * 2 * 2 + 2);

    let rolled = run_ok(out, &with_config("rollout", &["--run", &run, "--dt", "0.1", "--steps", "5"]));
    let traj = read_lines(Path::new(rolled["trajectory"].as_str().unwrap()));
    assert_eq!(traj[0]["records"], 2);
    assert_eq!(traj[1]["trajectory"]["states"].as_array().unwrap().len(), 6);
    assert_eq!(traj[2]["source"], "ground_truth");
}

#[test]
fn sweep_ranks_every_rate_and_checkpoints_the_selected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    run_ok(out, &with_config("generate", &[]));
    let summary = run_ok(out, &with_config("sweep", &["--model", "DeltaGN"]));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(summary["report"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(report["entries"].as_array().unwrap().len(), 2);
    assert_eq!(report["top"], 1);
    for run in summary["selected"].as_array().unwrap() {
        assert!(out.join(format!("ckpt-{}.bin", run.as_str().unwrap())).exists());
    }
    let sweeps = read_lines(&out.join("metrics.jsonl")).into_iter().filter(|l| l["type"] == "sweep").count();
    assert_eq!(sweeps, 2);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_config("generate", &[]);
    let o = Command::new(env!("CARGO_BIN_EXE_hogn")).args(&args).env("HOGN_OUT_DIR", dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("pairs-train.jsonl").exists());
}
