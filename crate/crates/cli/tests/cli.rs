use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dac_core::trainer::TrainConfig;

const TINY: &str = r#"
steps = 20
batch_size = 16
diffusion_steps = 5
ensemble_size = 2
next_actions = 2
actor_hidden = 16
actor_depth = 2
critic_hidden = 16
critic_depth = 2
scale_sample = 64
metrics_every = 5
checkpoint_every = 10
"#;

fn dac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dac")).current_dir(dir).args(args).args(["--log-level", "warn"]).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A workspace with a 100-point bandit dataset, a tiny config and a trained run.
fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    assert_eq!(code(&dac(dir.path(), &["make-data", "--env", "bandit", "--n", "100", "--out", "b.dacd"])), 0);
    let o = dac(dir.path(), &["--config", "tiny.toml", "train", "--data", "b.dacd", "--out-dir", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn make_data_writes_dataset_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dac(dir.path(), &["make-data", "--env", "bandit", "--n", "400", "--seed", "0", "--out", "b.dacd"])), 0);
    let ds = dac_core::data::load_dataset(&dir.path().join("b.dacd")).unwrap();
    assert_eq!(ds.len(), 400);
    assert!(dir.path().join("b.dacd.meta.json").exists());
    assert_eq!(code(&dac(dir.path(), &["make-data", "--env", "lq", "--n", "5000", "--out", "lq.dacd"])), 0);
    let meta = dac_core::data::load_meta(&dir.path().join("lq.dacd")).unwrap();
    assert_eq!(meta.env_name(), "lq");
}

#[test]
fn make_data_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.dacd", "b.dacd"] {
        dac(dir.path(), &["make-data", "--env", "bandit", "--seed", "3", "--out", out]);
    }
    assert_eq!(std::fs::read(dir.path().join("a.dacd")).unwrap(), std::fs::read(dir.path().join("b.dacd")).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dac(dir.path(), &["make-data", "--env", "bandit"])), 2);
    assert_eq!(code(&dac(dir.path(), &["make-data", "--env", "bandit", "--pattern", "spiral", "--out", "x"])), 2);
    assert_eq!(code(&dac(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&dac(dir.path(), &["verify", "--only", "lemma9"])), 2);
}

#[test]
fn conflicting_multiplier_flags_are_rejected() {
    let dir = trained();
    let o = dac(dir.path(), &["--config", "tiny.toml", "train", "--data", "b.dacd", "--out-dir", "r2", "--b", "1.3"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("eta.b"));
    assert!(!dir.path().join("r2/run.json").exists());
}

#[test]
fn train_writes_manifest_metrics_and_checkpoints() {
    let dir = trained();
    let run = dir.path().join("run");
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    let cfg = TrainConfig::from_toml(TINY).unwrap();
    assert_eq!(manifest["config_hash"], cfg.hash());
    assert!(manifest["finished_unix"].is_u64());
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 1 + 4);
    assert_eq!(std::fs::read_to_string(run.join("latest")).unwrap().trim(), "ckpt-20");
}

#[test]
fn eval_emits_report_and_detects_drift() {
    let dir = trained();
    let o = dac(dir.path(), &["eval", "--ckpt", "run", "--data", "b.dacd", "--env", "bandit", "--rollouts", "80", "--json", "e.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("e.json")).unwrap()).unwrap();
    assert_eq!(r["env"], "bandit");
    assert_eq!(r["n_rollouts"], 80);
    let f = r["in_support_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f));

    assert_eq!(code(&dac(dir.path(), &["eval", "--ckpt", "run", "--data", "b.dacd", "--env", "lq"])), 2);
    dac(dir.path(), &["make-data", "--env", "bandit", "--n", "100", "--seed", "9", "--out", "other.dacd"]);
    assert_eq!(code(&dac(dir.path(), &["eval", "--ckpt", "run", "--data", "other.dacd"])), 2);
    assert_eq!(code(&dac(dir.path(), &["eval", "--ckpt", "missing", "--data", "b.dacd"])), 2);
}

#[test]
fn eval_is_deterministic_given_seed() {
    let dir = trained();
    for name in ["a.json", "b.json"] {
        dac(dir.path(), &["eval", "--ckpt", "run/ckpt-10", "--data", "b.dacd", "--seed", "4", "--json", name]);
    }
    assert_eq!(std::fs::read(dir.path().join("a.json")).unwrap(), std::fs::read(dir.path().join("b.json")).unwrap());
}

#[test]
fn plot_panels_and_csv_only() {
    let dir = trained();
    let o = dac(dir.path(), &["plot", "--ckpt", "run", "run/ckpt-10", "--data", "b.dacd", "--out-dir", "fig", "--grid", "11", "--samples", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(dir.path().join("fig/figure.svg")).unwrap();
    assert_eq!(svg.matches("<g>").count(), 2);
    let csv = std::fs::read_to_string(dir.path().join("fig/figure.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * (100 + 121 + 20));

    let o = dac(dir.path(), &["plot", "--ckpt", "run", "--data", "b.dacd", "--out-dir", "only", "--csv-only", "--grid", "5"]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("only/figure.csv").exists());
    assert!(!dir.path().join("only/figure.svg").exists());

    assert_eq!(code(&dac(dir.path(), &["plot", "--ckpt", "nowhere", "--data", "b.dacd"])), 2);
}

#[test]
fn verify_subset_and_mutation() {
    let dir = tempfile::tempdir().unwrap();
    let o = dac(dir.path(), &["verify", "--only", "lemma1", "--json", "v.json"]);
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("v.json")).unwrap()).unwrap();
    assert_eq!(r["checks"].as_array().unwrap().len(), 1);
    assert_eq!(r["checks"][0]["name"], "lemma1");
    assert_eq!(r["passed"], true);

    let o = dac(dir.path(), &["verify", "--only", "theorem2", "--draws", "100000", "--mutate-noise-scale"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).starts_with("FAIL theorem2"));
}

#[test]
fn bench_single_row() {
    let dir = trained();
    let o = dac(dir.path(), &["--config", "tiny.toml", "bench-step", "--data", "b.dacd", "--t-list", "5", "--iters", "2", "--warmup", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn schedule_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = dac(dir.path(), &["schedule", "--steps", "5", "--json"]);
    assert_eq!(code(&o), 0);
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);
    assert_eq!(rows[0]["posterior_variance"], 0.0);
    assert_eq!(code(&dac(dir.path(), &["schedule", "--steps", "0"])), 2);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            TrainConfig::from_toml(&std::fs::read_to_string(&p).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
    let soft = TrainConfig::from_toml(&std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/bandit_soft.toml")).unwrap()).unwrap();
    assert_eq!(soft, TrainConfig::bandit_reference());
}
