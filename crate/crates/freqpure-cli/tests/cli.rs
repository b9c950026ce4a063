//! Black-box tests against the compiled binary: exit codes, artifact
//! layout, and cross-process determinism. One tiny training run is shared
//! by everything that needs weights.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::LazyLock;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_freqpure");

/// Desk-scale config; `out_dir` is always overridden with `--out`.
const TINY_CONFIG: &str = r#"
seed = 3
histogram_bins = 8

[dataset]
height = 16
width = 16
class_count = 4
train = 200
val = 60
test = 80

[train]
classifier_epochs = 14
score_epochs = 2
score_features = 8

[attack]
lambda = 1.0
max_iterations = 25
patience = 3

[purify]
t_star = 0.1
dt = 0.005

[eval]
subset_size = 12
subset_count = 1
repeats = 1
modes = ["pixel"]
t_star_list = [0.1]
seeds = [0]
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary spawns")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code_of(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn assert_ok(out: &Output, what: &str) {
    assert_eq!(
        code_of(out),
        0,
        "{what} failed:\n{}",
        stderr_of(out)
    );
}

/// Shared workspace with a written config and one completed `train` run.
struct Trained {
    _dir: TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Trained {
    fn config(&self) -> &str {
        self.config.to_str().unwrap()
    }

    fn out(&self) -> &str {
        self.out.to_str().unwrap()
    }
}

static TRAINED: LazyLock<Trained> = LazyLock::new(|| {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let out = dir.path().join("run");
    let result = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&result, "fixture train");
    Trained { _dir: dir, config, out }
});

fn read_json(path: &Path) -> serde_json::Value {
    let bytes = std::fs::read(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_slice(&bytes)
        .unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

fn str_field(v: &serde_json::Value, key: &str) -> String {
    v.get(key)
        .and_then(|f| f.as_str())
        .unwrap_or_else(|| panic!("missing string field {key} in {v}"))
        .to_string()
}

#[test]
fn help_and_version_exit_zero() {
    let help = run(&["--help"]);
    assert_eq!(code_of(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["train", "attack", "purify", "eval", "analyze"] {
        assert!(text.contains(sub), "--help should mention {sub}");
    }
    assert_eq!(code_of(&run(&["--version"])), 0);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(code_of(&run(&["frobnicate"])), 1);
}

#[test]
fn bad_attack_mode_lists_the_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "attack",
        "--mode",
        "sideways",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 1);
    let msg = stderr_of(&out);
    for name in ["pixel", "mag", "phase", "phase_mag", "all"] {
        assert!(msg.contains(name), "mode error should list {name}: {msg}");
    }
}

#[test]
fn out_of_range_t_star_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "purify",
        "--input",
        "does-not-matter.json",
        "--t-star",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 1);
    assert!(
        stderr_of(&out).contains("(0, 1)"),
        "message should state the open interval: {}",
        stderr_of(&out)
    );
}

#[test]
fn missing_weights_is_component_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code_of(&out), 2);
    assert!(
        stderr_of(&out).contains("train"),
        "error should point at the train subcommand: {}",
        stderr_of(&out)
    );
}

#[test]
fn invalid_dataset_config_fails_before_writing_weights() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[dataset]\nheight = 10\nwidth = 10\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 1);
    assert!(
        !out_dir.join("classifier.json").exists(),
        "usage failure must not leave weight files behind"
    );
}

#[test]
fn train_writes_weights_curves_and_summary() {
    let t = &*TRAINED;
    for name in [
        "classifier.json",
        "score.json",
        "classifier-curve.csv",
        "score-curve.csv",
        "train-summary.json",
    ] {
        assert!(t.out.join(name).exists(), "train should write {name}");
    }
    let summary = read_json(&t.out.join("train-summary.json"));
    assert_eq!(str_field(&summary, "schema"), "train-summary/1");
    assert!(!str_field(&summary, "config_hash").is_empty());
    assert!(!str_field(&summary, "classifier_hash").is_empty());
    assert!(!str_field(&summary, "score_hash").is_empty());
    let curve = std::fs::read_to_string(t.out.join("classifier-curve.csv")).unwrap();
    // Header plus one row per configured epoch.
    assert_eq!(curve.lines().count(), 15, "curve rows:\n{curve}");
}

#[test]
fn retraining_reproduces_weight_hashes_and_seed_changes_them() {
    let t = &*TRAINED;
    let first = read_json(&t.out.join("train-summary.json"));

    let dir = tempfile::tempdir().unwrap();
    let same = dir.path().join("same");
    let result = run(&["train", "--config", t.config(), "--out", same.to_str().unwrap()]);
    assert_ok(&result, "retrain");
    let second = read_json(&same.join("train-summary.json"));
    assert_eq!(
        str_field(&first, "classifier_hash"),
        str_field(&second, "classifier_hash"),
        "same config and seed must reproduce the classifier bit-for-bit"
    );
    assert_eq!(
        str_field(&first, "score_hash"),
        str_field(&second, "score_hash")
    );

    let reseeded = dir.path().join("reseeded");
    let result = run(&[
        "train",
        "--config",
        t.config(),
        "--out",
        reseeded.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_ok(&result, "reseeded train");
    let third = read_json(&reseeded.join("train-summary.json"));
    assert_ne!(
        str_field(&first, "classifier_hash"),
        str_field(&third, "classifier_hash"),
        "--seed must reach the trainer"
    );
}

#[test]
fn attack_purify_eval_analyze_chain_writes_all_artifacts() {
    let t = &*TRAINED;

    let result = run(&["attack", "--config", t.config(), "--out", t.out(), "--mode", "pixel"]);
    assert_ok(&result, "attack");
    for name in [
        "clean-subset.json",
        "adversarial-pixel.json",
        "perturbation-pixel.json",
        "attack-trace-pixel.csv",
        "spectrum-pixel.csv",
        "png/clean-00.png",
        "png/adversarial-pixel-00.png",
        "png/perturbation-pixel-x20-00.png",
    ] {
        assert!(t.out.join(name).exists(), "attack should write {name}");
    }
    let adv = read_json(&t.out.join("adversarial-pixel.json"));
    let meta = adv.get("meta").expect("batch meta");
    assert_eq!(str_field(meta, "mode"), "pixel");
    assert!(meta.get("adversarial_accuracy_pct").is_some());

    let adv_path = t.out.join("adversarial-pixel.json");
    let result = run(&[
        "purify",
        "--config",
        t.config(),
        "--out",
        t.out(),
        "--input",
        adv_path.to_str().unwrap(),
        "--snapshots",
        "2",
    ]);
    assert_ok(&result, "purify");
    assert!(t.out.join("purified-adversarial-pixel.json").exists());
    // --snapshots 2 -> 1 diffused + 2 intermediate + 1 final frame per sample.
    for name in [
        "purify-adversarial-pixel-00-00-diffused.png",
        "purify-adversarial-pixel-00-01-step.png",
        "purify-adversarial-pixel-00-02-step.png",
        "purify-adversarial-pixel-00-final.png",
    ] {
        assert!(t.out.join("png").join(name).exists(), "missing frame {name}");
    }
    let sample_count = read_json(&adv_path)["shape"][0].as_u64().unwrap() as usize;
    let frames = std::fs::read_dir(t.out.join("png"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("purify-adversarial-pixel-")
        })
        .count();
    assert_eq!(frames, sample_count * 4, "frame files per sample");

    let result = run(&["eval", "--config", t.config(), "--out", t.out()]);
    assert_ok(&result, "eval");
    for name in ["report.json", "report.txt", "run-summary.json"] {
        assert!(t.out.join(name).exists(), "eval should write {name}");
    }
    let report_path = t.out.join("report.json");
    let first = std::fs::read(&report_path).unwrap();
    let report = read_json(&report_path);
    assert_eq!(str_field(&report, "schema"), "eval-report/1");
    assert!(report["records"].as_array().map_or(0, Vec::len) > 0);

    // A second process with the same config must reproduce the report
    // byte-for-byte (the attack comes back from the on-disk cache).
    let result = run(&["eval", "--config", t.config(), "--out", t.out()]);
    assert_ok(&result, "eval rerun");
    assert!(t.out.join("cache").read_dir().unwrap().next().is_some());
    let second = std::fs::read(&report_path).unwrap();
    assert_eq!(first, second, "report.json changed across identical runs");

    let pert_path = t.out.join("perturbation-pixel.json");
    let result = run(&[
        "analyze",
        "--config",
        t.config(),
        "--out",
        t.out(),
        "--input",
        pert_path.to_str().unwrap(),
        "--bins",
        "6",
    ]);
    assert_ok(&result, "analyze");
    let csv = std::fs::read_to_string(t.out.join("spectrum-perturbation-pixel.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7, "header plus one row per bin:\n{csv}");
    assert!(csv.starts_with("radius,log_energy"));
}

#[test]
fn analyze_rejects_degenerate_bin_counts() {
    let t = &*TRAINED;
    let out = run(&[
        "analyze",
        "--config",
        t.config(),
        "--out",
        t.out(),
        "--input",
        "unused.json",
        "--bins",
        "1",
    ]);
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).contains("bins"));
}
