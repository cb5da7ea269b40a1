use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
schema_version = 1
seed = 3
bits = 2
average = 3

[dataset]
kind = "blobs"
num_classes = 3
samples_per_class = 40
test_samples_per_class = 20
dims = 4
spread = 0.3

[network]
kind = "mlp"
hidden = [8]

[pretrain]
batch_size = 16

[pretrain.schedule]
kind = "step_decay"
initial_lr = 0.1
factor = 0.1
milestones = [6, 9]
total_epochs = 10

[retrain]
epochs = 12
period = 3
batch_size = 16

[finetune]
epochs = 2
batch_size = 16
"#;

fn sqwa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqwa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn full_run_then_eval_and_losscape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let o = sqwa(&["sqwa", "--config", &cfg, "--out", run_s]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("Fine-tune"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 + 3);

    let o = sqwa(&["eval", "--run", run_s]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(!text(&o).contains("MISMATCH"));

    let o = sqwa(&["eval", "--run", run_s, "final", "averaged"]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 1 + 2 * 2);

    let csv = dir.path().join("surface.csv");
    let o = sqwa(&[
        "losscape",
        "--run",
        run_s,
        "--resolution",
        "6",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 36);
    assert!(dir.path().join("surface.meta.json").is_file());
}

#[test]
fn stage_by_stage_matches_single_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let staged = dir.path().join("staged");
    let whole = dir.path().join("whole");
    for stage in ["pretrain", "quantize", "retrain-cyclical", "average", "finetune"] {
        let o = sqwa(&[stage, "--config", &cfg, "--out", staged.to_str().unwrap()]);
        assert!(o.status.success(), "{stage}: {}", text(&o));
    }
    let o = sqwa(&["sqwa", "--config", &cfg, "--out", whole.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["manifest.json", "payload.bin"] {
        assert_eq!(
            fs::read(staged.join("final").join(f)).unwrap(),
            fs::read(whole.join("final").join(f)).unwrap()
        );
    }
}

#[test]
fn failing_stage_exits_nonzero_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let o = sqwa(&[
        "sqwa",
        "--config",
        &cfg,
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--pretrained",
        dir.path().join("nowhere").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `pretrain` failed"));
}

#[test]
fn inconsistent_config_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let o = sqwa(&["sqwa", "--config", &cfg, "--out", "unused", "--average", "9", "--dry-run"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("captures"));
}

#[test]
fn dry_run_prints_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let o = sqwa(&["sqwa", "--config", &cfg, "--out", "x", "--seed", "11", "--dry-run"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("seed = 11"));
    assert!(out.contains("max_lr = 0.01"));
    assert!(out.contains("lr = 0.001"));
}
