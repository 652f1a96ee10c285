//! End-to-end tests of the `selfflow` binary: every subcommand, the file
//! formats it emits, and the documented exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_selfflow"))
}

fn tmp(tag: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("cli_{tag}"));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    // a seconds-scale config: shallow model, small dataset, few steps
    let text = r#"
seed = 5
data_seed = 7
batch_size = 4
total_steps = 30
eval_interval = 0
checkpoint_interval = 15
sample_steps = 6
sampleshift = 1.78
eval_samples = 64

[dataset]
num_classes = 8
sigma_px = 0.05
n_train = 256
n_eval = 64
norm_mean = -0.5
norm_std = 0.67
format_version = 1

[model]
depth = 2
hidden = 16
heads = 2
token_dim = 16
tokens = 16
num_classes = 8
head_hidden = 8

[objective]
variant = "selfflow"
gamma = 0.8
ema_decay = 0.9999
student_tap = 0
teacher_tap = 1
masking_ratio = 0.25
plan_mode = "dual"
sra_teacher_scale = 0.8

[distribution]
kind = "uniform"

[optimizer]
lr = 0.001
beta1 = 0.9
beta2 = 0.95
eps = 1e-8
weight_decay = 0.01
"#;
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic_and_guarded() {
    let dir = tmp("gendata");
    let out1 = dir.join("a");
    let status = bin()
        .args(["gen-data", "--seed", "3", "--out"])
        .arg(&out1)
        .status()
        .unwrap();
    assert!(status.success());

    // re-run without --force is rejected with the config exit code
    let status = bin()
        .args(["gen-data", "--seed", "3", "--out"])
        .arg(&out1)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // byte-identical regeneration under --force
    let before = std::fs::read(out1.join("train.sfdata")).unwrap();
    let status = bin()
        .args(["gen-data", "--seed", "3", "--force", "--out"])
        .arg(&out1)
        .status()
        .unwrap();
    assert!(status.success());
    let after = std::fs::read(out1.join("train.sfdata")).unwrap();
    assert_eq!(before, after);

    // and the generated spec file round-trips through gen-data --spec
    let out2 = dir.join("b");
    let status = bin()
        .args(["gen-data", "--seed", "3", "--spec"])
        .arg(out1.join("spec.toml"))
        .arg("--out")
        .arg(&out2)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(before, std::fs::read(out2.join("train.sfdata")).unwrap());
}

#[test]
fn invalid_spec_rejected_with_config_code() {
    let dir = tmp("badspec");
    let spec = dir.join("bad.toml");
    std::fs::write(&spec, "num_classes = 0\nsigma_px = 0.05\nn_train = 8\nn_eval = 8\nnorm_mean = 0.0\nnorm_std = 1.0\nformat_version = 1\n").unwrap();
    let out = bin()
        .args(["gen-data", "--spec"])
        .arg(&spec)
        .args(["--out"])
        .arg(dir.join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_sample_eval_probe_pipeline() {
    let dir = tmp("pipeline");
    let config = write_tiny_config(&dir);
    let run_dir = dir.join("run");

    let status = bin()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&run_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let final_ckpt = run_dir.join("final.sfckpt");
    assert!(final_ckpt.exists());
    assert!(run_dir.join("step_000015.sfckpt").exists());

    // objective override produces a different metrics stream under the
    // same seed
    let run_v = dir.join("run_vanilla");
    let status = bin()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--objective", "vanilla", "--out"])
        .arg(&run_v)
        .status()
        .unwrap();
    assert!(status.success());
    let stream = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("l_gen"))
            .map(String::from)
            .collect()
    };
    assert_ne!(stream(&run_dir), stream(&run_v));

    // sampling: n outputs, deterministic given the seed, steps=1 works
    let s1 = dir.join("s1.sfdata");
    for _ in 0..2 {
        let status = bin()
            .args(["sample", "--checkpoint"])
            .arg(&final_ckpt)
            .args(["--n", "8", "--steps", "1", "--seed", "4", "--out"])
            .arg(&s1)
            .args(["--pgm"])
            .arg(dir.join("grid.pgm"))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let bytes = std::fs::read(&s1).unwrap();
    let status = bin()
        .args(["sample", "--checkpoint"])
        .arg(&final_ckpt)
        .args(["--n", "8", "--steps", "1", "--seed", "4", "--out"])
        .arg(dir.join("s2.sfdata"))
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(bytes, std::fs::read(dir.join("s2.sfdata")).unwrap());
    let pgm = std::fs::read(dir.join("grid.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));

    // a class outside the label range is a config error
    let status = bin()
        .args(["sample", "--checkpoint"])
        .arg(&final_ckpt)
        .args(["--n", "1", "--class", "99", "--out"])
        .arg(dir.join("s3.sfdata"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // eval twice with the same seed prints identical scores
    let eval_out = |seed: &str| -> String {
        let out = bin()
            .args(["eval", "--checkpoint"])
            .arg(&final_ckpt)
            .args(["--n", "64", "--seed", seed])
            .output()
            .unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    assert_eq!(eval_out("9"), eval_out("9"));

    // probe prints one accuracy per layer
    let out = bin()
        .args(["probe", "--checkpoint"])
        .arg(&final_ckpt)
        .args(["--tau", "0.25"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("probe accuracy")).count(), 2);

    // eval against a dataset whose spec differs from the checkpoint's is
    // rejected
    let other = dir.join("other");
    let status = bin()
        .args(["gen-data", "--seed", "99", "--out"])
        .arg(&other)
        .status()
        .unwrap();
    assert!(status.success());
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(&final_ckpt)
        .args(["--n", "32", "--dataset"])
        .arg(other.join("heldout.sfdata"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    // resume continues to the configured step count
    let resumed = dir.join("resumed");
    let status = bin()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&resumed)
        .args(["--resume"])
        .arg(run_dir.join("step_000015.sfckpt"))
        .status()
        .unwrap();
    assert!(status.success());
    let tail: Vec<String> = stream(&resumed);
    let full_tail: Vec<String> = stream(&run_dir)
        .into_iter()
        .filter(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["step"].as_u64().unwrap() > 15
        })
        .collect();
    // deterministic fields match the unbroken run
    let strip = |lines: &[String]| -> Vec<(u64, u64, u64)> {
        lines
            .iter()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (
                    v["step"].as_u64().unwrap(),
                    v["l_gen"].as_f64().unwrap().to_bits(),
                    v["grad_norm"].as_f64().unwrap().to_bits(),
                )
            })
            .collect()
    };
    assert_eq!(strip(&tail), strip(&full_tail));
}

#[test]
fn diverging_run_exits_with_numerical_code_and_keeps_state() {
    let dir = tmp("nan");
    let config = write_tiny_config(&dir);
    // an absurd learning rate overflows the forward pass within a few steps
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("lr = 0.001", "lr = 1e10");
    std::fs::write(&config, text).unwrap();
    let run = dir.join("run");
    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    // the last good state was checkpointed before bailing
    assert!(run.join("last_good.sfckpt").exists());
}

#[test]
fn ablate_writes_csv_and_report() {
    let dir = tmp("ablate");
    let status = bin()
        .args([
            "ablate", "--suite", "fig3b", "--seeds", "2", "--steps", "8", "--batch-size", "2",
            "--hidden", "16", "--eval-samples", "64", "--out",
        ])
        .arg(&dir)
        .env("SELFFLOW_THREADS", "2")
        .status()
        .unwrap();
    assert!(status.success());

    let csv = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "variant,seed,step,fd,config_hash");
    // 4 variants x 2 seeds x (eval points per run: steps/4 interval -> 2,4,6,8)
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4 * 2 * 4, "rows: {rows:#?}");
    for r in &rows {
        assert_eq!(r.split(',').count(), 5);
    }
    let report = std::fs::read_to_string(dir.join("report.md")).unwrap();
    for variant in ["vanilla", "dual_no_ssl", "full_mask", "diffusion_forcing"] {
        assert!(report.contains(variant), "missing {variant} in report");
    }

    // unknown suite is a config error
    let status = bin()
        .args(["ablate", "--suite", "nope", "--out"])
        .arg(dir.join("x"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
