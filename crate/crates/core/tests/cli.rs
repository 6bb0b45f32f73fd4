//! End-to-end runs of the `dive` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dive_core::datagen::{LabeledDataset, PairedDataset};
use dive_core::encoders::load_checkpoint;
use dive_core::training::RunMetrics;

const TINY: &str = r#"{
  "world": {
    "num_classes_total": 8, "num_target_classes": 4, "input_dim": 8,
    "pretrain_per_class": 20, "id_train_per_class": 16, "id_val_per_class": 4,
    "id_test_per_class": 4, "ood_test_per_class": 4, "zs_test_per_class": 4,
    "reference_size": 64, "rsa_eval_pairs": 16
  },
  "model": { "image_input_dim": 8, "text_input_dim": 8, "hidden_width": 8, "embed_dim": 4 },
  "pretrain": { "max_epochs": 2, "batch_size": 32 },
  "runs": [
    { "train": { "method": { "method": "FLYP" }, "epochs": 2, "batch_size": 16 } },
    { "label": "soft", "train": { "method": { "method": "DiVE", "lambda": 3 }, "epochs": 2, "batch_size": 16 } }
  ],
  "seeds": [0],
  "output_dir": "unused"
}"#;

struct Sandbox {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.json");
        std::fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str], out: Option<&Path>, env_out: Option<&Path>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dive"));
        cmd.args(args).arg("--config").arg(&self.config);
        if let Some(out) = out {
            cmd.arg("--out").arg(out);
        }
        cmd.env_remove("DIVE_OUTDIR");
        if let Some(env_out) = env_out {
            cmd.env("DIVE_OUTDIR", env_out);
        }
        cmd.current_dir(self.dir.path());
        cmd.output().unwrap()
    }
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_two_and_runtime_errors_exit_one() {
    let sb = Sandbox::new();
    let out = Command::new(env!("CARGO_BIN_EXE_dive"))
        .arg("frobnicate")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = sb.run(
        &["train", "--method", "NoSuchMethod"],
        Some(&sb.path("x")),
        None,
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.starts_with("error: kind=ConfigInvalid message="),
        "{stderr}"
    );

    let out = sb.run(&["ablate", "--grid", "beta=1"], Some(&sb.path("x")), None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_writes_readable_splits_deterministically() {
    let sb = Sandbox::new();
    let (a, b) = (sb.path("gen-a"), sb.path("gen-b"));
    stdout_json(&sb.run(&["gen", "--seed", "4"], Some(&a), None));
    stdout_json(&sb.run(&["gen", "--seed", "4"], Some(&b), None));
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 16);
    for name in &names {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap()
        );
    }
    let reference =
        PairedDataset::from_bytes(&std::fs::read(a.join("reference.divd")).unwrap()).unwrap();
    assert_eq!(reference.len(), 64);
    let test = LabeledDataset::from_bytes(&std::fs::read(a.join("id_test.divd")).unwrap()).unwrap();
    assert_eq!(test.labels.len(), 16);
}

#[test]
fn out_flag_beats_environment_beats_config() {
    let sb = Sandbox::new();
    let (flag, env) = (sb.path("flag"), sb.path("env"));
    stdout_json(&sb.run(&["gen"], Some(&flag), Some(&env)));
    assert!(flag.join("id_train.divd").exists() && !env.exists());
    stdout_json(&sb.run(&["gen"], None, Some(&env)));
    assert!(env.join("id_train.divd").exists());
    stdout_json(&sb.run(&["gen"], None, None));
    assert!(sb.path("unused").join("id_train.divd").exists());
}

#[test]
fn pretrain_train_eval_rsa_chain() {
    let sb = Sandbox::new();
    let out = sb.path("chain");
    let pre = stdout_json(&sb.run(&["pretrain", "--seed", "1"], Some(&out), None));
    let ckpt = pre["checkpoint"].as_str().unwrap().to_string();
    assert!(load_checkpoint(&ckpt).is_ok());

    let summary = stdout_json(&sb.run(
        &[
            "train",
            "--method",
            "soft",
            "--seed",
            "1",
            "--pretrained",
            &ckpt,
        ],
        Some(&out),
        None,
    ));
    assert_eq!(summary["method"], "soft");
    let jsonl = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .unwrap();
    let metrics = RunMetrics::from_jsonl(&std::fs::read_to_string(&jsonl).unwrap()).unwrap();
    assert_eq!(metrics.epochs.len(), 2);
    let fine = metrics.summary.unwrap();
    assert_eq!(fine.rsa, summary["rsa"].as_f64().unwrap());

    let ft_ckpt = jsonl.with_extension("ckpt");
    let ft = ft_ckpt.to_str().unwrap();
    let eval = stdout_json(&sb.run(
        &["eval", "--seed", "1", "--checkpoint", ft],
        Some(&out),
        None,
    ));
    assert_eq!(eval["id_test_acc"].as_f64().unwrap(), fine.id_test_acc);
    let rsa = stdout_json(&sb.run(
        &[
            "rsa",
            "--seed",
            "1",
            "--pretrained",
            &ckpt,
            "--checkpoint",
            ft,
        ],
        Some(&out),
        None,
    ));
    assert_eq!(rsa["score"].as_f64().unwrap(), fine.rsa);
    let self_rsa = stdout_json(&sb.run(
        &[
            "rsa",
            "--seed",
            "1",
            "--pretrained",
            &ckpt,
            "--checkpoint",
            &ckpt,
        ],
        Some(&out),
        None,
    ));
    assert!((self_rsa["score"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn experiment_writes_report_and_metrics() {
    let sb = Sandbox::new();
    let out = sb.path("exp");
    stdout_json(&sb.run(&["experiment", "--seeds", "0,1"], Some(&out), None));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert_eq!(report["pretrained"].as_array().unwrap().len(), 2);
    assert!(report["failures"].as_array().unwrap().is_empty());
    let jsonl = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|e| e == "jsonl")
        })
        .count();
    assert_eq!(jsonl, 4);
}

#[test]
fn loss_ablation_labels_every_run() {
    let sb = Sandbox::new();
    let out = sb.path("ablate");
    stdout_json(&sb.run(&["ablate", "--grid", "losses"], Some(&out), None));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let mut labels: Vec<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["label"].as_str().unwrap())
        .collect();
    labels.sort();
    assert_eq!(labels, ["AVL-only", "DiVE", "FLYP", "PVL-only"]);
}
