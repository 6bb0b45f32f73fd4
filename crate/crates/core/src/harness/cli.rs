//! Command-line front end. Usage errors exit 2, runtime errors exit 1 with a
//! single `error: kind=<Kind> message=<json string>` line on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::datagen::{generate_world, pretrain, WorldData};
use crate::encoders::{load_checkpoint, save_checkpoint, FrozenSnapshot, TwoTowerModel};
use crate::error::{Error, Result};
use crate::objectives::{Method, MethodSpec};
use crate::training::{evaluate, train, Metric, TargetTask, TrainConfig};

use super::ablate::{ablation_runs, parse_grid};
use super::ensemble::{ensemble_sweep, sweep_csv};
use super::experiment::{
    final_metrics, metrics_file_name, rsa_report, run_experiment, ExperimentConfig,
};

pub const OUTDIR_ENV: &str = "DIVE_OUTDIR";

#[derive(Debug, Parser)]
#[command(
    name = "dive",
    version,
    about = "Geometry-preserving fine-tuning lab on a synthetic two-tower benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply to every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides DIVE_OUTDIR and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SeedArg {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic world and write every split.
    Gen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Pre-train a two-tower model and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Fine-tune with one method.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: SeedArg,
        /// Method name, or a run label from the config.
        #[arg(long)]
        method: String,
        #[arg(long)]
        lambda: Option<f64>,
        /// Pre-trained checkpoint; pre-trains from scratch when absent.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Zero-shot ID / OOD / ZS accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// RSA of a fine-tuned checkpoint against the pre-trained one.
    Rsa {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full pipeline over every configured run and seed.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; overrides the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Ablation grid: alpha=…, lambda=…, refsize=… or losses.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Drop PVL from the alpha grid.
        #[arg(long)]
        avl_only: bool,
    },
    /// Interpolation sweep between a pre-trained and a fine-tuned checkpoint.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated coefficients in (0, 1); overrides the config.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    } else if let Some(env) = std::env::var_os(OUTDIR_ENV) {
        cfg.output_dir = PathBuf::from(env);
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn world(cfg: &ExperimentConfig, seed: u64) -> Result<WorldData> {
    cfg.world.validate()?;
    generate_world(&cfg.world, seed)
}

fn checked_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<TwoTowerModel> {
    let model = load_checkpoint(path)?;
    let dim = cfg.world.input_dim;
    if model.image.input_dim() != dim || model.text.input_dim() != dim {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects inputs of width {}/{} but the world has {dim}",
            model.image.input_dim(),
            model.text.input_dim()
        )));
    }
    Ok(model)
}

fn train_config(
    cfg: &ExperimentConfig,
    name: &str,
    lambda: Option<f64>,
) -> Result<(String, TrainConfig)> {
    let (label, mut train_cfg) = match cfg.runs.iter().find(|r| r.label() == name) {
        Some(r) => (r.label(), r.train.clone()),
        None => {
            let method: Method = name.parse().map_err(|_| {
                Error::ConfigInvalid(format!(
                    "{name:?} is neither a method nor a run label in the config"
                ))
            })?;
            let run = cfg
                .runs
                .iter()
                .find(|r| r.train.method.method == method && r.label.is_none());
            let train_cfg = run.map_or_else(
                || TrainConfig::for_method(MethodSpec::new(method)),
                |r| r.train.clone(),
            );
            (method.name().to_string(), train_cfg)
        }
    };
    if let Some(l) = lambda {
        train_cfg.method = train_cfg.method.with_lambda(l);
    }
    Ok((label, train_cfg))
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen { common, seed } => {
            let cfg = load_config(&common)?;
            let data = world(&cfg, seed.seed)?;
            data.write_to_dir(&cfg.output_dir)?;
            print_json(&json!({
                "seed": seed.seed,
                "dir": cfg.output_dir,
                "target_classes": data.world.target_classes,
                "zs_classes": data.world.zs_classes,
            }));
        }
        Command::Pretrain { common, seed } => {
            let cfg = load_config(&common)?;
            let data = world(&cfg, seed.seed)?;
            let out = pretrain(&data, &cfg.model, &cfg.pretrain, seed.seed)?;
            ensure_dir(&cfg.output_dir)?;
            let path = cfg
                .output_dir
                .join(format!("pretrained-{}.ckpt", seed.seed));
            save_checkpoint(&out.model, &path)?;
            print_json(&json!({
                "seed": seed.seed,
                "checkpoint": path,
                "zs_acc": out.zs_acc,
                "epochs": out.epochs,
                "floor_reached": out.floor_reached,
            }));
        }
        Command::Train {
            common,
            seed,
            method,
            lambda,
            pretrained,
        } => {
            let cfg = load_config(&common)?;
            let (label, mut train_cfg) = train_config(&cfg, &method, lambda)?;
            train_cfg.seed = seed.seed;
            let data = world(&cfg, seed.seed)?;
            let pre = match pretrained {
                Some(p) => checked_checkpoint(&cfg, &p)?,
                None => pretrain(&data, &cfg.model, &cfg.pretrain, seed.seed)?.model,
            };
            let frozen = FrozenSnapshot::new(&pre);
            let prompts = data.world.target_prompts();
            let task = TargetTask {
                train: &data.id_train,
                val: &data.id_val,
                prompts: &prompts,
            };
            let out = train(&train_cfg, task, Some(&data.reference), &frozen, &pre)?;
            let mut metrics = out.metrics;
            let summary = final_metrics(
                &label,
                seed.seed,
                &out.state,
                out.best_epoch,
                &data,
                &frozen,
            )?;
            metrics.summary = Some(summary.clone());
            ensure_dir(&cfg.output_dir)?;
            let jsonl = cfg.output_dir.join(metrics_file_name(&label, seed.seed));
            std::fs::write(&jsonl, metrics.to_jsonl()?).map_err(|e| Error::io(&jsonl, e))?;
            let ckpt = jsonl.with_extension("ckpt");
            save_checkpoint(&out.state.model, &ckpt)?;
            print_json(&serde_json::to_value(&summary)?);
        }
        Command::Eval {
            common,
            seed,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let model = checked_checkpoint(&cfg, &checkpoint)?;
            let data = world(&cfg, seed.seed)?;
            let target = data.world.target_prompts();
            let zs = data.world.zs_prompts();
            print_json(&json!({
                "seed": seed.seed,
                "id_test_acc": evaluate(&model, &data.id_test, &target, Metric::Accuracy)?,
                "id_macro_f1": evaluate(&model, &data.id_test, &target, Metric::MacroF1)?,
                "ood_acc": evaluate(&model, &data.ood_test, &target, Metric::Accuracy)?,
                "zs_acc": evaluate(&model, &data.zs_test, &zs, Metric::Accuracy)?,
            }));
        }
        Command::Rsa {
            common,
            seed,
            pretrained,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let pre = checked_checkpoint(&cfg, &pretrained)?;
            let ft = checked_checkpoint(&cfg, &checkpoint)?;
            let data = world(&cfg, seed.seed)?;
            let report = rsa_report(&FrozenSnapshot::new(&pre), &ft, &data.rsa_eval)?;
            print_json(&serde_json::to_value(report)?);
        }
        Command::Experiment { common, seeds } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            report_summary(&cfg, &run_experiment(&cfg)?)?;
        }
        Command::Ablate {
            common,
            grid,
            seeds,
            avl_only,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let base = cfg
                .runs
                .iter()
                .find(|r| r.train.method.method.is_dive())
                .map_or_else(TrainConfig::default, |r| r.train.clone());
            cfg.runs = ablation_runs(&parse_grid(&grid)?, &base, avl_only);
            report_summary(&cfg, &run_experiment(&cfg)?)?;
        }
        Command::Ensemble {
            common,
            seed,
            pretrained,
            checkpoint,
            grid,
        } => {
            let cfg = load_config(&common)?;
            let grid = grid.unwrap_or_else(|| cfg.ensemble_grid.clone());
            if let Some(c) = grid.iter().find(|c| !(**c > 0.0 && **c < 1.0)) {
                return Err(Error::ConfigInvalid(format!(
                    "ensemble coefficients must lie in (0, 1), got {c}"
                )));
            }
            let pre = checked_checkpoint(&cfg, &pretrained)?;
            let ft = checked_checkpoint(&cfg, &checkpoint)?;
            let data = world(&cfg, seed.seed)?;
            let prompts = data.world.target_prompts();
            let (best, rows) = ensemble_sweep(&pre, &ft, &grid, &data.id_val, &prompts)?;
            ensure_dir(&cfg.output_dir)?;
            let path = cfg.output_dir.join("sweep.csv");
            let label = checkpoint
                .file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            std::fs::write(&path, sweep_csv(&[(label, seed.seed, best, rows)]))
                .map_err(|e| Error::io(&path, e))?;
            print_json(&json!({ "best_coefficient": best, "sweep": path }));
        }
    }
    Ok(())
}

fn report_summary(
    cfg: &ExperimentConfig,
    report: &super::experiment::ComparisonReport,
) -> Result<()> {
    for agg in &report.aggregates {
        print_json(&serde_json::to_value(agg)?);
    }
    print_json(&json!({
        "report": cfg.output_dir.join("report.json"),
        "runs": report.rows.len(),
        "failures": report.failures.len(),
    }));
    if report.rows.is_empty() {
        let f = &report.failures[0];
        return Err(Error::ConfigInvalid(format!(
            "every run failed; first: {} seed {}: {}",
            f.label, f.seed, f.message
        )));
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} message={}", e.kind(), json!(e.to_string()));
            1
        }
    }
}
