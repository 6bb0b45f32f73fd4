//! Full pipeline: world → pre-training → every configured run → report.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    generate_world, pretrain, PairedDataset, PretrainConfig, PretrainOutcome, WorldData, WorldSpec,
};
use crate::encoders::{interpolate_weights, FrozenSnapshot, ModelSpec, TwoTowerModel};
use crate::error::{Error, Result};
use crate::geometry::{diff_norm_stats, difference_vectors, rsa_score, ReferenceCache, RsaReport};
use crate::numeric::Matrix;
use crate::objectives::{Method, MethodSpec};
use crate::training::{
    evaluate, train, Classifier, FinalMetrics, FineTuneState, Metric, RunMetrics, TargetTask,
    TrainConfig,
};

use super::ensemble::{default_grid, ensemble_sweep, sweep_csv, SweepRow};
use super::stats::{mean_std, paired_t_test, TTestResult};

/// One fine-tuning run of the experiment; `train.seed` is replaced per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Use only the first `n` reference pairs.
    #[serde(default)]
    pub reference_limit: Option<usize>,
}

impl RunSpec {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            label: None,
            train,
            reference_limit: None,
        }
    }

    pub fn labeled(label: impl Into<String>, train: TrainConfig) -> Self {
        Self {
            label: Some(label.into()),
            ..Self::new(train)
        }
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.train.method.method.name().to_string())
    }
}

/// Geometry-loss weight for the synthetic world. The method default of 1000
/// pins the toy encoders to the pre-trained model and leaves no ID headroom.
pub const DESK_LAMBDA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub model: ModelSpec,
    pub pretrain: PretrainConfig,
    pub runs: Vec<RunSpec>,
    pub seeds: Vec<u64>,
    pub ensemble: bool,
    pub ensemble_grid: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            model: ModelSpec::default(),
            pretrain: PretrainConfig::default(),
            runs: vec![
                RunSpec::new(TrainConfig::for_method(MethodSpec::new(Method::Flyp))),
                RunSpec::new(TrainConfig::for_method(
                    MethodSpec::new(Method::Dive).with_lambda(DESK_LAMBDA),
                )),
            ],
            seeds: vec![0, 1, 2],
            ensemble: false,
            ensemble_grid: default_grid(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.runs.is_empty() {
            return bad("at least one run is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if let Some(c) = self
            .ensemble_grid
            .iter()
            .find(|c| !(**c > 0.0 && **c < 1.0))
        {
            return bad(format!("ensemble coefficients must lie in (0, 1), got {c}"));
        }
        if self.ensemble && self.ensemble_grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        let dim = self.world.input_dim;
        if self.model.image_input_dim != dim || self.model.text_input_dim != dim {
            return bad(format!(
                "model input widths must equal the world input_dim {dim}"
            ));
        }
        let mut labels = BTreeSet::new();
        for r in &self.runs {
            r.train.validate()?;
            if !labels.insert(r.label()) {
                return bad(format!("duplicate run label {}", r.label()));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("duplicate seeds".into());
        }
        Ok(())
    }
}

/// RSA between pre-trained and fine-tuned pooled image+text embeddings of
/// `corpus`, with difference-vector norm statistics.
pub fn rsa_report(
    frozen: &FrozenSnapshot,
    ft: &TwoTowerModel,
    corpus: &PairedDataset,
) -> Result<RsaReport> {
    if corpus.len() < 3 {
        return Err(Error::TooFew {
            needed: 3,
            got: corpus.len(),
        });
    }
    let pooled = |m: &TwoTowerModel| -> Result<Matrix> {
        let mut data = m.image.embed(&corpus.images)?.into_vec();
        data.extend(m.text.embed(&corpus.texts)?.into_vec());
        Matrix::from_vec(2 * corpus.len(), m.embed_dim(), data)
    };
    let score = rsa_score(&pooled(frozen.model())?, &pooled(ft)?)?;
    let cache = ReferenceCache::build(frozen, &corpus.images, &corpus.texts)?;
    let ids: Vec<usize> = (0..corpus.len()).collect();
    let stats = diff_norm_stats(&difference_vectors(
        ft,
        &cache,
        &corpus.images,
        &corpus.texts,
        &ids,
    )?)?;
    Ok(RsaReport {
        corpus_size: corpus.len(),
        score,
        mean_diff_norm: stats.mean_norm,
        max_diff_norm: stats.max_norm,
    })
}

/// ID / OOD / ZS / RSA metrics of a fine-tuned state.
pub fn final_metrics(
    label: &str,
    seed: u64,
    state: &FineTuneState,
    best_epoch: usize,
    data: &WorldData,
    frozen: &FrozenSnapshot,
) -> Result<FinalMetrics> {
    let target = data.world.target_prompts();
    let zs = data.world.zs_prompts();
    let model = &state.model;
    let classifier = match &state.head {
        Some(head) => Classifier::Head {
            model,
            head,
            classes: target.classes(),
        },
        None => Classifier::ZeroShot {
            model,
            prompts: &target,
        },
    };
    let rsa = rsa_report(frozen, model, &data.rsa_eval)?;
    Ok(FinalMetrics {
        is_final: true,
        method: label.to_string(),
        seed,
        best_epoch,
        id_test_acc: classifier.evaluate(&data.id_test, Metric::Accuracy)?,
        ood_acc: classifier.evaluate(&data.ood_test, Metric::Accuracy)?,
        zs_acc: evaluate(model, &data.zs_test, &zs, Metric::Accuracy)?,
        id_macro_f1: Some(classifier.evaluate(&data.id_test, Metric::MacroF1)?),
        rsa: rsa.score,
        mean_diff_norm: rsa.mean_diff_norm,
        max_diff_norm: rsa.max_diff_norm,
    })
}

/// World and pre-trained model shared by every run of one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub data: WorldData,
    pub pretrained: PretrainOutcome,
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let data = generate_world(&cfg.world, seed)?;
    let pretrained = pretrain(&data, &cfg.model, &cfg.pretrain, seed)?;
    Ok(SeedContext {
        seed,
        data,
        pretrained,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub coefficient: f64,
    pub id_test_acc: f64,
    pub ood_acc: f64,
    pub zs_acc: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub state: FineTuneState,
    pub sweep: Option<(f64, Vec<SweepRow>, EnsembleRow)>,
}

/// Trains and evaluates one run against the seed's frozen snapshot.
pub fn run_one(cfg: &ExperimentConfig, ctx: &SeedContext, run: &RunSpec) -> Result<RunResult> {
    let label = run.label();
    let mut train_cfg = run.train.clone();
    train_cfg.seed = ctx.seed;
    let data = &ctx.data;
    let prompts = data.world.target_prompts();
    let task = TargetTask {
        train: &data.id_train,
        val: &data.id_val,
        prompts: &prompts,
    };
    let reference = match run.reference_limit {
        Some(n) => data.reference.truncated(n),
        None => data.reference.clone(),
    };
    let frozen = &ctx.pretrained.frozen;
    let out = train(
        &train_cfg,
        task,
        Some(&reference),
        frozen,
        &ctx.pretrained.model,
    )?;
    let mut metrics = out.metrics;
    metrics.summary = Some(final_metrics(
        &label,
        ctx.seed,
        &out.state,
        out.best_epoch,
        data,
        frozen,
    )?);

    let sweep = if cfg.ensemble && out.state.head.is_none() {
        let pre = frozen.model();
        let (c, rows) = ensemble_sweep(
            pre,
            &out.state.model,
            &cfg.ensemble_grid,
            &data.id_val,
            &prompts,
        )?;
        let merged = FineTuneState {
            model: interpolate_weights(pre, &out.state.model, c)?,
            head: None,
        };
        let m = final_metrics(&label, ctx.seed, &merged, out.best_epoch, data, frozen)?;
        let row = EnsembleRow {
            coefficient: c,
            id_test_acc: m.id_test_acc,
            ood_acc: m.ood_acc,
            zs_acc: m.zs_acc,
        };
        Some((c, rows, row))
    } else {
        None
    };
    Ok(RunResult {
        label,
        seed: ctx.seed,
        metrics,
        state: out.state,
        sweep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub method: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub id_test_acc: f64,
    pub ood_acc: f64,
    pub zs_acc: f64,
    pub id_macro_f1: Option<f64>,
    pub rsa: f64,
    pub mean_diff_norm: f64,
    pub max_diff_norm: f64,
    pub wall_clock_seconds: f64,
    pub ensemble: Option<EnsembleRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub seed: u64,
    pub epochs: usize,
    pub floor_reached: bool,
    pub id_test_acc: f64,
    pub ood_acc: f64,
    pub zs_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub seeds: Vec<u64>,
    pub id_test_acc: MeanStd,
    pub ood_acc: MeanStd,
    pub zs_acc: MeanStd,
    pub rsa: MeanStd,
    pub mean_diff_norm: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub test: TTestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub label: String,
    pub seed: u64,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub pretrained: Vec<PretrainRow>,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
    pub p_values: Vec<PairwiseTest>,
    pub failures: Vec<Failure>,
}

impl ComparisonReport {
    pub fn row(&self, label: &str, seed: u64) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.seed == seed)
    }

    pub fn pretrained_row(&self, seed: u64) -> Option<&PretrainRow> {
        self.pretrained.iter().find(|r| r.seed == seed)
    }
}

pub const REPORT_METRICS: [&str; 4] = ["id_test_acc", "ood_acc", "zs_acc", "rsa"];

fn metric_of(row: &ReportRow, metric: &str) -> f64 {
    match metric {
        "id_test_acc" => row.id_test_acc,
        "ood_acc" => row.ood_acc,
        "zs_acc" => row.zs_acc,
        "rsa" => row.rsa,
        "mean_diff_norm" => row.mean_diff_norm,
        other => unreachable!("unknown metric {other}"),
    }
}

/// Mean ± std per label over seeds, in seed order of `rows`.
pub fn aggregate(labels: &[String], rows: &[ReportRow]) -> Vec<Aggregate> {
    labels
        .iter()
        .filter_map(|label| {
            let mine: Vec<&ReportRow> = rows.iter().filter(|r| &r.label == label).collect();
            if mine.is_empty() {
                return None;
            }
            let col =
                |m: &str| MeanStd::of(&mine.iter().map(|r| metric_of(r, m)).collect::<Vec<_>>());
            Some(Aggregate {
                label: label.clone(),
                seeds: mine.iter().map(|r| r.seed).collect(),
                id_test_acc: col("id_test_acc"),
                ood_acc: col("ood_acc"),
                zs_acc: col("zs_acc"),
                rsa: col("rsa"),
                mean_diff_norm: col("mean_diff_norm"),
            })
        })
        .collect()
}

fn pairwise(labels: &[String], rows: &[ReportRow]) -> Vec<PairwiseTest> {
    let mut out = Vec::new();
    for (i, a) in labels.iter().enumerate() {
        for b in &labels[i + 1..] {
            let pairs: Vec<(&ReportRow, &ReportRow)> = rows
                .iter()
                .filter(|r| &r.label == a)
                .filter_map(|ra| {
                    rows.iter()
                        .find(|rb| &rb.label == b && rb.seed == ra.seed)
                        .map(|rb| (ra, rb))
                })
                .collect();
            if pairs.len() < 2 {
                continue;
            }
            for metric in REPORT_METRICS {
                let xs: Vec<f64> = pairs.iter().map(|(x, _)| metric_of(x, metric)).collect();
                let ys: Vec<f64> = pairs.iter().map(|(_, y)| metric_of(y, metric)).collect();
                if let Ok(test) = paired_t_test(&xs, &ys) {
                    out.push(PairwiseTest {
                        a: a.clone(),
                        b: b.clone(),
                        metric: metric.to_string(),
                        test,
                    });
                }
            }
        }
    }
    out
}

/// File name for one run's metrics.
pub fn metrics_file_name(label: &str, seed: u64) -> String {
    let safe: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "=.+_-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}-{seed}.jsonl")
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Runs every (run, seed) pair, persists metrics and returns the report.
/// A failing run is recorded and the others continue.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let outdir = &cfg.output_dir;
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;

    type SeedResult = (
        Option<PretrainRow>,
        Vec<std::result::Result<RunResult, Failure>>,
    );
    let per_seed: Vec<SeedResult> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let fail = |label: String, e: Error| Failure {
                label,
                seed,
                kind: e.kind().to_string(),
                message: e.to_string(),
            };
            let ctx = match prepare_seed(cfg, seed) {
                Ok(c) => c,
                Err(e) => {
                    let msg = e.to_string();
                    let kind = e.kind();
                    let failures = cfg
                        .runs
                        .iter()
                        .map(|r| {
                            Err(Failure {
                                label: r.label(),
                                seed,
                                kind: kind.to_string(),
                                message: msg.clone(),
                            })
                        })
                        .collect();
                    return (None, failures);
                }
            };
            let pre_row = pretrain_row(&ctx).ok();
            let results = cfg
                .runs
                .par_iter()
                .map(|run| run_one(cfg, &ctx, run).map_err(|e| fail(run.label(), e)))
                .collect();
            (pre_row, results)
        })
        .collect();

    let mut report = ComparisonReport {
        pretrained: Vec::new(),
        rows: Vec::new(),
        aggregates: Vec::new(),
        p_values: Vec::new(),
        failures: Vec::new(),
    };
    let mut sweeps = Vec::new();
    for (pre_row, results) in per_seed {
        report.pretrained.extend(pre_row);
        for r in results {
            match r {
                Err(f) => report.failures.push(f),
                Ok(res) => {
                    write(
                        outdir.join(metrics_file_name(&res.label, res.seed)),
                        &res.metrics.to_jsonl()?,
                    )?;
                    let s = res
                        .metrics
                        .summary
                        .as_ref()
                        .expect("run_one fills the summary");
                    let row = ReportRow {
                        label: res.label.clone(),
                        method: res.metrics_method(cfg),
                        seed: res.seed,
                        best_epoch: s.best_epoch,
                        id_test_acc: s.id_test_acc,
                        ood_acc: s.ood_acc,
                        zs_acc: s.zs_acc,
                        id_macro_f1: s.id_macro_f1,
                        rsa: s.rsa,
                        mean_diff_norm: s.mean_diff_norm,
                        max_diff_norm: s.max_diff_norm,
                        wall_clock_seconds: res.metrics.wall_clock_seconds,
                        ensemble: res.sweep.as_ref().map(|(_, _, e)| e.clone()),
                    };
                    if let Some((c, rows, _)) = res.sweep {
                        sweeps.push((res.label.clone(), res.seed, c, rows));
                    }
                    report.rows.push(row);
                }
            }
        }
    }
    let labels: Vec<String> = cfg.runs.iter().map(RunSpec::label).collect();
    report.aggregates = aggregate(&labels, &report.rows);
    report.p_values = pairwise(&labels, &report.rows);
    write(
        outdir.join("report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    if cfg.ensemble {
        write(outdir.join("sweep.csv"), &sweep_csv(&sweeps))?;
    }
    Ok(report)
}

impl RunResult {
    fn metrics_method(&self, cfg: &ExperimentConfig) -> String {
        cfg.runs
            .iter()
            .find(|r| r.label() == self.label)
            .map_or_else(String::new, |r| r.train.method.method.name().to_string())
    }
}

/// Zero-shot metrics of the pre-trained model itself.
pub fn pretrain_row(ctx: &SeedContext) -> Result<PretrainRow> {
    let model = &ctx.pretrained.model;
    let data = &ctx.data;
    let target = data.world.target_prompts();
    Ok(PretrainRow {
        seed: ctx.seed,
        epochs: ctx.pretrained.epochs,
        floor_reached: ctx.pretrained.floor_reached,
        id_test_acc: evaluate(model, &data.id_test, &target, Metric::Accuracy)?,
        ood_acc: evaluate(model, &data.ood_test, &target, Metric::Accuracy)?,
        zs_acc: ctx.pretrained.zs_acc,
    })
}
