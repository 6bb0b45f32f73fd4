//! The fine-tuning loop: batching, schedule, early stopping and LP-FT phases.

use serde::{Deserialize, Serialize};

use crate::datagen::{LabeledDataset, PairedDataset};
use crate::encoders::{Dense, FrozenSnapshot, TwoTowerModel};
use crate::error::{Error, Result};
use crate::geometry::{AverageVectorState, ReferenceCache};
use crate::numeric::SeededRng;
use crate::objectives::{Method, MethodSpec};

use super::eval::{ClassPromptSet, Classifier, Metric};
use super::optim::{lr_at, optimizer_step, FineTuneState, OptimizerState, TrainableMask};
use super::step::{step_objective, EmaOrder, ReferenceBatch, StepContext, StepLoss, TargetBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: MethodSpec,
    pub batch_size: usize,
    /// Defaults to `batch_size`.
    pub reference_batch_size: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub train_temperature: bool,
    pub early_stopping: bool,
    pub ema_order: EmaOrder,
    /// Share of LP-FT epochs spent probing with the encoder frozen.
    pub probe_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: MethodSpec::new(Method::Dive),
            batch_size: 64,
            reference_batch_size: None,
            epochs: 30,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 50,
            alpha: 0.99,
            seed: 0,
            train_temperature: true,
            early_stopping: true,
            ema_order: EmaOrder::Post,
            probe_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: MethodSpec) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn reference_batch(&self) -> usize {
        self.reference_batch_size.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.batch_size == 0 || self.reference_batch() == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.probe_fraction) {
            return bad(format!(
                "probe_fraction must lie in [0, 1], got {}",
                self.probe_fraction
            ));
        }
        Ok(())
    }
}

/// The labeled task being fine-tuned on.
#[derive(Debug, Clone, Copy)]
pub struct TargetTask<'a> {
    pub train: &'a LabeledDataset,
    pub val: &'a LabeledDataset,
    pub prompts: &'a ClassPromptSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub steps: usize,
    /// Step-averaged unweighted loss components.
    pub loss: StepLoss,
    pub id_val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    #[serde(rename = "final")]
    pub is_final: bool,
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
}

/// Per-epoch records plus the final summary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    pub summary: Option<FinalMetrics>,
    /// Kept out of the JSON-lines file so reruns stay byte-identical.
    pub wall_clock_seconds: f64,
}

impl RunMetrics {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        if let Some(f) = &self.summary {
            out.push_str(&serde_json::to_string(f)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut m = RunMetrics::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            if v.get("final").and_then(|f| f.as_bool()) == Some(true) {
                m.summary = Some(serde_json::from_value(v)?);
            } else {
                m.epochs.push(serde_json::from_value(v)?);
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The returned snapshot: best ID-validation epoch, or the last epoch
    /// when early stopping is off.
    pub state: FineTuneState,
    pub metrics: RunMetrics,
    pub best_epoch: usize,
    pub steps: usize,
    pub ema: Option<AverageVectorState>,
}

/// Seeded shuffled-epoch cycle over `0..n`.
struct ShuffledCycle {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl ShuffledCycle {
    fn new(n: usize, rng: SeededRng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

struct Reference<'a> {
    data: &'a PairedDataset,
    cache: ReferenceCache,
}

struct Runner<'a> {
    config: &'a TrainConfig,
    task: TargetTask<'a>,
    train_labels: Vec<usize>,
    target_rng: SeededRng,
    reference: Option<Reference<'a>>,
    reference_cycle: Option<ShuffledCycle>,
    ema: Option<AverageVectorState>,
    records: Vec<EpochRecord>,
    best: Option<(f64, FineTuneState, usize)>,
    steps: usize,
}

impl Runner<'_> {
    fn classifier_score(&self, state: &FineTuneState) -> Result<f64> {
        let c = match &state.head {
            Some(head) => Classifier::Head {
                model: &state.model,
                head,
                classes: self.task.prompts.classes(),
            },
            None => Classifier::ZeroShot {
                model: &state.model,
                prompts: self.task.prompts,
            },
        };
        c.evaluate(self.task.val, Metric::Accuracy)
    }

    fn run_phase(
        &mut self,
        state: &mut FineTuneState,
        epochs: usize,
        mask: TrainableMask,
        phase: &str,
    ) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let n = self.task.train.len();
        let b = self.config.batch_size;
        let per_epoch = n.div_ceil(b);
        let total = epochs * per_epoch;
        let mut opt = OptimizerState::for_state(state, self.config.weight_decay)?;
        let ctx = StepContext {
            spec: &self.config.method,
            prompts: self.task.prompts,
            cache: self.reference.as_ref().map(|r| &r.cache),
            ema_order: self.config.ema_order,
        };
        let mut step = 0usize;
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            self.target_rng.shuffle(&mut order);
            let mut sum = LossSum::default();
            for chunk in order.chunks(b) {
                let target = TargetBatch {
                    images: self.task.train.images.select_rows(chunk),
                    labels: chunk.iter().map(|&i| self.train_labels[i]).collect(),
                };
                let reference = match (&self.reference, self.reference_cycle.as_mut()) {
                    (Some(r), Some(cycle)) => {
                        let ids = cycle.take(self.config.reference_batch());
                        Some(ReferenceBatch {
                            images: r.data.images.select_rows(&ids),
                            texts: r.data.texts.select_rows(&ids),
                            ids,
                        })
                    }
                    _ => None,
                };
                let out =
                    step_objective(state, &ctx, &target, reference.as_ref(), self.ema.as_ref())?;
                if out.ema.is_some() {
                    self.ema = out.ema;
                }
                let lr = lr_at(
                    step + 1,
                    total,
                    self.config.warmup_steps,
                    self.config.learning_rate,
                );
                optimizer_step(state, &out.grads, mask, &mut opt, lr)?;
                sum.add(&out.loss);
                step += 1;
                self.steps += 1;
            }
            let acc = self.classifier_score(state)?;
            let epoch = self.records.len() + 1;
            self.records.push(EpochRecord {
                epoch,
                phase: phase.to_string(),
                steps: per_epoch,
                loss: sum.mean(),
                id_val_acc: acc,
            });
            let improved = self.best.as_ref().is_none_or(|(best, _, _)| acc > *best);
            if !self.config.early_stopping || improved {
                self.best = Some((acc, state.clone(), epoch));
            }
        }
        Ok(())
    }

    fn finish(self, last: FineTuneState) -> TrainOutcome {
        let (state, best_epoch) = match self.best {
            Some((_, s, e)) => (s, e),
            None => (last, 0),
        };
        TrainOutcome {
            state,
            metrics: RunMetrics {
                epochs: self.records,
                summary: None,
                wall_clock_seconds: 0.0,
            },
            best_epoch,
            steps: self.steps,
            ema: self.ema,
        }
    }
}

#[derive(Default)]
struct LossSum {
    n: usize,
    total: f64,
    cl: f64,
    parts: [(f64, bool); 4],
}

impl LossSum {
    fn add(&mut self, l: &StepLoss) {
        self.n += 1;
        self.total += l.total;
        self.cl += l.cl;
        for (slot, v) in self.parts.iter_mut().zip([l.avl, l.pvl, l.snd, l.aux_cl]) {
            if let Some(v) = v {
                slot.0 += v;
                slot.1 = true;
            }
        }
    }

    fn mean(&self) -> StepLoss {
        let k = self.n.max(1) as f64;
        let part = |i: usize| self.parts[i].1.then(|| self.parts[i].0 / k);
        StepLoss {
            total: self.total / k,
            cl: self.cl / k,
            avl: part(0),
            pvl: part(1),
            snd: part(2),
            aux_cl: part(3),
        }
    }
}

fn prepare<'a>(
    config: &'a TrainConfig,
    task: TargetTask<'a>,
    reference: Option<&'a PairedDataset>,
    frozen: &FrozenSnapshot,
    model: &TwoTowerModel,
) -> Result<(Runner<'a>, FineTuneState)> {
    config.validate()?;
    if task.train.is_empty() || task.val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let method = config.method.method;
    let train_labels = task.prompts.local_labels(&task.train.labels)?;
    task.prompts.local_labels(&task.val.labels)?;
    let reference = if method.uses_reference() {
        let data = reference.ok_or(Error::MissingReferenceDataset(method.name()))?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Some(Reference {
            data,
            cache: ReferenceCache::build(frozen, &data.images, &data.texts)?,
        })
    } else {
        None
    };
    let ema = match method {
        Method::Dive => Some(AverageVectorState::new(model.embed_dim(), config.alpha)?),
        // the cosine of a sample with itself: the value before any drift
        Method::DiveCosine => Some(AverageVectorState::with_initial(vec![1.0], config.alpha)?),
        _ => None,
    };
    let head = method.uses_head().then(|| {
        let mut rng = SeededRng::for_stage(config.seed, "head-init");
        Dense::glorot(model.embed_dim(), task.prompts.len(), &mut rng)
    });
    let runner = Runner {
        config,
        task,
        train_labels,
        target_rng: SeededRng::for_stage(config.seed, "target-order"),
        reference_cycle: reference.as_ref().map(|r| {
            ShuffledCycle::new(
                r.data.len(),
                SeededRng::for_stage(config.seed, "reference-order"),
            )
        }),
        reference,
        ema,
        records: Vec::new(),
        best: None,
        steps: 0,
    };
    let state = FineTuneState {
        model: model.clone(),
        head,
    };
    Ok((runner, state))
}

/// Fine-tunes `model` with the configured method. LP-FT dispatches to
/// [`lpft_train`].
pub fn train(
    config: &TrainConfig,
    task: TargetTask<'_>,
    reference: Option<&PairedDataset>,
    frozen: &FrozenSnapshot,
    model: &TwoTowerModel,
) -> Result<TrainOutcome> {
    if config.method.method == Method::LpFt {
        return lpft_train(config, task, frozen, model);
    }
    let start = std::time::Instant::now();
    let (mut runner, mut state) = prepare(config, task, reference, frozen, model)?;
    let mask = if config.method.method.uses_head() {
        TrainableMask {
            image: true,
            head: true,
            ..TrainableMask::NONE
        }
    } else {
        TrainableMask {
            image: true,
            text: true,
            temperature: config.train_temperature,
            head: false,
        }
    };
    runner.run_phase(&mut state, config.epochs, mask, "full")?;
    let mut out = runner.finish(state);
    out.metrics.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Linear probing (encoder frozen, head trained) then full fine-tuning of
/// head and image encoder, each phase with its own schedule and optimizer.
pub fn lpft_train(
    config: &TrainConfig,
    task: TargetTask<'_>,
    frozen: &FrozenSnapshot,
    model: &TwoTowerModel,
) -> Result<TrainOutcome> {
    let start = std::time::Instant::now();
    let mut head_config = config.clone();
    if !head_config.method.method.uses_head() {
        head_config.method.method = Method::LpFt;
    }
    let (mut runner, mut state) = prepare(&head_config, task, None, frozen, model)?;
    let probe = (config.epochs as f64 * config.probe_fraction).round() as usize;
    let probe_mask = TrainableMask {
        head: true,
        ..TrainableMask::NONE
    };
    let full_mask = TrainableMask {
        image: true,
        head: true,
        ..TrainableMask::NONE
    };
    runner.run_phase(&mut state, probe, probe_mask, "probe")?;
    runner.run_phase(&mut state, config.epochs - probe, full_mask, "full")?;
    let mut out = runner.finish(state);
    out.metrics.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}
