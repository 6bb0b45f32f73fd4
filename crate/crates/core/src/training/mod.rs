//! Fine-tuning engine: optimizer, schedule, per-method step, loop and metrics.

mod eval;
mod optim;
mod run;
mod step;

pub use eval::{
    accuracy, argmax_lowest, classify_embeddings, confusion_counts, evaluate, macro_f1,
    macro_f1_from_counts, score, zero_shot_classify, ClassPromptSet, Classifier, Metric,
};
pub use optim::{
    lr_at, optimizer_step, FineTuneGrads, FineTuneState, OptimizerState, ParamGroup, TrainableMask,
    ADAM_EPS, BETA1, BETA2,
};
pub use run::{
    lpft_train, train, EpochRecord, FinalMetrics, RunMetrics, TargetTask, TrainConfig, TrainOutcome,
};
pub use step::{
    step_objective, EmaOrder, ReferenceBatch, StepContext, StepLoss, StepOutcome, TargetBatch,
};
