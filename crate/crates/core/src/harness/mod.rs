//! Experiment pipeline, ablations, ensembles, statistics and the CLI.

mod ablate;
mod cli;
mod ensemble;
mod experiment;
mod stats;

pub use ablate::{ablation_runs, parse_grid, AblationGrid};
pub use cli::{run_cli, OUTDIR_ENV};
pub use ensemble::{default_grid, ensemble_sweep, select_coefficient, sweep_csv, SweepRow};
pub use experiment::{
    aggregate, final_metrics, metrics_file_name, prepare_seed, pretrain_row, rsa_report,
    run_experiment, run_one, Aggregate, ComparisonReport, EnsembleRow, ExperimentConfig, Failure,
    MeanStd, PairwiseTest, PretrainRow, ReportRow, RunResult, RunSpec, SeedContext, DESK_LAMBDA,
    REPORT_METRICS,
};
pub use stats::{
    ln_gamma, mean_std, paired_t_test, regularized_incomplete_beta, student_t_two_sided_p,
    TTestResult,
};
