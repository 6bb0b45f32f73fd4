//! Ablation grids expanded into experiment runs.

use crate::error::{Error, Result};
use crate::objectives::{Method, MethodSpec};
use crate::training::TrainConfig;

use super::experiment::RunSpec;

#[derive(Debug, Clone, PartialEq)]
pub enum AblationGrid {
    /// EMA decay values for DiVE.
    Alpha(Vec<f64>),
    /// Geometry-loss weights for DiVE.
    Lambda(Vec<f64>),
    /// FLYP, AVL only, PVL only and both.
    Losses,
    /// Reference-set sizes for DiVE.
    RefSize(Vec<usize>),
}

fn values<T: std::str::FromStr>(name: &str, raw: &str) -> Result<Vec<T>> {
    let parsed: std::result::Result<Vec<T>, _> =
        raw.split(',').map(|v| v.trim().parse::<T>()).collect();
    match parsed {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::ConfigInvalid(format!(
            "cannot parse {name} grid values {raw:?}"
        ))),
    }
}

/// Parses `alpha=…`, `lambda=…`, `refsize=…` (comma-separated) or `losses`.
pub fn parse_grid(text: &str) -> Result<AblationGrid> {
    let (name, raw) = text.split_once('=').unwrap_or((text, ""));
    match name.trim() {
        "alpha" => Ok(AblationGrid::Alpha(values("alpha", raw)?)),
        "lambda" => Ok(AblationGrid::Lambda(values("lambda", raw)?)),
        "refsize" => Ok(AblationGrid::RefSize(values("refsize", raw)?)),
        "losses" if raw.is_empty() => Ok(AblationGrid::Losses),
        other => Err(Error::ConfigInvalid(format!(
            "unknown grid {other:?}; expected alpha=, lambda=, refsize= or losses"
        ))),
    }
}

/// One run per grid point. `avl_only` drops PVL from the α grid.
pub fn ablation_runs(grid: &AblationGrid, base: &TrainConfig, avl_only: bool) -> Vec<RunSpec> {
    let dive = |edit: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        cfg.method = MethodSpec {
            method: Method::Dive,
            ..base.method
        };
        edit(&mut cfg);
        cfg
    };
    match grid {
        AblationGrid::Alpha(alphas) => alphas
            .iter()
            .map(|&a| {
                let cfg = dive(&|c| {
                    c.alpha = a;
                    if avl_only {
                        c.method = c.method.with_terms(true, false);
                    }
                });
                RunSpec::labeled(format!("alpha={a}"), cfg)
            })
            .collect(),
        AblationGrid::Lambda(lambdas) => lambdas
            .iter()
            .map(|&l| {
                RunSpec::labeled(
                    format!("lambda={l}"),
                    dive(&|c| c.method = c.method.with_lambda(l)),
                )
            })
            .collect(),
        AblationGrid::RefSize(sizes) => sizes
            .iter()
            .map(|&n| RunSpec {
                reference_limit: Some(n),
                ..RunSpec::labeled(format!("refsize={n}"), dive(&|_| {}))
            })
            .collect(),
        AblationGrid::Losses => {
            let mut flyp = base.clone();
            flyp.method = MethodSpec::new(Method::Flyp);
            vec![
                RunSpec::labeled("FLYP", flyp),
                RunSpec::labeled(
                    "AVL-only",
                    dive(&|c| c.method = c.method.with_terms(true, false)),
                ),
                RunSpec::labeled(
                    "PVL-only",
                    dive(&|c| c.method = c.method.with_terms(false, true)),
                ),
                RunSpec::labeled(
                    "DiVE",
                    dive(&|c| c.method = c.method.with_terms(true, true)),
                ),
            ]
        }
    }
}
