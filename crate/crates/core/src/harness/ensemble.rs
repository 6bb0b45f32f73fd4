//! Weight-space interpolation sweep between a pre-trained and a fine-tuned model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::encoders::{interpolate_weights, TwoTowerModel};
use crate::error::{Error, Result};
use crate::training::{evaluate, ClassPromptSet, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub coefficient: f64,
    pub id_val_acc: f64,
}

/// The default grid `0.1, 0.2, …, 0.9`.
pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// Scores every coefficient and returns the best one. Ties go to the smaller
/// coefficient.
pub fn select_coefficient<F>(grid: &[f64], mut score: F) -> Result<(f64, Vec<SweepRow>)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut best: Option<SweepRow> = None;
    for &c in grid {
        let row = SweepRow {
            coefficient: c,
            id_val_acc: score(c)?,
        };
        let better = match best {
            None => true,
            Some(b) => {
                row.id_val_acc > b.id_val_acc
                    || (row.id_val_acc == b.id_val_acc && row.coefficient < b.coefficient)
            }
        };
        if better {
            best = Some(row);
        }
        rows.push(row);
    }
    Ok((best.expect("grid is nonempty").coefficient, rows))
}

/// Picks the interpolation coefficient with the best zero-shot ID-validation
/// accuracy.
pub fn ensemble_sweep(
    pre: &TwoTowerModel,
    ft: &TwoTowerModel,
    grid: &[f64],
    id_val: &LabeledDataset,
    prompts: &ClassPromptSet,
) -> Result<(f64, Vec<SweepRow>)> {
    select_coefficient(grid, |c| {
        let merged = interpolate_weights(pre, ft, c)?;
        evaluate(&merged, id_val, prompts, Metric::Accuracy)
    })
}

/// `label,seed,coefficient,id_val_acc,selected` rows.
pub fn sweep_csv(sweeps: &[(String, u64, f64, Vec<SweepRow>)]) -> String {
    let mut out = String::from("label,seed,coefficient,id_val_acc,selected\n");
    for (label, seed, chosen, rows) in sweeps {
        for r in rows {
            let _ = writeln!(
                out,
                "{label},{seed},{},{},{}",
                r.coefficient,
                r.id_val_acc,
                r.coefficient == *chosen
            );
        }
    }
    out
}
