//! Zero-shot inference, head inference, accuracy and macro-F1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::encoders::{Dense, TwoTowerModel};
use crate::error::{Error, Result};
use crate::numeric::{dot, Matrix};

/// One prompt input per class, in a fixed class order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPromptSet {
    classes: Vec<usize>,
    inputs: Matrix,
}

impl ClassPromptSet {
    pub fn new(classes: Vec<usize>, inputs: Matrix) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::TooFew {
                needed: 2,
                got: classes.len(),
            });
        }
        if inputs.rows() != classes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} prompts for {} classes",
                inputs.rows(),
                classes.len()
            )));
        }
        let mut seen = classes.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != classes.len() {
            return Err(Error::ConfigInvalid(
                "a class has more than one prompt".into(),
            ));
        }
        Ok(Self { classes, inputs })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Position of a global class id.
    pub fn index_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Maps global labels to prompt positions.
    pub fn local_labels(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| {
                self.index_of(l).ok_or(Error::LabelOutOfRange {
                    label: l,
                    classes: self.len(),
                })
            })
            .collect()
    }

    pub fn embed(&self, model: &TwoTowerModel) -> Result<Matrix> {
        model.text.embed(&self.inputs)
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of `image · prompt` similarities.
pub fn classify_embeddings(images: &Matrix, prompts: &Matrix) -> Vec<usize> {
    images
        .iter_rows()
        .map(|e| {
            let scores: Vec<f64> = prompts.iter_rows().map(|p| dot(e, p)).collect();
            argmax_lowest(&scores)
        })
        .collect()
}

/// Prompt position with the highest similarity to the image.
pub fn zero_shot_classify(
    model: &TwoTowerModel,
    image_input: &[f64],
    prompts: &ClassPromptSet,
) -> Result<usize> {
    let e = model.image.forward(image_input)?;
    let p = prompts.embed(model)?;
    let e = Matrix::from_vec(1, e.len(), e)?;
    Ok(classify_embeddings(&e, &p)[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
}

/// How predictions are produced for a labeled split.
#[derive(Debug, Clone, Copy)]
pub enum Classifier<'a> {
    ZeroShot {
        model: &'a TwoTowerModel,
        prompts: &'a ClassPromptSet,
    },
    /// Linear head over image embeddings; output `k` is class `classes[k]`.
    Head {
        model: &'a TwoTowerModel,
        head: &'a Dense,
        classes: &'a [usize],
    },
}

impl Classifier<'_> {
    /// Predicted global class ids.
    pub fn predict(&self, images: &Matrix) -> Result<Vec<usize>> {
        match self {
            Classifier::ZeroShot { model, prompts } => {
                let e = model.image.embed(images)?;
                let p = prompts.embed(model)?;
                Ok(classify_embeddings(&e, &p)
                    .into_iter()
                    .map(|k| prompts.classes[k])
                    .collect())
            }
            Classifier::Head {
                model,
                head,
                classes,
            } => {
                if head.output_dim() != classes.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "head has {} outputs for {} classes",
                        head.output_dim(),
                        classes.len()
                    )));
                }
                let e = model.image.embed(images)?;
                Ok(e.iter_rows()
                    .map(|f| classes[argmax_lowest(&head.logits(f))])
                    .collect())
            }
        }
    }

    pub fn evaluate(&self, data: &LabeledDataset, metric: Metric) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let preds = self.predict(&data.images)?;
        Ok(score(&data.labels, &preds, metric))
    }
}

/// Zero-shot accuracy or macro-F1 of `model` on `data`.
pub fn evaluate(
    model: &TwoTowerModel,
    data: &LabeledDataset,
    prompts: &ClassPromptSet,
    metric: Metric,
) -> Result<f64> {
    Classifier::ZeroShot { model, prompts }.evaluate(data, metric)
}

pub fn score(labels: &[usize], preds: &[usize], metric: Metric) -> f64 {
    match metric {
        Metric::Accuracy => accuracy(labels, preds),
        Metric::MacroF1 => macro_f1(labels, preds),
    }
}

pub fn accuracy(labels: &[usize], preds: &[usize]) -> f64 {
    let hits = labels.iter().zip(preds).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Per-class (TP, FP, FN) for every class that occurs as a label or prediction.
pub fn confusion_counts(
    labels: &[usize],
    preds: &[usize],
) -> BTreeMap<usize, (usize, usize, usize)> {
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for (&y, &p) in labels.iter().zip(preds) {
        if y == p {
            counts.entry(y).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(y).or_default().2 += 1;
        }
    }
    counts
}

/// Unweighted mean of `2TP / (2TP + FP + FN)` over classes with any support
/// or prediction.
pub fn macro_f1_from_counts(counts: &[(usize, usize, usize)]) -> f64 {
    let f1s: Vec<f64> = counts
        .iter()
        .filter(|(tp, fp, fn_)| tp + fp + fn_ > 0)
        .map(|&(tp, fp, fn_)| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        .collect();
    if f1s.is_empty() {
        return 0.0;
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

pub fn macro_f1(labels: &[usize], preds: &[usize]) -> f64 {
    let counts: Vec<_> = confusion_counts(labels, preds).into_values().collect();
    macro_f1_from_counts(&counts)
}
