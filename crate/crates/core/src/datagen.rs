//! Synthetic world: class prototypes, paired "image"/"text" vectors, and the
//! ID / OOD / zero-shot / reference splits used by every experiment.
//!
//! A sample of class `c` has latent `z = p_c + σ_w·ε`. Its image input is
//! `z + σ_n·ε₁` and its text input is `S·z + σ_n·ε₂` for a fixed full-rank
//! semantic map `S`. The prompt for class `c` is `S·p_c`. The out-of-domain
//! style applies a fixed rotation and translation to image inputs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{FrozenSnapshot, ModelSpec, TwoTowerModel};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, SeededRng};
use crate::objectives::contrastive_loss;
use crate::training::{
    evaluate, lr_at, optimizer_step, ClassPromptSet, FineTuneGrads, FineTuneState, Metric,
    OptimizerState, TrainableMask,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub num_classes_total: usize,
    pub num_target_classes: usize,
    pub input_dim: usize,
    /// Standard deviation of class prototype coordinates.
    pub prototype_scale: f64,
    /// Within-class spread of the shared latent.
    pub within_class_sigma: f64,
    /// Modality-specific noise on image and text inputs.
    pub noise_sigma: f64,
    pub ood_shift_strength: f64,
    pub ood_noise_sigma: f64,
    /// Share of pre-training and reference pairs rendered in the shifted style.
    pub shifted_style_fraction: f64,
    pub pretrain_per_class: usize,
    pub id_train_per_class: usize,
    pub id_val_per_class: usize,
    pub id_test_per_class: usize,
    pub ood_test_per_class: usize,
    pub zs_test_per_class: usize,
    pub reference_size: usize,
    pub rsa_eval_pairs: usize,
    /// Geometric decay of ID-train class frequencies; `None` means balanced.
    pub imbalance_ratio: Option<f64>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_classes_total: 40,
            num_target_classes: 10,
            input_dim: 32,
            prototype_scale: 0.35,
            within_class_sigma: 0.3,
            noise_sigma: 0.3,
            ood_shift_strength: 1.0,
            ood_noise_sigma: 0.4,
            shifted_style_fraction: 0.3,
            pretrain_per_class: 200,
            id_train_per_class: 100,
            id_val_per_class: 30,
            id_test_per_class: 30,
            ood_test_per_class: 30,
            zs_test_per_class: 30,
            reference_size: 4000,
            rsa_eval_pairs: 256,
            imbalance_ratio: None,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.num_target_classes == 0 || self.num_target_classes >= self.num_classes_total {
            return bad(format!(
                "need 0 < num_target_classes ({}) < num_classes_total ({}) so the zero-shot split is nonempty",
                self.num_target_classes, self.num_classes_total
            ));
        }
        if self.input_dim < 2 {
            return bad("input_dim must be at least 2".into());
        }
        let sizes = [
            ("pretrain_per_class", self.pretrain_per_class),
            ("id_train_per_class", self.id_train_per_class),
            ("id_val_per_class", self.id_val_per_class),
            ("id_test_per_class", self.id_test_per_class),
            ("ood_test_per_class", self.ood_test_per_class),
            ("zs_test_per_class", self.zs_test_per_class),
            ("reference_size", self.reference_size),
            ("rsa_eval_pairs", self.rsa_eval_pairs),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, n)| *n == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        let scales = [
            self.prototype_scale,
            self.within_class_sigma,
            self.noise_sigma,
            self.ood_shift_strength,
            self.ood_noise_sigma,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("scales and noise levels must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.shifted_style_fraction) {
            return bad("shifted_style_fraction must lie in [0, 1]".into());
        }
        if let Some(r) = self.imbalance_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("imbalance_ratio must lie in (0, 1], got {r}"));
            }
        }
        Ok(())
    }
}

/// Fixed style shift: Givens rotations on disjoint coordinate pairs, then a
/// translation. Strength 0 is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOperator {
    pairs: Vec<(usize, usize)>,
    angles: Vec<f64>,
    translation: Vec<f64>,
}

impl ShiftOperator {
    fn sample(dim: usize, strength: f64, scale: f64, rng: &mut SeededRng) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        rng.shuffle(&mut perm);
        let pairs: Vec<(usize, usize)> = perm.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let angles = pairs
            .iter()
            .map(|_| strength * rng.uniform(0.5, 1.0) * std::f64::consts::FRAC_PI_3)
            .collect();
        let dir = rng.unit_vec(dim);
        let translation = dir.iter().map(|v| strength * scale * v).collect();
        Self {
            pairs,
            angles,
            translation,
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        for (&(i, j), &a) in self.pairs.iter().zip(&self.angles) {
            let (s, c) = a.sin_cos();
            let (xi, xj) = (x[i], x[j]);
            x[i] = c * xi - s * xj;
            x[j] = s * xi + c * xj;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub seed: u64,
    /// `C_all × input_dim` class prototypes in latent/image space.
    pub prototypes: Matrix,
    pub semantic_map: Matrix,
    pub shift: ShiftOperator,
    pub target_classes: Vec<usize>,
    pub zs_classes: Vec<usize>,
}

/// Image/text pairs with class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub images: Matrix,
    pub texts: Matrix,
    pub classes: Vec<usize>,
    pub pair_ids: Vec<u64>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// The first `n` pairs (or all of them).
    pub fn truncated(&self, n: usize) -> PairedDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        PairedDataset {
            images: self.images.select_rows(&idx),
            texts: self.texts.select_rows(&idx),
            classes: self.classes[..idx.len()].to_vec(),
            pair_ids: self.pair_ids[..idx.len()].to_vec(),
        }
    }
}

/// Images with global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Every split generated for one world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldData {
    pub world: SyntheticWorld,
    pub pretrain: PairedDataset,
    pub reference: PairedDataset,
    pub rsa_eval: PairedDataset,
    pub id_train: LabeledDataset,
    pub id_val: LabeledDataset,
    pub id_test: LabeledDataset,
    pub ood_test: LabeledDataset,
    pub zs_test: LabeledDataset,
}

#[derive(Clone, Copy, PartialEq)]
enum Style {
    Base,
    Shifted,
    /// Shifted style with the out-of-domain noise level.
    OutOfDomain,
}

impl SyntheticWorld {
    pub fn new(spec: &WorldSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::for_stage(seed, "world");
        let (c, dim) = (spec.num_classes_total, spec.input_dim);
        let prototypes = Matrix::from_vec(c, dim, rng.normal_vec(c * dim, spec.prototype_scale))?;
        // Gaussian maps are full rank with probability one; 1/√n keeps the scale.
        let semantic_map = Matrix::from_vec(
            dim,
            dim,
            rng.normal_vec(dim * dim, 1.0 / (dim as f64).sqrt()),
        )?;
        let typical_norm = spec.prototype_scale * (dim as f64).sqrt();
        let shift = ShiftOperator::sample(dim, spec.ood_shift_strength, typical_norm, &mut rng);
        let mut classes: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut classes);
        let mut target_classes = classes[..spec.num_target_classes].to_vec();
        let mut zs_classes = classes[spec.num_target_classes..].to_vec();
        target_classes.sort_unstable();
        zs_classes.sort_unstable();
        Ok(Self {
            spec: spec.clone(),
            seed,
            prototypes,
            semantic_map,
            shift,
            target_classes,
            zs_classes,
        })
    }

    pub fn prompt_input(&self, class: usize) -> Vec<f64> {
        self.semantic_map.mul_vec(self.prototypes.row(class))
    }

    pub fn prompts(&self, classes: &[usize]) -> ClassPromptSet {
        let rows: Vec<Vec<f64>> = classes.iter().map(|&c| self.prompt_input(c)).collect();
        let inputs = Matrix::from_rows(&rows, self.spec.input_dim)
            .expect("prompt rows share the input width");
        ClassPromptSet::new(classes.to_vec(), inputs).expect("classes and prompt rows align")
    }

    pub fn target_prompts(&self) -> ClassPromptSet {
        self.prompts(&self.target_classes)
    }

    pub fn zs_prompts(&self) -> ClassPromptSet {
        self.prompts(&self.zs_classes)
    }

    fn latent(&self, class: usize, rng: &mut SeededRng) -> Vec<f64> {
        self.prototypes
            .row(class)
            .iter()
            .map(|p| p + self.spec.within_class_sigma * rng.normal())
            .collect()
    }

    fn image(&self, z: &[f64], style: Style, rng: &mut SeededRng) -> Vec<f64> {
        let sigma = match style {
            Style::OutOfDomain => self.spec.ood_noise_sigma,
            _ => self.spec.noise_sigma,
        };
        let mut x: Vec<f64> = z.iter().map(|v| v + sigma * rng.normal()).collect();
        if style != Style::Base {
            self.shift.apply(&mut x);
        }
        x
    }

    fn text(&self, z: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        let mut t = self.semantic_map.mul_vec(z);
        t.iter_mut()
            .for_each(|v| *v += self.spec.noise_sigma * rng.normal());
        t
    }

    fn paired(&self, classes: &[usize], stage: &str) -> PairedDataset {
        let mut rng = SeededRng::for_stage(self.seed, stage);
        let dim = self.spec.input_dim;
        let mut images = Vec::with_capacity(classes.len() * dim);
        let mut texts = Vec::with_capacity(classes.len() * dim);
        for &c in classes {
            let z = self.latent(c, &mut rng);
            let style = if rng.uniform(0.0, 1.0) < self.spec.shifted_style_fraction {
                Style::Shifted
            } else {
                Style::Base
            };
            images.extend(self.image(&z, style, &mut rng));
            texts.extend(self.text(&z, &mut rng));
        }
        let n = classes.len();
        PairedDataset {
            images: Matrix::from_vec(n, dim, images).expect("sized"),
            texts: Matrix::from_vec(n, dim, texts).expect("sized"),
            classes: classes.to_vec(),
            pair_ids: (0..n as u64).collect(),
        }
    }

    fn labeled(&self, classes: &[usize], style: Style, stage: &str) -> LabeledDataset {
        let mut rng = SeededRng::for_stage(self.seed, stage);
        let dim = self.spec.input_dim;
        let mut images = Vec::with_capacity(classes.len() * dim);
        for &c in classes {
            let z = self.latent(c, &mut rng);
            images.extend(self.image(&z, style, &mut rng));
        }
        LabeledDataset {
            images: Matrix::from_vec(classes.len(), dim, images).expect("sized"),
            labels: classes.to_vec(),
        }
    }

    /// Generates every split. Each split draws from its own stream.
    pub fn generate(&self) -> WorldData {
        let s = &self.spec;
        let all: Vec<usize> = (0..s.num_classes_total).collect();
        let repeat = |classes: &[usize], n: usize| -> Vec<usize> {
            classes
                .iter()
                .flat_map(|&c| std::iter::repeat_n(c, n))
                .collect()
        };
        let uniform = |n: usize, stage: &str| -> Vec<usize> {
            let mut rng = SeededRng::for_stage(self.seed, stage);
            (0..n).map(|_| rng.below(s.num_classes_total)).collect()
        };

        let mut pretrain_classes = repeat(&all, s.pretrain_per_class);
        SeededRng::for_stage(self.seed, "pretrain-order").shuffle(&mut pretrain_classes);

        let train_classes: Vec<usize> = match s.imbalance_ratio {
            None => repeat(&self.target_classes, s.id_train_per_class),
            Some(r) => self
                .target_classes
                .iter()
                .enumerate()
                .flat_map(|(rank, &c)| {
                    let n = ((s.id_train_per_class as f64) * r.powi(rank as i32))
                        .round()
                        .max(1.0) as usize;
                    std::iter::repeat_n(c, n)
                })
                .collect(),
        };

        WorldData {
            pretrain: self.paired(&pretrain_classes, "pretrain"),
            reference: self.paired(&uniform(s.reference_size, "reference-classes"), "reference"),
            rsa_eval: self.paired(&uniform(s.rsa_eval_pairs, "rsa-classes"), "rsa-eval"),
            id_train: self.labeled(&train_classes, Style::Base, "id-train"),
            id_val: self.labeled(
                &repeat(&self.target_classes, s.id_val_per_class),
                Style::Base,
                "id-val",
            ),
            id_test: self.labeled(
                &repeat(&self.target_classes, s.id_test_per_class),
                Style::Base,
                "id-test",
            ),
            ood_test: self.labeled(
                &repeat(&self.target_classes, s.ood_test_per_class),
                Style::OutOfDomain,
                "ood-test",
            ),
            zs_test: self.labeled(
                &repeat(&self.zs_classes, s.zs_test_per_class),
                Style::Base,
                "zs-test",
            ),
            world: self.clone(),
        }
    }
}

/// Builds the world for `seed` and all of its splits.
pub fn generate_world(spec: &WorldSpec, seed: u64) -> Result<WorldData> {
    Ok(SyntheticWorld::new(spec, seed)?.generate())
}

pub const DATASET_MAGIC: &[u8; 4] = b"DIVD";
pub const DATASET_VERSION: u32 = 1;
const KIND_PAIRED: u32 = 1;
const KIND_LABELED: u32 = 2;

/// Columnar binary layout, all little-endian:
/// magic, version u32, kind u32, count u64, image_dim u32, text_dim u32,
/// then the class column (u32 each), the pair-id column (u64, paired only),
/// the image block and the text block (f64, row-major).
fn encode(
    kind: u32,
    classes: &[usize],
    pair_ids: Option<&[u64]>,
    images: &Matrix,
    texts: Option<&Matrix>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&(classes.len() as u64).to_le_bytes());
    out.extend_from_slice(&(images.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(texts.map_or(0, Matrix::cols) as u32).to_le_bytes());
    for &c in classes {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for id in pair_ids.unwrap_or(&[]) {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for v in images
        .data()
        .iter()
        .chain(texts.map_or(&[][..], Matrix::data))
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Decoded {
    kind: u32,
    classes: Vec<usize>,
    pair_ids: Vec<u64>,
    images: Matrix,
    texts: Matrix,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("dataset truncated at byte {pos}")))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let kind = u32_at(take(4)?);
    if kind != KIND_PAIRED && kind != KIND_LABELED {
        return Err(Error::Format(format!("unknown dataset kind {kind}")));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let image_dim = u32_at(take(4)?) as usize;
    let text_dim = u32_at(take(4)?) as usize;
    let mul = |a: usize, b: usize| {
        a.checked_mul(b)
            .ok_or_else(|| Error::Format("size overflow".into()))
    };
    let classes = take(mul(count, 4)?)?
        .chunks_exact(4)
        .map(|c| u32_at(c) as usize)
        .collect();
    let pair_ids = if kind == KIND_PAIRED {
        take(mul(count, 8)?)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    } else {
        Vec::new()
    };
    let mut floats = |n: usize| -> Result<Vec<f64>> {
        Ok(take(mul(n, 8)?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let images = Matrix::from_vec(count, image_dim, floats(mul(count, image_dim)?)?)?;
    let texts = Matrix::from_vec(count, text_dim, floats(mul(count, text_dim)?)?)?;
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - pos
        )));
    }
    Ok(Decoded {
        kind,
        classes,
        pair_ids,
        images,
        texts,
    })
}

impl PairedDataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(
            KIND_PAIRED,
            &self.classes,
            Some(&self.pair_ids),
            &self.images,
            Some(&self.texts),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let d = decode(bytes)?;
        if d.kind != KIND_PAIRED {
            return Err(Error::Format("expected a paired dataset".into()));
        }
        Ok(Self {
            images: d.images,
            texts: d.texts,
            classes: d.classes,
            pair_ids: d.pair_ids,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,pair_id");
        header(&mut out, "img", self.images.cols());
        header(&mut out, "txt", self.texts.cols());
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{},{}", self.classes[i], self.pair_ids[i]);
            row(&mut out, self.images.row(i));
            row(&mut out, self.texts.row(i));
            out.push('\n');
        }
        out
    }
}

impl LabeledDataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(KIND_LABELED, &self.labels, None, &self.images, None)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let d = decode(bytes)?;
        if d.kind != KIND_LABELED {
            return Err(Error::Format("expected a labeled dataset".into()));
        }
        Ok(Self {
            images: d.images,
            labels: d.classes,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        header(&mut out, "img", self.images.cols());
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.labels[i]);
            row(&mut out, self.images.row(i));
            out.push('\n');
        }
        out
    }
}

fn header(out: &mut String, prefix: &str, n: usize) {
    for k in 0..n {
        let _ = write!(out, ",{prefix}_{k}");
    }
}

fn row(out: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(out, ",{v}");
    }
}

impl WorldData {
    /// Writes every split as `<name>.divd` and `<name>.csv` under `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: Vec<u8>, csv: String| -> Result<()> {
            let bin = dir.join(format!("{name}.divd"));
            std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
            let txt = dir.join(format!("{name}.csv"));
            std::fs::write(&txt, csv).map_err(|e| Error::io(&txt, e))
        };
        for (name, d) in [
            ("pretrain", &self.pretrain),
            ("reference", &self.reference),
            ("rsa_eval", &self.rsa_eval),
        ] {
            write(name, d.to_bytes(), d.to_csv())?;
        }
        for (name, d) in [
            ("id_train", &self.id_train),
            ("id_val", &self.id_val),
            ("id_test", &self.id_test),
            ("ood_test", &self.ood_test),
            ("zs_test", &self.zs_test),
        ] {
            write(name, d.to_bytes(), d.to_csv())?;
        }
        Ok(())
    }
}

/// Contrastive pre-training schedule on the all-class paired corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Zero-shot accuracy on held-out classes that ends training early.
    pub zs_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 40,
            batch_size: 128,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            warmup_steps: 50,
            zs_floor: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: TwoTowerModel,
    pub frozen: FrozenSnapshot,
    pub zs_acc: f64,
    pub epochs: usize,
    pub floor_reached: bool,
}

impl PretrainOutcome {
    /// `PretrainFailed` when the floor was not reached. Callers may ignore it.
    pub fn check_floor(&self, floor: f64) -> Result<()> {
        if self.zs_acc >= floor {
            Ok(())
        } else {
            Err(Error::PretrainFailed {
                achieved: self.zs_acc,
                floor,
            })
        }
    }
}

/// Trains a fresh two-tower model with the contrastive loss until held-out
/// zero-shot accuracy reaches the floor or the epoch budget runs out.
pub fn pretrain(
    data: &WorldData,
    model_spec: &ModelSpec,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let dim = data.world.spec.input_dim;
    if model_spec.image_input_dim != dim || model_spec.text_input_dim != dim {
        return Err(Error::ShapeMismatch(format!(
            "model expects inputs of width {}/{} but the world has {dim}",
            model_spec.image_input_dim, model_spec.text_input_dim
        )));
    }
    if data.pretrain.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(Error::ConfigInvalid(
            "pre-training batch size must be at least 1".into(),
        ));
    }
    let mut state = FineTuneState {
        model: TwoTowerModel::init(model_spec, &mut SeededRng::for_stage(seed, "pretrain-init")),
        head: None,
    };
    let mut opt = OptimizerState::for_state(&state, config.weight_decay)?;
    let mut order_rng = SeededRng::for_stage(seed, "pretrain-batches");
    let mask = TrainableMask {
        image: true,
        text: true,
        temperature: true,
        head: false,
    };
    let zs_prompts = data.world.zs_prompts();
    let n = data.pretrain.len();
    let total = config.max_epochs * n.div_ceil(config.batch_size);
    let mut step = 0;
    let mut zs_acc = evaluate(&state.model, &data.zs_test, &zs_prompts, Metric::Accuracy)?;
    let mut epochs = 0;
    while epochs < config.max_epochs && zs_acc < config.zs_floor {
        let mut order: Vec<usize> = (0..n).collect();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let model = &state.model;
            let ic = model
                .image
                .forward_batch(&data.pretrain.images.select_rows(chunk))?;
            let tc = model
                .text
                .forward_batch(&data.pretrain.texts.select_rows(chunk))?;
            let loss = contrastive_loss(ic.embeddings(), tc.embeddings(), model.temperature())?;
            let mut grads = FineTuneGrads::zeros_like(&state);
            model
                .image
                .backward(&ic, &loss.grad_image, &mut grads.bag.image)?;
            model
                .text
                .backward(&tc, &loss.grad_text, &mut grads.bag.text)?;
            grads.bag.log_temperature = loss.grad_log_temperature;
            step += 1;
            let lr = lr_at(step, total, config.warmup_steps, config.learning_rate);
            optimizer_step(&mut state, &grads, mask, &mut opt, lr)?;
        }
        epochs += 1;
        zs_acc = evaluate(&state.model, &data.zs_test, &zs_prompts, Metric::Accuracy)?;
    }
    let model = state.model;
    Ok(PretrainOutcome {
        frozen: FrozenSnapshot::new(&model),
        model,
        zs_acc,
        epochs,
        floor_reached: zs_acc >= config.zs_floor,
    })
}
