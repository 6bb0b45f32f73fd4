//! Loss functions and their gradients with respect to embeddings.
//!
//! Every loss returns a [`LossValue`] whose gradients are taken with respect
//! to the rows it was given. The encoder backward pass turns those into
//! parameter gradients. Batches are [`Matrix`] values, one vector per row.

use serde::{Deserialize, Serialize};

use crate::encoders::{Dense, DenseGrad};
use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, dot, Matrix};

/// A scalar loss plus its gradients.
///
/// `grad_image`/`grad_text` hold the gradient with respect to the first and
/// second inputs of the loss (image/text embeddings, or `u`/`v` difference
/// features). A loss with a single input leaves `grad_text` with zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_image: Matrix,
    pub grad_text: Matrix,
    pub grad_log_temperature: f64,
}

impl LossValue {
    fn scaled(&self, w: f64) -> LossValue {
        let scale = |m: &Matrix| {
            let mut m = m.clone();
            m.data_mut().iter_mut().for_each(|v| *v *= w);
            m
        };
        LossValue {
            value: w * self.value,
            grad_image: scale(&self.grad_image),
            grad_text: scale(&self.grad_text),
            grad_log_temperature: w * self.grad_log_temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "VanillaFT")]
    VanillaFt,
    #[serde(rename = "LPFT")]
    LpFt,
    #[serde(rename = "FLYP")]
    Flyp,
    #[serde(rename = "FLYPReplay")]
    FlypReplay,
    #[serde(rename = "SnD")]
    Snd,
    #[serde(rename = "DiVE")]
    Dive,
    #[serde(rename = "DiVECosine")]
    DiveCosine,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::VanillaFt,
        Method::LpFt,
        Method::Flyp,
        Method::FlypReplay,
        Method::Snd,
        Method::Dive,
        Method::DiveCosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::VanillaFt => "VanillaFT",
            Method::LpFt => "LPFT",
            Method::Flyp => "FLYP",
            Method::FlypReplay => "FLYPReplay",
            Method::Snd => "SnD",
            Method::Dive => "DiVE",
            Method::DiveCosine => "DiVECosine",
        }
    }

    pub fn uses_reference(self) -> bool {
        matches!(
            self,
            Method::FlypReplay | Method::Snd | Method::Dive | Method::DiveCosine
        )
    }

    /// Methods that train a classification head on the image tower only.
    pub fn uses_head(self) -> bool {
        matches!(self, Method::VanillaFt | Method::LpFt)
    }

    pub fn is_dive(self) -> bool {
        matches!(self, Method::Dive | Method::DiveCosine)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown method {s:?}")))
    }
}

fn default_true() -> bool {
    true
}

/// Which fine-tuning objective to run and its loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default = "MethodSpec::default_lambda")]
    pub lambda: f64,
    #[serde(default = "MethodSpec::default_unit")]
    pub lambda_snd: f64,
    #[serde(default = "MethodSpec::default_unit")]
    pub lambda_aux: f64,
    /// Ablation switches for the two geometry terms of DiVE / DiVECosine.
    #[serde(default = "default_true")]
    pub use_avl: bool,
    #[serde(default = "default_true")]
    pub use_pvl: bool,
}

impl MethodSpec {
    fn default_lambda() -> f64 {
        1000.0
    }

    fn default_unit() -> f64 {
        1.0
    }

    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambda: Self::default_lambda(),
            lambda_snd: 1.0,
            lambda_aux: 1.0,
            use_avl: true,
            use_pvl: true,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_terms(mut self, avl: bool, pvl: bool) -> Self {
        self.use_avl = avl;
        self.use_pvl = pvl;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda", self.lambda),
            ("lambda_snd", self.lambda_snd),
            ("lambda_aux", self.lambda_aux),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::ConfigInvalid(format!(
                    "{name} must be a non-negative number, got {w}"
                )));
            }
        }
        if self.method.is_dive() && !self.use_avl && !self.use_pvl {
            return Err(Error::ConfigInvalid(
                "DiVE needs at least one of AVL and PVL".into(),
            ));
        }
        Ok(())
    }
}

fn check_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Symmetric InfoNCE over index-aligned image/text embeddings.
///
/// Both directions are weighted `1/(2B)`. Gradients cover every embedding and
/// `log τ`.
pub fn contrastive_loss(images: &Matrix, texts: &Matrix, temperature: f64) -> Result<LossValue> {
    check_pair(images, texts)?;
    if !(temperature > 0.0) {
        return Err(Error::ConfigInvalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let b = images.rows();
    let mut logits = Matrix::zeros(b, b);
    for i in 0..b {
        for k in 0..b {
            logits.set(i, k, dot(images.row(i), texts.row(k)) / temperature);
        }
    }
    // row (image→text) and column (text→image) softmaxes, max-shifted
    let mut row_p = Matrix::zeros(b, b);
    let mut col_p = Matrix::zeros(b, b);
    let mut value = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        value -= logits.get(i, i) - lse;
        for k in 0..b {
            row_p.set(i, k, (logits.get(i, k) - max).exp() / sum);
        }
    }
    for k in 0..b {
        let max = (0..b)
            .map(|i| logits.get(i, k))
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..b).map(|i| (logits.get(i, k) - max).exp()).sum();
        let lse = max + sum.ln();
        value -= logits.get(k, k) - lse;
        for i in 0..b {
            col_p.set(i, k, (logits.get(i, k) - max).exp() / sum);
        }
    }
    let scale = 1.0 / (2.0 * b as f64);
    value *= scale;
    if !value.is_finite() {
        return Err(Error::NonFinite("contrastive_loss"));
    }

    let d = images.cols();
    let mut grad_image = Matrix::zeros(b, d);
    let mut grad_text = Matrix::zeros(b, d);
    let mut grad_log_t = 0.0;
    for i in 0..b {
        for k in 0..b {
            let delta = if i == k { 2.0 } else { 0.0 };
            let g = scale * (row_p.get(i, k) + col_p.get(i, k) - delta);
            grad_log_t -= g * logits.get(i, k);
            let gs = g / temperature;
            for (gi, t) in grad_image.row_mut(i).iter_mut().zip(texts.row(k)) {
                *gi += gs * t;
            }
            for (gt, e) in grad_text.row_mut(k).iter_mut().zip(images.row(i)) {
                *gt += gs * e;
            }
        }
    }
    Ok(LossValue {
        value,
        grad_image,
        grad_text,
        grad_log_temperature: grad_log_t,
    })
}

/// Mean softmax cross-entropy of a linear head over `features`.
///
/// Returns the loss (with `grad_image` = gradient w.r.t. features) and the
/// head gradient.
pub fn cross_entropy_head_loss(
    features: &Matrix,
    labels: &[usize],
    head: &Dense,
) -> Result<(LossValue, DenseGrad)> {
    let b = features.rows();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != b || features.cols() != head.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "{b} features of width {} with {} labels for a head over {} inputs",
            features.cols(),
            labels.len(),
            head.input_dim()
        )));
    }
    let classes = head.output_dim();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut grad_features = Matrix::zeros(b, features.cols());
    let mut grad_head = DenseGrad {
        weights: Matrix::zeros(classes, head.input_dim()),
        bias: vec![0.0; classes],
    };
    let mut logits = vec![0.0; classes];
    for i in 0..b {
        let f = features.row(i);
        for (c, l) in logits.iter_mut().enumerate() {
            *l = dot(head.weights.row(c), f) + head.bias[c];
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        value -= logits[labels[i]] - max - sum.ln();
        for c in 0..classes {
            let p = (logits[c] - max).exp() / sum;
            let g = inv_b * (p - if c == labels[i] { 1.0 } else { 0.0 });
            grad_head.bias[c] += g;
            for ((gw, x), (w, gf)) in grad_head.weights.row_mut(c).iter_mut().zip(f).zip(
                head.weights
                    .row(c)
                    .iter()
                    .zip(grad_features.row_mut(i).iter_mut()),
            ) {
                *gw += g * x;
                *gf += g * w;
            }
        }
    }
    value *= inv_b;
    if !value.is_finite() {
        return Err(Error::NonFinite("cross_entropy_head_loss"));
    }
    let loss = LossValue {
        value,
        grad_image: grad_features,
        grad_text: Matrix::zeros(0, head.input_dim()),
        grad_log_temperature: 0.0,
    };
    Ok((loss, grad_head))
}

/// Average vector loss: pulls every `u_j` and `v_j` toward the fixed target `m`.
///
/// `m` is treated as a constant. Rows may be full difference vectors or
/// one-column cosine scalars.
pub fn avl(u: &Matrix, v: &Matrix, m: &[f64]) -> Result<LossValue> {
    check_pair(u, v)?;
    if m.len() != u.cols() {
        return Err(Error::ShapeMismatch(format!(
            "average vector of length {} for width {}",
            m.len(),
            u.cols()
        )));
    }
    let inv = 1.0 / u.rows() as f64;
    let mut value = 0.0;
    let mut grad_u = Matrix::zeros(u.rows(), u.cols());
    let mut grad_v = Matrix::zeros(v.rows(), v.cols());
    for j in 0..u.rows() {
        for (src, dst) in [(u, &mut grad_u), (v, &mut grad_v)] {
            for ((x, mk), g) in src.row(j).iter().zip(m).zip(dst.row_mut(j)) {
                let r = x - mk;
                value += r * r;
                *g = 2.0 * inv * r;
            }
        }
    }
    Ok(LossValue {
        value: value * inv,
        grad_image: grad_u,
        grad_text: grad_v,
        grad_log_temperature: 0.0,
    })
}

/// Pairwise vector loss: pulls each `u_j` toward its partner `v_j`.
pub fn pvl(u: &Matrix, v: &Matrix) -> Result<LossValue> {
    check_pair(u, v)?;
    let inv = 1.0 / u.rows() as f64;
    let mut value = 0.0;
    let mut grad_u = Matrix::zeros(u.rows(), u.cols());
    let mut grad_v = Matrix::zeros(v.rows(), v.cols());
    for j in 0..u.rows() {
        for (k, (a, b)) in u.row(j).iter().zip(v.row(j)).enumerate() {
            let r = a - b;
            value += r * r;
            grad_u.set(j, k, 2.0 * inv * r);
            grad_v.set(j, k, -2.0 * inv * r);
        }
    }
    Ok(LossValue {
        value: value * inv,
        grad_image: grad_u,
        grad_text: grad_v,
        grad_log_temperature: 0.0,
    })
}

/// Feature distillation on image embeddings: pins `ft` to the frozen `pre`.
pub fn snd_loss(ft_images: &Matrix, pre_images: &Matrix) -> Result<LossValue> {
    check_pair(ft_images, pre_images)?;
    let inv = 1.0 / ft_images.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(ft_images.rows(), ft_images.cols());
    for ((a, b), g) in ft_images
        .data()
        .iter()
        .zip(pre_images.data())
        .zip(grad.data_mut())
    {
        let r = a - b;
        value += r * r;
        *g = 2.0 * inv * r;
    }
    Ok(LossValue {
        value: value * inv,
        grad_image: grad,
        grad_text: Matrix::zeros(0, ft_images.cols()),
        grad_log_temperature: 0.0,
    })
}

/// Inner product of the fine-tuning and pre-trained embedding of one sample.
pub fn cosine_diff_scalars(ft: &[f64], pre: &[f64]) -> Result<f64> {
    cosine_similarity(ft, pre)
}

/// Row-wise [`cosine_diff_scalars`] as a one-column matrix.
pub fn cosine_diff_batch(ft: &Matrix, pre: &Matrix) -> Result<Matrix> {
    check_pair(ft, pre)?;
    let vals = ft
        .iter_rows()
        .zip(pre.iter_rows())
        .map(|(a, b)| cosine_diff_scalars(a, b))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_vec(ft.rows(), 1, vals)
}

/// Chains a gradient w.r.t. cosine scalars (one column) back to the
/// fine-tuning embeddings: `∂(f·p)/∂f = p`.
pub fn cosine_scalar_grad_to_embeddings(grad_scalars: &Matrix, pre: &Matrix) -> Result<Matrix> {
    if grad_scalars.cols() != 1 || grad_scalars.rows() != pre.rows() {
        return Err(Error::ShapeMismatch(format!(
            "scalar grads {:?} for {} embeddings",
            grad_scalars.shape(),
            pre.rows()
        )));
    }
    let mut out = pre.clone();
    for i in 0..out.rows() {
        let g = grad_scalars.get(i, 0);
        out.row_mut(i).iter_mut().for_each(|v| *v *= g);
    }
    Ok(out)
}

/// Loss terms available to [`combine_final`]. All reference-side terms must
/// carry gradients with respect to the fine-tuning reference embeddings.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub avl: Option<LossValue>,
    pub pvl: Option<LossValue>,
    pub snd: Option<LossValue>,
    pub aux_cl: Option<LossValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    /// Gradients on the target batch (the `cl` term).
    pub target: LossValue,
    /// Weighted sum of the reference-batch terms, if the method has any.
    pub reference: Option<LossValue>,
}

fn add_into(acc: &mut Option<LossValue>, term: LossValue) -> Result<()> {
    match acc {
        None => *acc = Some(term),
        Some(a) => {
            if a.grad_image.shape() != term.grad_image.shape() {
                return Err(Error::ShapeMismatch(
                    "reference gradients disagree in shape".into(),
                ));
            }
            a.value += term.value;
            a.grad_log_temperature += term.grad_log_temperature;
            for (x, y) in a
                .grad_image
                .data_mut()
                .iter_mut()
                .zip(term.grad_image.data())
            {
                *x += y;
            }
            if a.grad_text.rows() == 0 {
                a.grad_text = term.grad_text;
            } else if term.grad_text.rows() != 0 {
                for (x, y) in a.grad_text.data_mut().iter_mut().zip(term.grad_text.data()) {
                    *x += y;
                }
            }
        }
    }
    Ok(())
}

/// Weighted total loss for a method:
/// DiVE `cl + λ(avl + pvl)`, SnD `cl + λ_snd·snd`, replay `cl + λ_aux·aux`.
pub fn combine_final(spec: &MethodSpec, cl: LossValue, terms: LossTerms) -> Result<CombinedLoss> {
    let name = spec.method.name();
    let (want_avl, want_pvl) = if spec.method.is_dive() {
        (spec.use_avl, spec.use_pvl)
    } else {
        (false, false)
    };
    let want_snd = spec.method == Method::Snd;
    let want_aux = spec.method == Method::FlypReplay;

    let mut reference = None;
    let slots = [
        ("avl", want_avl, terms.avl, spec.lambda),
        ("pvl", want_pvl, terms.pvl, spec.lambda),
        ("snd", want_snd, terms.snd, spec.lambda_snd),
        ("aux_cl", want_aux, terms.aux_cl, spec.lambda_aux),
    ];
    for (component, wanted, term, weight) in slots {
        match (wanted, term) {
            (true, None) => {
                return Err(Error::MissingComponent {
                    method: name,
                    component,
                })
            }
            (false, Some(_)) => {
                return Err(Error::IncompatibleComponent {
                    method: name,
                    component,
                })
            }
            (true, Some(t)) => add_into(&mut reference, t.scaled(weight))?,
            (false, None) => {}
        }
    }
    let value = cl.value + reference.as_ref().map_or(0.0, |r| r.value);
    if !value.is_finite() {
        return Err(Error::NonFinite("combined loss"));
    }
    Ok(CombinedLoss {
        value,
        target: cl,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{
        finite_difference_gradient, l2_normalize, random_orthogonal, relative_error, SeededRng,
    };

    fn unit_rows(rng: &mut SeededRng, n: usize, d: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.unit_vec(d)).collect();
        Matrix::from_rows(&rows, d).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows, rows[0].len()).unwrap()
    }

    #[test]
    fn contrastive_single_pair_is_zero() {
        let mut rng = SeededRng::new(0);
        let e = unit_rows(&mut rng, 1, 4);
        let t = unit_rows(&mut rng, 1, 4);
        assert_eq!(contrastive_loss(&e, &t, 0.07).unwrap().value, 0.0);
    }

    #[test]
    fn contrastive_two_orthogonal_pairs() {
        let e = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = contrastive_loss(&e, &e, 1.0).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((l.value - want).abs() < 1e-12);
        assert!((l.value - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn contrastive_survives_tiny_temperature() {
        let mut rng = SeededRng::new(1);
        let e = unit_rows(&mut rng, 6, 8);
        let t = unit_rows(&mut rng, 6, 8);
        let l = contrastive_loss(&e, &t, 0.001).unwrap();
        assert!(l.value.is_finite());
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(2);
        for _ in 0..20 {
            let b = 1 + rng.below(8);
            let d = 2 + rng.below(15);
            let tau = rng.uniform(0.05, 2.0);
            let e = unit_rows(&mut rng, b, d);
            let t = unit_rows(&mut rng, b, d);
            let l = contrastive_loss(&e, &t, tau).unwrap();
            let fd_e = finite_difference_gradient(
                |p| {
                    contrastive_loss(&Matrix::from_vec(b, d, p.to_vec()).unwrap(), &t, tau)
                        .unwrap()
                        .value
                },
                e.data(),
                1e-5,
            )
            .unwrap();
            let fd_t = finite_difference_gradient(
                |p| {
                    contrastive_loss(&e, &Matrix::from_vec(b, d, p.to_vec()).unwrap(), tau)
                        .unwrap()
                        .value
                },
                t.data(),
                1e-5,
            )
            .unwrap();
            let fd_tau = finite_difference_gradient(
                |p| contrastive_loss(&e, &t, p[0].exp()).unwrap().value,
                &[tau.ln()],
                1e-5,
            )
            .unwrap();
            assert!(relative_error(l.grad_image.data(), &fd_e) < 1e-4);
            assert!(relative_error(l.grad_text.data(), &fd_t) < 1e-4);
            assert!(relative_error(&[l.grad_log_temperature], &fd_tau) < 1e-4);
        }
    }

    #[test]
    fn contrastive_permutation_and_rotation_invariant() {
        let mut rng = SeededRng::new(3);
        let (b, d) = (6, 5);
        let e = unit_rows(&mut rng, b, d);
        let t = unit_rows(&mut rng, b, d);
        let base = contrastive_loss(&e, &t, 0.3).unwrap().value;

        let mut perm: Vec<usize> = (0..b).collect();
        rng.shuffle(&mut perm);
        let permuted = contrastive_loss(&e.select_rows(&perm), &t.select_rows(&perm), 0.3)
            .unwrap()
            .value;
        assert!((base - permuted).abs() < 1e-12);

        let q = random_orthogonal(d, &mut rng);
        let rot = |x: &Matrix| {
            let rows: Vec<Vec<f64>> = x.iter_rows().map(|r| q.mul_vec(r)).collect();
            Matrix::from_rows(&rows, d).unwrap()
        };
        let rotated = contrastive_loss(&rot(&e), &rot(&t), 0.3).unwrap().value;
        assert!((base - rotated).abs() < 1e-12);
    }

    #[test]
    fn contrastive_rejects_empty_batch() {
        let z = Matrix::zeros(0, 3);
        assert!(matches!(
            contrastive_loss(&z, &z, 1.0),
            Err(Error::EmptyBatch)
        ));
    }

    fn uniform_head(classes: usize, d: usize) -> Dense {
        Dense::new(Matrix::zeros(classes, d), vec![0.0; classes]).unwrap()
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let f = m(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let (l, _) = cross_entropy_head_loss(&f, &[0, 3], &uniform_head(4, 2)).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        assert!((l.value - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_saturates() {
        let mut head = uniform_head(3, 2);
        head.bias[1] = 20.0;
        let (l, _) = cross_entropy_head_loss(&m(&[&[1.0, 0.0]]), &[1], &head).unwrap();
        assert!(l.value < 1e-8);
        let mut prev = f64::INFINITY;
        for gap in [0.0, 2.0, 5.0, 10.0, 20.0] {
            head.bias[1] = gap;
            let (l, _) = cross_entropy_head_loss(&m(&[&[1.0, 0.0]]), &[1], &head).unwrap();
            assert!(l.value < prev);
            prev = l.value;
        }
    }

    #[test]
    fn cross_entropy_label_range() {
        assert!(matches!(
            cross_entropy_head_loss(&m(&[&[1.0, 0.0]]), &[4], &uniform_head(4, 2)),
            Err(Error::LabelOutOfRange {
                label: 4,
                classes: 4
            })
        ));
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(4);
        for _ in 0..20 {
            let b = 1 + rng.below(8);
            let d = 2 + rng.below(15);
            let c = 2 + rng.below(5);
            let f = unit_rows(&mut rng, b, d);
            let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
            let head = Dense::new(
                Matrix::from_vec(c, d, rng.normal_vec(c * d, 1.0)).unwrap(),
                rng.normal_vec(c, 0.5),
            )
            .unwrap();
            let (l, hg) = cross_entropy_head_loss(&f, &labels, &head).unwrap();
            let fd_f = finite_difference_gradient(
                |p| {
                    cross_entropy_head_loss(
                        &Matrix::from_vec(b, d, p.to_vec()).unwrap(),
                        &labels,
                        &head,
                    )
                    .unwrap()
                    .0
                    .value
                },
                f.data(),
                1e-5,
            )
            .unwrap();
            assert!(relative_error(l.grad_image.data(), &fd_f) < 1e-4);
            let fd_w = finite_difference_gradient(
                |p| {
                    let h = Dense::new(
                        Matrix::from_vec(c, d, p.to_vec()).unwrap(),
                        head.bias.clone(),
                    )
                    .unwrap();
                    cross_entropy_head_loss(&f, &labels, &h).unwrap().0.value
                },
                head.weights.data(),
                1e-5,
            )
            .unwrap();
            assert!(relative_error(hg.weights.data(), &fd_w) < 1e-4);
            let fd_b = finite_difference_gradient(
                |p| {
                    let h = Dense::new(head.weights.clone(), p.to_vec()).unwrap();
                    cross_entropy_head_loss(&f, &labels, &h).unwrap().0.value
                },
                &head.bias,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&hg.bias, &fd_b) < 1e-4);
        }
    }

    #[test]
    fn avl_examples() {
        let mv = [0.3, -0.1];
        let u = m(&[&mv, &mv]);
        assert_eq!(avl(&u, &u, &mv).unwrap().value, 0.0);

        let l = avl(&m(&[&[0.2, 0.0]]), &m(&[&[0.0, 0.0]]), &[0.1, 0.0]).unwrap();
        assert!((l.value - 0.02).abs() < 1e-15);
        assert!(matches!(
            avl(&Matrix::zeros(0, 2), &Matrix::zeros(0, 2), &[0.0, 0.0]),
            Err(Error::EmptyBatch)
        ));
        assert!(matches!(
            avl(&m(&[&[0.2, 0.0]]), &m(&[&[0.0, 0.0]]), &[0.1]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn pvl_examples() {
        let u = m(&[&[0.1, 0.2], &[-0.3, 0.0]]);
        assert_eq!(pvl(&u, &u).unwrap().value, 0.0);
        let l = pvl(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap();
        assert!((l.value - 2.0).abs() < 1e-15);

        let mut rng = SeededRng::new(5);
        let a = Matrix::from_vec(3, 4, rng.normal_vec(12, 0.1)).unwrap();
        let b = Matrix::from_vec(3, 4, rng.normal_vec(12, 0.1)).unwrap();
        // doubling u − v while keeping v fixed
        let mut a2 = a.clone();
        for (x, y) in a2.data_mut().iter_mut().zip(b.data()) {
            *x = y + 2.0 * (*x - y);
        }
        let ratio = pvl(&a2, &b).unwrap().value / pvl(&a, &b).unwrap().value;
        assert!((ratio - 4.0).abs() < 1e-12);
    }

    #[test]
    fn snd_examples() {
        let a = m(&[&[0.6, 0.8]]);
        assert_eq!(snd_loss(&a, &a).unwrap().value, 0.0);
        let l = snd_loss(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap();
        assert!((l.value - 2.0).abs() < 1e-15);
        assert_eq!(l.grad_text.rows(), 0);
    }

    #[test]
    fn geometry_losses_match_finite_differences() {
        let mut rng = SeededRng::new(6);
        for _ in 0..20 {
            let b = 1 + rng.below(8);
            let d = 1 + rng.below(16);
            let u = Matrix::from_vec(b, d, rng.normal_vec(b * d, 0.1)).unwrap();
            let v = Matrix::from_vec(b, d, rng.normal_vec(b * d, 0.1)).unwrap();
            let mv = rng.normal_vec(d, 0.05);
            let of = |p: &[f64]| Matrix::from_vec(b, d, p.to_vec()).unwrap();

            let l = avl(&u, &v, &mv).unwrap();
            let fd_u =
                finite_difference_gradient(|p| avl(&of(p), &v, &mv).unwrap().value, u.data(), 1e-5)
                    .unwrap();
            let fd_v =
                finite_difference_gradient(|p| avl(&u, &of(p), &mv).unwrap().value, v.data(), 1e-5)
                    .unwrap();
            assert!(relative_error(l.grad_image.data(), &fd_u) < 1e-4);
            assert!(relative_error(l.grad_text.data(), &fd_v) < 1e-4);

            let l = pvl(&u, &v).unwrap();
            let fd_u =
                finite_difference_gradient(|p| pvl(&of(p), &v).unwrap().value, u.data(), 1e-5)
                    .unwrap();
            let fd_v =
                finite_difference_gradient(|p| pvl(&u, &of(p)).unwrap().value, v.data(), 1e-5)
                    .unwrap();
            assert!(relative_error(l.grad_image.data(), &fd_u) < 1e-4);
            assert!(relative_error(l.grad_text.data(), &fd_v) < 1e-4);

            let l = snd_loss(&u, &v).unwrap();
            let fd =
                finite_difference_gradient(|p| snd_loss(&of(p), &v).unwrap().value, u.data(), 1e-5)
                    .unwrap();
            assert!(relative_error(l.grad_image.data(), &fd) < 1e-4);
        }
    }

    #[test]
    fn cosine_scalar_examples() {
        let a = l2_normalize(&[1.0, 2.0, -1.0]).unwrap();
        assert!((cosine_diff_scalars(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_diff_scalars(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(
            cosine_diff_scalars(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(),
            -1.0
        );
        assert!(matches!(
            cosine_diff_scalars(&[1.0, 1.0], &[1.0, 0.0]),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn cosine_variant_zero_on_ideal_state() {
        let s = m(&[&[0.9], &[0.9], &[0.9]]);
        assert_eq!(avl(&s, &s, &[0.9]).unwrap().value, 0.0);
        let t = m(&[&[0.9], &[0.7], &[0.5]]);
        assert_eq!(pvl(&t, &t).unwrap().value, 0.0);
    }

    fn unit_loss(value: f64, rows: usize) -> LossValue {
        LossValue {
            value,
            grad_image: Matrix::from_vec(rows, 1, vec![1.0; rows]).unwrap(),
            grad_text: Matrix::from_vec(rows, 1, vec![-1.0; rows]).unwrap(),
            grad_log_temperature: 0.5,
        }
    }

    #[test]
    fn combine_dive_example() {
        let spec = MethodSpec::new(Method::Dive);
        let terms = LossTerms {
            avl: Some(unit_loss(0.002, 2)),
            pvl: Some(unit_loss(0.001, 2)),
            ..Default::default()
        };
        let c = combine_final(&spec, unit_loss(1.0, 3), terms).unwrap();
        assert!((c.value - 4.0).abs() < 1e-12);
        let r = c.reference.unwrap();
        assert_eq!(r.grad_image.data(), &[2000.0, 2000.0]);
    }

    #[test]
    fn combine_lambda_zero_is_exactly_cl() {
        let spec = MethodSpec::new(Method::Dive).with_lambda(0.0);
        let cl = unit_loss(0.7310585786300049, 3);
        let terms = LossTerms {
            avl: Some(unit_loss(0.25, 2)),
            pvl: Some(unit_loss(0.125, 2)),
            ..Default::default()
        };
        let c = combine_final(&spec, cl.clone(), terms).unwrap();
        assert_eq!(c.value, cl.value);
        assert!(c
            .reference
            .unwrap()
            .grad_image
            .data()
            .iter()
            .all(|g| *g == 0.0));
    }

    #[test]
    fn combine_contract_errors() {
        let flyp = MethodSpec::new(Method::Flyp);
        let with_avl = LossTerms {
            avl: Some(unit_loss(0.1, 1)),
            ..Default::default()
        };
        assert!(matches!(
            combine_final(&flyp, unit_loss(1.0, 1), with_avl),
            Err(Error::IncompatibleComponent {
                component: "avl",
                ..
            })
        ));
        assert!(matches!(
            combine_final(
                &MethodSpec::new(Method::Snd),
                unit_loss(1.0, 1),
                LossTerms::default()
            ),
            Err(Error::MissingComponent {
                component: "snd",
                ..
            })
        ));
        let avl_only = MethodSpec::new(Method::Dive).with_terms(true, false);
        let c = combine_final(
            &avl_only,
            unit_loss(1.0, 1),
            LossTerms {
                avl: Some(unit_loss(0.001, 1)),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((c.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn combine_snd_and_replay_weights() {
        let mut snd = MethodSpec::new(Method::Snd);
        snd.lambda_snd = 2.0;
        let c = combine_final(
            &snd,
            unit_loss(1.0, 1),
            LossTerms {
                snd: Some(unit_loss(0.5, 1)),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((c.value - 2.0).abs() < 1e-15);
        let c = combine_final(
            &MethodSpec::new(Method::FlypReplay),
            unit_loss(1.0, 1),
            LossTerms {
                aux_cl: Some(unit_loss(0.25, 1)),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((c.value - 1.25).abs() < 1e-15);
        assert_eq!(c.reference.unwrap().grad_log_temperature, 0.5);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
    }
}
