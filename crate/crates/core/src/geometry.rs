//! Difference vectors, the running average vector, and RSA.

use serde::{Deserialize, Serialize};

use crate::encoders::{FrozenSnapshot, TwoTowerModel};
use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, norm, pearson_correlation, squared_distance, Matrix};

/// Pre-trained embeddings of every reference sample, computed once.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    image: Matrix,
    text: Matrix,
}

impl ReferenceCache {
    pub fn build(frozen: &FrozenSnapshot, images: &Matrix, texts: &Matrix) -> Result<Self> {
        if images.rows() != texts.rows() {
            return Err(Error::ShapeMismatch(
                "reference images and texts differ in count".into(),
            ));
        }
        Ok(Self {
            image: frozen.image.embed(images)?,
            text: frozen.text.embed(texts)?,
        })
    }

    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.image.rows() == 0
    }

    /// Cached `(image, text)` embeddings for the given sample ids.
    pub fn lookup(&self, ids: &[usize]) -> Result<(Matrix, Matrix)> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(Error::MissingCache(bad));
        }
        Ok((self.image.select_rows(ids), self.text.select_rows(ids)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceVectorBatch {
    /// Image side: `f_ft(x) − f_pre(x)`.
    pub u: Matrix,
    /// Text side: `g_ft(t) − g_pre(t)`.
    pub v: Matrix,
    pub ids: Vec<usize>,
}

impl DifferenceVectorBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn subtract(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x -= y;
    }
    out
}

/// Difference vectors from already-computed fine-tuning embeddings.
pub fn difference_vectors_from_embeddings(
    ft_images: &Matrix,
    ft_texts: &Matrix,
    cache: &ReferenceCache,
    ids: &[usize],
) -> Result<DifferenceVectorBatch> {
    if ids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (pre_img, pre_txt) = cache.lookup(ids)?;
    if ft_images.shape() != pre_img.shape() || ft_texts.shape() != pre_txt.shape() {
        return Err(Error::ShapeMismatch(
            "fine-tuning embeddings do not match the cache".into(),
        ));
    }
    Ok(DifferenceVectorBatch {
        u: subtract(ft_images, &pre_img),
        v: subtract(ft_texts, &pre_txt),
        ids: ids.to_vec(),
    })
}

/// Embeds the reference inputs with `ft` and subtracts the cached embeddings.
pub fn difference_vectors(
    ft: &TwoTowerModel,
    cache: &ReferenceCache,
    images: &Matrix,
    texts: &Matrix,
    ids: &[usize],
) -> Result<DifferenceVectorBatch> {
    let fi = ft.image.embed(images)?;
    let ft_t = ft.text.embed(texts)?;
    difference_vectors_from_embeddings(&fi, &ft_t, cache, ids)
}

/// Exponential moving average of the batch-mean difference vector.
///
/// Works for any row width, so the cosine ablation uses it with width 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageVectorState {
    pub m: Vec<f64>,
    pub m_prev: Vec<f64>,
    pub alpha: f64,
}

impl AverageVectorState {
    /// Starts from the zero vector.
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        Self::with_initial(vec![0.0; dim], alpha)
    }

    pub fn with_initial(m: Vec<f64>, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::ConfigInvalid(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(Self {
            m_prev: m.clone(),
            m,
            alpha,
        })
    }

    /// `m ← α·m + (1 − α)·mean_j (u_j + v_j)/2`; the old `m` becomes `m_prev`.
    pub fn update(&self, u: &Matrix, v: &Matrix) -> Result<Self> {
        if u.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if u.shape() != v.shape() || u.cols() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "difference rows {:?}/{:?} for an average of width {}",
                u.shape(),
                v.shape(),
                self.m.len()
            )));
        }
        let mut mean = vec![0.0; self.m.len()];
        for j in 0..u.rows() {
            for ((acc, a), b) in mean.iter_mut().zip(u.row(j)).zip(v.row(j)) {
                *acc += (a + b) / 2.0;
            }
        }
        let w = (1.0 - self.alpha) / u.rows() as f64;
        let m = self
            .m
            .iter()
            .zip(&mean)
            .map(|(mp, s)| self.alpha * mp + w * s)
            .collect();
        Ok(Self {
            m,
            m_prev: self.m.clone(),
            alpha: self.alpha,
        })
    }

    pub fn update_batch(&self, dvb: &DifferenceVectorBatch) -> Result<Self> {
        self.update(&dvb.u, &dvb.v)
    }
}

/// Representation dissimilarity matrix of cosine distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Rdm {
    matrix: Matrix,
}

impl Rdm {
    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Strict upper triangle, row-major (`j > i`).
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.size();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            out.extend_from_slice(&self.matrix.row(i)[i + 1..]);
        }
        out
    }
}

pub fn rdm(embeddings: &Matrix) -> Result<Rdm> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(Error::TooFew { needed: 2, got: n });
    }
    let mut matrix = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - cosine_similarity(embeddings.row(i), embeddings.row(j))?;
            matrix.set(i, j, d);
            matrix.set(j, i, d);
        }
    }
    Ok(Rdm { matrix })
}

/// Pearson correlation between the upper triangles of both RDMs.
pub fn rsa_score(set_a: &Matrix, set_b: &Matrix) -> Result<f64> {
    if set_a.rows() != set_b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "RSA over {} and {} embeddings",
            set_a.rows(),
            set_b.rows()
        )));
    }
    if set_a.rows() < 3 {
        return Err(Error::TooFew {
            needed: 3,
            got: set_a.rows(),
        });
    }
    let a = rdm(set_a)?.upper_triangle();
    let b = rdm(set_b)?.upper_triangle();
    pearson_correlation(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffNormStats {
    pub mean_norm: f64,
    pub max_norm: f64,
    pub mean_u_v_gap: f64,
}

/// Norm statistics pooled over `u` and `v`, plus the mean pairwise gap.
pub fn diff_norm_stats(dvb: &DifferenceVectorBatch) -> Result<DiffNormStats> {
    if dvb.u.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let norms: Vec<f64> = dvb
        .u
        .iter_rows()
        .chain(dvb.v.iter_rows())
        .map(norm)
        .collect();
    let gap: f64 = dvb
        .u
        .iter_rows()
        .zip(dvb.v.iter_rows())
        .map(|(a, b)| squared_distance(a, b).sqrt())
        .sum();
    Ok(DiffNormStats {
        mean_norm: norms.iter().sum::<f64>() / norms.len() as f64,
        max_norm: norms.iter().cloned().fold(0.0, f64::max),
        mean_u_v_gap: gap / dvb.u.rows() as f64,
    })
}

/// One RSA evaluation as written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsaReport {
    pub corpus_size: usize,
    pub score: f64,
    pub mean_diff_norm: f64,
    pub max_diff_norm: f64,
}
