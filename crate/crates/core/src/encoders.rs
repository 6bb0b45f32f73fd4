//! Two-tower MLP encoders with hand-written reverse mode.
//!
//! Each tower is a stack of dense layers: `tanh` on every hidden layer, a
//! linear output layer, then L2 normalization. The backward pass includes the
//! normalization Jacobian `(I − eeᵀ)/‖z‖`.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::{dot, Matrix, SeededRng, EPS_NORM};

pub const TAU_MIN: f64 = 0.001;
pub const TAU_MAX: f64 = 10.0;
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`, row-major.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::ShapeMismatch(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self { weights, bias })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.uniform(-limit, limit))
            .collect();
        Self {
            weights: Matrix::from_vec(output, input, data).expect("sized above"),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    /// `W·a + b` for one input.
    pub fn logits(&self, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.apply(a, &mut out);
        out
    }

    fn apply(&self, a: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = dot(self.weights.row(o), a) + self.bias[o];
        }
    }
}

/// One encoder tower (θ for images, φ for texts).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    layers: Vec<Dense>,
}

/// Intermediates of a batched forward pass, consumed by [`EncoderWeights::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Matrix,
    /// Output of each layer: tanh-activated for hidden layers, raw for the last.
    outputs: Vec<Matrix>,
    norms: Vec<f64>,
    embeddings: Matrix,
}

impl ForwardCache {
    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn into_embeddings(self) -> Matrix {
        self.embeddings
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<DenseGrad>,
}

impl EncoderGrads {
    pub fn zeros_like(enc: &EncoderWeights) -> Self {
        Self {
            layers: enc
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weights: Matrix::zeros(l.output_dim(), l.input_dim()),
                    bias: vec![0.0; l.output_dim()],
                })
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weights.data_mut().fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl EncoderWeights {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch(
                "encoder needs at least one layer".into(),
            ));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        let finite = layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()));
        if !finite {
            return Err(Error::NonFinite("encoder weights"));
        }
        Ok(Self { layers })
    }

    /// Randomly initialized MLP `input → hidden… → output`.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    /// Overwrites all parameters from a flat vector in [`Self::flatten`] order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    fn shape_matches(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.shape() == b.weights.shape())
    }

    /// Embeds one input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let batch = Matrix::from_rows(&[input], self.input_dim())?;
        Ok(self.embed(&batch)?.into_vec())
    }

    /// Embeds a batch (one input per row) without keeping intermediates.
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_batch(inputs)?.into_embeddings())
    }

    pub fn forward_batch(&self, inputs: &Matrix) -> Result<ForwardCache> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input width {} for encoder expecting {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let n = inputs.rows();
        let last = self.layers.len() - 1;
        let mut outputs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let prev = if k == 0 { inputs } else { &outputs[k - 1] };
            let mut out = Matrix::zeros(n, layer.output_dim());
            for i in 0..n {
                let row = out.row_mut(i);
                layer.apply(prev.row(i), row);
                if k != last {
                    row.iter_mut().for_each(|v| *v = v.tanh());
                }
            }
            outputs.push(out);
        }
        let z = &outputs[last];
        let mut norms = Vec::with_capacity(n);
        let mut embeddings = Matrix::zeros(n, self.output_dim());
        for i in 0..n {
            let zn = dot(z.row(i), z.row(i)).sqrt();
            if !zn.is_finite() {
                return Err(Error::NonFinite("encoder forward"));
            }
            if zn <= EPS_NORM {
                return Err(Error::ZeroNorm { norm: zn });
            }
            for (e, v) in embeddings.row_mut(i).iter_mut().zip(z.row(i)) {
                *e = v / zn;
            }
            norms.push(zn);
        }
        Ok(ForwardCache {
            inputs: inputs.clone(),
            outputs,
            norms,
            embeddings,
        })
    }

    /// Accumulates into `grads` the gradient of `Σ_i upstream_i · e_i` and
    /// returns its gradient with respect to the inputs.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
        grads: &mut EncoderGrads,
    ) -> Result<Matrix> {
        if upstream.shape() != cache.embeddings.shape() {
            return Err(Error::ShapeMismatch(format!(
                "upstream {:?} vs embeddings {:?}",
                upstream.shape(),
                cache.embeddings.shape()
            )));
        }
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.weights.shape() != l.weights.shape())
        {
            return Err(Error::ShapeMismatch(
                "gradient buffer does not match encoder".into(),
            ));
        }
        let n = upstream.rows();
        let mut input_grads = Matrix::zeros(n, self.input_dim());
        let width = self
            .layers
            .iter()
            .map(Dense::output_dim)
            .max()
            .unwrap_or(0)
            .max(self.input_dim());
        let mut delta = vec![0.0; width];
        let mut below = vec![0.0; width];
        for i in 0..n {
            let e = cache.embeddings.row(i);
            let g = upstream.row(i);
            let eg = dot(e, g);
            let inv = 1.0 / cache.norms[i];
            let d = self.output_dim();
            for j in 0..d {
                delta[j] = (g[j] - e[j] * eg) * inv;
            }
            for k in (0..self.layers.len()).rev() {
                let layer = &self.layers[k];
                let prev = if k == 0 {
                    cache.inputs.row(i)
                } else {
                    cache.outputs[k - 1].row(i)
                };
                let (out_dim, in_dim) = (layer.output_dim(), layer.input_dim());
                let lg = &mut grads.layers[k];
                below[..in_dim].fill(0.0);
                for o in 0..out_dim {
                    let dh = delta[o];
                    if dh == 0.0 {
                        continue;
                    }
                    lg.bias[o] += dh;
                    for ((gw, a), (w, b)) in lg
                        .weights
                        .row_mut(o)
                        .iter_mut()
                        .zip(prev)
                        .zip(layer.weights.row(o).iter().zip(below[..in_dim].iter_mut()))
                    {
                        *gw += dh * a;
                        *b += dh * w;
                    }
                }
                if k > 0 {
                    // through tanh of the layer below
                    for (j, a) in prev.iter().enumerate() {
                        delta[j] = below[j] * (1.0 - a * a);
                    }
                } else {
                    input_grads.row_mut(i).copy_from_slice(&below[..in_dim]);
                }
            }
        }
        Ok(input_grads)
    }
}

/// Image tower, text tower and the log of the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    pub image: EncoderWeights,
    pub text: EncoderWeights,
    pub log_temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub image_input_dim: usize,
    pub text_input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub embed_dim: usize,
    pub init_temperature: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            image_input_dim: 32,
            text_input_dim: 32,
            hidden_width: 64,
            hidden_layers: 2,
            embed_dim: 16,
            init_temperature: DEFAULT_TAU,
        }
    }
}

impl TwoTowerModel {
    pub fn init(spec: &ModelSpec, rng: &mut SeededRng) -> Self {
        let hidden = vec![spec.hidden_width; spec.hidden_layers];
        let image = EncoderWeights::init(spec.image_input_dim, &hidden, spec.embed_dim, rng);
        let text = EncoderWeights::init(spec.text_input_dim, &hidden, spec.embed_dim, rng);
        Self {
            image,
            text,
            log_temperature: spec.init_temperature.clamp(TAU_MIN, TAU_MAX).ln(),
        }
    }

    pub fn new(image: EncoderWeights, text: EncoderWeights, log_temperature: f64) -> Result<Self> {
        if image.output_dim() != text.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "image tower embeds to {} but text tower to {}",
                image.output_dim(),
                text.output_dim()
            )));
        }
        if !log_temperature.is_finite() {
            return Err(Error::NonFinite("log_temperature"));
        }
        Ok(Self {
            image,
            text,
            log_temperature,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.image.output_dim()
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn clamp_temperature(&mut self) {
        self.log_temperature = self.log_temperature.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.image.shape_matches(&other.image) && self.text.shape_matches(&other.text)
    }

    /// Largest absolute parameter difference; `None` when shapes differ.
    pub fn max_param_deviation(&self, other: &Self) -> Option<f64> {
        if !self.same_shape(other) {
            return None;
        }
        let towers = self
            .image
            .flatten()
            .into_iter()
            .zip(other.image.flatten())
            .chain(self.text.flatten().into_iter().zip(other.text.flatten()));
        let dev = towers.map(|(a, b)| (a - b).abs()).fold(
            (self.log_temperature - other.log_temperature).abs(),
            f64::max,
        );
        Some(dev)
    }
}

/// Parameter gradients for a [`TwoTowerModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBag {
    pub image: EncoderGrads,
    pub text: EncoderGrads,
    pub log_temperature: f64,
}

impl GradientBag {
    pub fn zeros_like(model: &TwoTowerModel) -> Self {
        Self {
            image: EncoderGrads::zeros_like(&model.image),
            text: EncoderGrads::zeros_like(&model.text),
            log_temperature: 0.0,
        }
    }

    pub fn zero(&mut self) {
        self.image.zero();
        self.text.zero();
        self.log_temperature = 0.0;
    }
}

/// Immutable copy of the pre-trained model.
#[derive(Debug, Clone)]
pub struct FrozenSnapshot(Arc<TwoTowerModel>);

impl FrozenSnapshot {
    pub fn new(model: &TwoTowerModel) -> Self {
        Self(Arc::new(model.clone()))
    }

    pub fn model(&self) -> &TwoTowerModel {
        &self.0
    }

    /// A fresh, mutable copy to fine-tune from.
    pub fn thaw(&self) -> TwoTowerModel {
        (*self.0).clone()
    }
}

impl std::ops::Deref for FrozenSnapshot {
    type Target = TwoTowerModel;

    fn deref(&self) -> &TwoTowerModel {
        &self.0
    }
}

/// Parameter-wise `(1 − coeff)·pre + coeff·ft`.
pub fn interpolate_weights(
    pre: &TwoTowerModel,
    ft: &TwoTowerModel,
    coeff: f64,
) -> Result<TwoTowerModel> {
    if !(0.0..=1.0).contains(&coeff) {
        return Err(Error::CoeffOutOfRange(coeff));
    }
    if !pre.same_shape(ft) {
        return Err(Error::ShapeMismatch(
            "interpolating models of different shapes".into(),
        ));
    }
    // exact endpoints: (1−c)·a + c·b is not bit-exact at c ∈ {0, 1} for all a, b
    if coeff == 0.0 {
        return Ok(pre.clone());
    }
    if coeff == 1.0 {
        return Ok(ft.clone());
    }
    let lerp = |a: f64, b: f64| (1.0 - coeff) * a + coeff * b;
    let mut out = pre.clone();
    for (dst, src) in [(&mut out.image, &ft.image), (&mut out.text, &ft.text)] {
        for (d, s) in dst.param_slices_mut().into_iter().zip(src.param_slices()) {
            for (x, y) in d.iter_mut().zip(s) {
                *x = lerp(*x, *y);
            }
        }
    }
    out.log_temperature = lerp(pre.log_temperature, ft.log_temperature);
    Ok(out)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DIVE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a model in the little-endian checkpoint layout.
pub fn checkpoint_bytes(model: &TwoTowerModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * (model.image.num_params() + model.text.num_params()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for tower in [&model.image, &model.text] {
        out.extend_from_slice(&(tower.layers.len() as u32).to_le_bytes());
        for layer in &tower.layers {
            out.extend_from_slice(&(layer.weights.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.weights.cols() as u32).to_le_bytes());
            for v in layer.weights.data().iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&model.log_temperature.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TwoTowerModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut towers = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = r.u32()? as usize;
        let mut layers = Vec::new();
        for _ in 0..count {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let w = r.f64s(rows.saturating_mul(cols))?;
            let b = r.f64s(rows)?;
            layers.push(Dense::new(Matrix::from_vec(rows, cols, w)?, b)?);
        }
        towers.push(EncoderWeights::new(layers).map_err(|e| Error::Format(e.to_string()))?);
    }
    let log_t = r.f64s(1)?[0];
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let text = towers.pop().expect("two towers");
    let image = towers.pop().expect("two towers");
    TwoTowerModel::new(image, text, log_t).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_checkpoint(model: &TwoTowerModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TwoTowerModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_difference_gradient, l2_normalize, norm, relative_error};

    fn identity_encoder(n: usize) -> EncoderWeights {
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            w.set(i, i, 1.0);
        }
        EncoderWeights::new(vec![Dense::new(w, vec![0.0; n]).unwrap()]).unwrap()
    }

    fn small_model(seed: u64) -> TwoTowerModel {
        let spec = ModelSpec {
            image_input_dim: 5,
            text_input_dim: 4,
            hidden_width: 7,
            hidden_layers: 2,
            embed_dim: 3,
            init_temperature: 0.5,
        };
        let mut m = TwoTowerModel::init(&spec, &mut SeededRng::new(seed));
        // nonzero biases so their gradients are exercised
        let mut rng = SeededRng::new(seed + 100);
        for s in m
            .image
            .param_slices_mut()
            .into_iter()
            .chain(m.text.param_slices_mut())
        {
            for v in s.iter_mut() {
                *v += 0.1 * rng.normal();
            }
        }
        m
    }

    #[test]
    fn identity_layer_normalizes_input() {
        let e = identity_encoder(2).forward(&[3.0, 4.0]).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic_and_unit_norm() {
        let m = small_model(1);
        let x = [0.3, -1.2, 0.5, 2.0, -0.1];
        let a = m.image.forward(&x).unwrap();
        let b = m.image.forward(&x).unwrap();
        assert_eq!(a, b);
        assert!((norm(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_hidden_weights_reduce_to_bias_path() {
        let hidden_bias = vec![0.5, -0.3, 0.8];
        let hidden = Dense::new(Matrix::zeros(3, 2), hidden_bias.clone()).unwrap();
        let w_out = Matrix::from_vec(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.0, 1.5]).unwrap();
        let b_out = vec![0.1, -0.2];
        let out = Dense::new(w_out.clone(), b_out.clone()).unwrap();
        let enc = EncoderWeights::new(vec![hidden, out]).unwrap();

        // hand evaluation of W_out · tanh(b) + b_out
        let act: Vec<f64> = hidden_bias.iter().map(|b| b.tanh()).collect();
        let z: Vec<f64> = (0..2).map(|o| dot(w_out.row(o), &act) + b_out[o]).collect();
        let want = l2_normalize(&z).unwrap();
        let got = enc.forward(&[7.0, -3.0]).unwrap();
        assert!(relative_error(&got, &want) < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = small_model(2);
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4, 0.5]], 5).unwrap();
        let cache = m.image.forward_batch(&x).unwrap();
        let mut g = EncoderGrads::zeros_like(&m.image);
        let dx = m
            .image
            .backward(&cache, &Matrix::zeros(1, 3), &mut g)
            .unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(dx.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn upstream_parallel_to_embedding_is_projected_out() {
        let m = small_model(3);
        let x = Matrix::from_rows(&[[1.0, -0.5, 0.2, 0.0, 0.7]], 5).unwrap();
        let cache = m.image.forward_batch(&x).unwrap();
        let upstream = Matrix::from_rows(
            &[cache
                .embeddings()
                .row(0)
                .iter()
                .map(|v| 2.5 * v)
                .collect::<Vec<_>>()],
            3,
        )
        .unwrap();
        let mut g = EncoderGrads::zeros_like(&m.image);
        m.image.backward(&cache, &upstream, &mut g).unwrap();
        assert!(g.flatten().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn single_layer_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(11);
        let enc = EncoderWeights::init(4, &[], 3, &mut rng);
        let x = vec![0.4, -1.0, 0.3, 0.8];
        let e = enc.forward(&x).unwrap();
        // unit c orthogonal to e
        let mut c = rng.normal_vec(3, 1.0);
        let p = dot(&c, &e);
        c.iter_mut().zip(&e).for_each(|(ci, ei)| *ci -= p * ei);
        let c = l2_normalize(&c).unwrap();

        let cache = enc
            .forward_batch(&Matrix::from_rows(&[&x], 4).unwrap())
            .unwrap();
        let mut g = EncoderGrads::zeros_like(&enc);
        enc.backward(&cache, &Matrix::from_rows(&[&c], 3).unwrap(), &mut g)
            .unwrap();

        let flat = enc.flatten();
        let fd = finite_difference_gradient(
            |p| {
                let mut e2 = enc.clone();
                e2.set_flat(p).unwrap();
                dot(&e2.forward(&x).unwrap(), &c)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&g.flatten(), &fd) < 1e-4);
    }

    #[test]
    fn deep_gradient_and_input_gradient_match_finite_differences() {
        let m = small_model(4);
        let mut rng = SeededRng::new(5);
        let xs = Matrix::from_vec(3, 5, rng.normal_vec(15, 1.0)).unwrap();
        let up = Matrix::from_vec(3, 3, rng.normal_vec(9, 1.0)).unwrap();
        let objective = |enc: &EncoderWeights, xs: &Matrix| {
            let e = enc.embed(xs).unwrap();
            dot(e.data(), up.data())
        };
        let cache = m.image.forward_batch(&xs).unwrap();
        let mut g = EncoderGrads::zeros_like(&m.image);
        let dx = m.image.backward(&cache, &up, &mut g).unwrap();

        let fd = finite_difference_gradient(
            |p| {
                let mut e2 = m.image.clone();
                e2.set_flat(p).unwrap();
                objective(&e2, &xs)
            },
            &m.image.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&g.flatten(), &fd) < 1e-4);

        let fd_x = finite_difference_gradient(
            |p| objective(&m.image, &Matrix::from_vec(3, 5, p.to_vec()).unwrap()),
            xs.data(),
            1e-5,
        )
        .unwrap();
        assert!(relative_error(dx.data(), &fd_x) < 1e-4);
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let m = small_model(6);
        let cache = m
            .text
            .forward_batch(&Matrix::from_vec(2, 4, vec![1.0; 8]).unwrap())
            .unwrap();
        let mut g = EncoderGrads::zeros_like(&m.text);
        assert!(matches!(
            m.text.backward(&cache, &Matrix::zeros(3, 3), &mut g),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let pre = small_model(7);
        let ft = small_model(8);
        assert_eq!(interpolate_weights(&pre, &ft, 0.0).unwrap(), pre);
        assert_eq!(interpolate_weights(&pre, &ft, 1.0).unwrap(), ft);

        let mut a = pre.clone();
        let mut b = pre.clone();
        a.image.param_slices_mut()[0][0] = 2.0;
        b.image.param_slices_mut()[0][0] = 4.0;
        let mid = interpolate_weights(&a, &b, 0.5).unwrap();
        assert_eq!(mid.image.param_slices()[0][0], 3.0);

        assert!(matches!(
            interpolate_weights(&pre, &ft, 1.5),
            Err(Error::CoeffOutOfRange(_))
        ));
        let other = TwoTowerModel::init(&ModelSpec::default(), &mut SeededRng::new(0));
        assert!(matches!(
            interpolate_weights(&pre, &other, 0.5),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = small_model(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&m));
        assert_eq!(back, m);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let bytes = checkpoint_bytes(&small_model(10));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            checkpoint_from_bytes(&extra),
            Err(Error::Format(_))
        ));
        // second layer's column count no longer chains
        let mut broken = bytes;
        let second_layer_cols = 4 + 4 + 4 + 8 + (7 * 5 + 7) * 8 + 4;
        broken[second_layer_cols] = 9;
        assert!(matches!(
            checkpoint_from_bytes(&broken),
            Err(Error::Format(_))
        ));
    }
}
