//! Local-global point cloud encoder.
//!
//! Seven dense layers and two learnable fusion vectors map an object-frame
//! point patch to a unit-norm 512-d embedding:
//!
//! ```text
//! points (N×3) ─ feat1 ─ feat2 ─ feat3 ─ feat4 ─ feat5        (ReLU, 64/64/64/128/1024)
//!                          │                         │
//!                          │         local = [feat2 | feat5]  (N×1088)
//!                          │
//!                          └─ attn ─ softplus ─ weights       (N×1088)
//!
//! pooled   = column max of local
//! attended = Σ_i local(i,·) ⊙ weights(i,·) / Σ_j weights(i,j)
//! output   = normalize(fusion(alpha ⊙ attended + beta ⊙ pooled))
//! ```
//!
//! Everything runs in f64 so the analytic gradients can be checked against
//! central differences. Checkpoints store f32.

pub mod checkpoint;
mod patch;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use patch::{crop_and_resample, PointCloud, PointPatch};

/// Coordinates per input point.
pub const POINT_DIM: usize = 3;
/// Output widths of the five per-point feature layers.
pub const FEATURE_WIDTHS: [usize; 5] = [64, 64, 64, 128, 1024];
/// Width of the second feature layer, the local branch of the concat.
pub const LOCAL_WIDTH: usize = 64;
/// Width of the concatenated local/global feature.
pub const CONCAT_WIDTH: usize = 1088;
pub const EMBED_DIM: usize = 512;
/// Patch size used while training.
pub const TRAIN_POINTS: usize = 800;
/// Patch size used at inference.
pub const TEST_POINTS: usize = 400;

/// Attention row sums below this are nudged by the same amount.
const ROW_SUM_FLOOR: f64 = 1e-12;
/// Tolerance on the unit norm of an embedding.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("point patch is empty")]
    EmptyPatch,
    #[error("point patch has non-finite coordinates")]
    NonFinitePatch,
    #[error("point patch must have {POINT_DIM} columns, got {0}")]
    PatchWidth(usize),
    #[error("encoder parameter `{0}` contains NaN or infinity")]
    NonFiniteParams(&'static str),
    #[error("encoder parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("fusion output is exactly zero; cannot normalize")]
    DegenerateOutput,
    #[error("embedding norm {0} is not 1 within {UNIT_NORM_TOL}")]
    NotUnitNorm(f64),
    #[error("upstream gradient has length {0}, expected {EMBED_DIM}")]
    UpstreamLength(usize),
}

/// Unit-norm representation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps an already normalized vector.
    pub fn new(v: Vec<f64>) -> Result<Self, EncoderError> {
        let n = norm(&v);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(EncoderError::NotUnitNorm(n));
        }
        Ok(Self(v))
    }

    /// Normalizes `v`; fails only on the zero or non-finite vector.
    pub fn normalized(mut v: Vec<f64>) -> Result<Self, EncoderError> {
        let n = norm(&v);
        if n == 0.0 || !n.is_finite() {
            return Err(EncoderError::DegenerateOutput);
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = EncoderError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler keep the loop vectorized.
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `clamp(1 − a·b, 0, 1)`: 0 for identical embeddings, 1 for orthogonal
/// or opposed ones.
pub fn utr_similarity_cost(a: &Embedding, b: &Embedding) -> Result<f64, EncoderError> {
    for e in [a, b] {
        let n = norm(&e.0);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(EncoderError::NotUnitNorm(n));
        }
    }
    Ok(similarity_cost_unchecked(a, b))
}

#[inline]
pub(crate) fn similarity_cost_unchecked(a: &Embedding, b: &Embedding) -> f64 {
    (1.0 - a.dot(b)).clamp(0.0, 1.0)
}

/// Dense layer; `weight` is stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    fn uniform(fan_in: usize, fan_out: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound));
        Self { weight, bias: Array1::zeros(fan_out) }
    }

    fn forward(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut out = input.dot(&self.weight);
        out += &self.bias;
        out
    }
}

/// All learnable encoder tensors. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub feat: [Dense; 5],
    pub attn: Dense,
    pub fusion: Dense,
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Checkpoint key names in storage order.
pub const TENSOR_NAMES: [&str; 16] = [
    "feat1.weight",
    "feat1.bias",
    "feat2.weight",
    "feat2.bias",
    "feat3.weight",
    "feat3.bias",
    "feat4.weight",
    "feat4.bias",
    "feat5.weight",
    "feat5.bias",
    "attn.weight",
    "attn.bias",
    "fusion.weight",
    "fusion.bias",
    "alpha",
    "beta",
];

fn layer_dims() -> [(usize, usize); 7] {
    let w = FEATURE_WIDTHS;
    [
        (POINT_DIM, w[0]),
        (w[0], w[1]),
        (w[1], w[2]),
        (w[2], w[3]),
        (w[3], w[4]),
        (LOCAL_WIDTH, CONCAT_WIDTH),
        (CONCAT_WIDTH, EMBED_DIM),
    ]
}

/// Expected shape of every tensor, in [`TENSOR_NAMES`] order.
pub fn tensor_shapes() -> Vec<(&'static str, Vec<usize>)> {
    let mut shapes = Vec::with_capacity(TENSOR_NAMES.len());
    for (k, (fan_in, fan_out)) in layer_dims().into_iter().enumerate() {
        shapes.push((TENSOR_NAMES[2 * k], vec![fan_in, fan_out]));
        shapes.push((TENSOR_NAMES[2 * k + 1], vec![fan_out]));
    }
    shapes.push(("alpha", vec![CONCAT_WIDTH]));
    shapes.push(("beta", vec![CONCAT_WIDTH]));
    shapes
}

impl EncoderParams {
    pub fn zeros() -> Self {
        let d = layer_dims();
        Self {
            feat: std::array::from_fn(|k| Dense::zeros(d[k].0, d[k].1)),
            attn: Dense::zeros(d[5].0, d[5].1),
            fusion: Dense::zeros(d[6].0, d[6].1),
            alpha: Array1::zeros(CONCAT_WIDTH),
            beta: Array1::zeros(CONCAT_WIDTH),
        }
    }

    /// He-uniform feature layers, Glorot-uniform attention and fusion,
    /// zero biases, `alpha = beta = 1`.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = layer_dims();
        let feat = std::array::from_fn(|k| {
            let (i, o) = d[k];
            Dense::uniform(i, o, (6.0 / i as f64).sqrt(), &mut rng)
        });
        let glorot = |(i, o): (usize, usize)| (6.0 / (i + o) as f64).sqrt();
        let attn = Dense::uniform(d[5].0, d[5].1, glorot(d[5]), &mut rng);
        let fusion = Dense::uniform(d[6].0, d[6].1, glorot(d[6]), &mut rng);
        Self {
            feat,
            attn,
            fusion,
            alpha: Array1::ones(CONCAT_WIDTH),
            beta: Array1::ones(CONCAT_WIDTH),
        }
    }

    /// Flat views of every tensor, in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(16);
        for layer in self.feat.iter().chain([&self.attn, &self.fusion]) {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out.push(self.alpha.as_slice().expect("standard layout"));
        out.push(self.beta.as_slice().expect("standard layout"));
        TENSOR_NAMES.into_iter().zip(out).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(16);
        let Self { feat, attn, fusion, alpha, beta } = self;
        for layer in feat.iter_mut().chain([attn, fusion]) {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(alpha.as_slice_mut().expect("standard layout"));
        out.push(beta.as_slice_mut().expect("standard layout"));
        TENSOR_NAMES.into_iter().zip(out).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(EncoderError::NonFiniteParams(name));
            }
        }
        Ok(())
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Intermediates kept by the forward pass for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    /// Post-ReLU activations of the five feature layers.
    acts: Vec<Array2<f64>>,
    /// Softplus attention weights.
    weights: Array2<f64>,
    /// Sigmoid of the attention pre-activations (softplus derivative).
    weight_slope: Array2<f64>,
    row_sums: Array1<f64>,
    argmax: Vec<usize>,
    pooled: Array1<f64>,
    attended: Array1<f64>,
    fused: Array1<f64>,
    raw_norm: f64,
    pub(crate) output: Array1<f64>,
}

impl ForwardCache {
    pub fn embedding(&self) -> Embedding {
        Embedding(self.output.to_vec())
    }

    /// Discrete choices made by this pass.
    pub(crate) fn branch(&self) -> Branch {
        Branch {
            masks: self.acts.iter().map(|a| a.iter().map(|v| *v > 0.0).collect()).collect(),
            argmax: self.argmax.clone(),
        }
    }
}

/// ReLU on/off masks and max-pool winners of one forward pass. Holding them
/// fixed turns the encoder into a smooth function that agrees with it near
/// the point where they were recorded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Branch {
    masks: Vec<Vec<bool>>,
    argmax: Vec<usize>,
}

/// Gradients of a scalar objective through one encoder call.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    pub params: EncoderParams,
    /// Gradient with respect to the input points (N×3).
    pub input: Array2<f64>,
}

pub fn encode(patch: &PointPatch, params: &EncoderParams) -> Result<Embedding, EncoderError> {
    Ok(forward(patch, params)?.embedding())
}

/// Forward pass keeping the intermediates needed for backpropagation.
pub fn forward(patch: &PointPatch, params: &EncoderParams) -> Result<ForwardCache, EncoderError> {
    params.validate()?;
    forward_unchecked(patch.points(), params)
}

pub(crate) fn forward_unchecked(points: ArrayView2<f64>, params: &EncoderParams) -> Result<ForwardCache, EncoderError> {
    forward_impl(points, params, None)
}

/// Forward pass with the ReLU masks and pool winners taken from `branch`.
pub(crate) fn forward_on_branch(
    points: ArrayView2<f64>,
    params: &EncoderParams,
    branch: &Branch,
) -> Result<Array1<f64>, EncoderError> {
    Ok(forward_impl(points, params, Some(branch))?.output)
}

fn forward_impl(points: ArrayView2<f64>, params: &EncoderParams, branch: Option<&Branch>) -> Result<ForwardCache, EncoderError> {
    let n = points.nrows();
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(5);
    for (k, layer) in params.feat.iter().enumerate() {
        let mut z = match acts.last() {
            Some(prev) if k > 0 => layer.forward(prev.view()),
            _ => layer.forward(points),
        };
        match branch {
            Some(b) => z.iter_mut().zip(&b.masks[k]).for_each(|(v, on)| *v = if *on { *v } else { 0.0 }),
            None => z.mapv_inplace(|v| v.max(0.0)),
        }
        acts.push(z);
    }
    let local = &acts[1];
    let global = &acts[4];

    // Column max over points of [local | global]; the first maximum wins.
    let mut pooled = Array1::from_elem(CONCAT_WIDTH, f64::NEG_INFINITY);
    let mut argmax = vec![0usize; CONCAT_WIDTH];
    if let Some(b) = branch {
        for (j, &i) in b.argmax.iter().enumerate() {
            pooled[j] = if j < LOCAL_WIDTH { local[[i, j]] } else { global[[i, j - LOCAL_WIDTH]] };
        }
        argmax.clone_from(&b.argmax);
    } else {
        for i in 0..n {
            let row = local.row(i).into_iter().chain(global.row(i));
            for (j, &v) in row.enumerate() {
                if v > pooled[j] {
                    pooled[j] = v;
                    argmax[j] = i;
                }
            }
        }
    }

    // Softplus attention weights, computed once from e = exp(-|z|).
    let mut weights = params.attn.forward(local.view());
    let mut weight_slope = Array2::zeros(weights.raw_dim());
    Zip::from(&mut weights).and(&mut weight_slope).for_each(|w, slope| {
        let z = *w;
        let e = (-z.abs()).exp();
        *w = z.max(0.0) + e.ln_1p();
        *slope = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    });
    let mut row_sums = weights.sum_axis(Axis(1));
    row_sums.mapv_inplace(|s| if s.abs() < ROW_SUM_FLOOR { s + ROW_SUM_FLOOR } else { s });

    let mut attended = Array1::<f64>::zeros(CONCAT_WIDTH);
    for i in 0..n {
        let inv = 1.0 / row_sums[i];
        let w = weights.row(i);
        let (w_local, w_global) = w.split_at(Axis(0), LOCAL_WIDTH);
        let (a_local, a_global) = attended.view_mut().split_at(Axis(0), LOCAL_WIDTH);
        Zip::from(a_local).and(local.row(i)).and(w_local).for_each(|a, &f, &w| *a += f * w * inv);
        Zip::from(a_global).and(global.row(i)).and(w_global).for_each(|a, &f, &w| *a += f * w * inv);
    }

    let fused = &params.alpha * &attended + &params.beta * &pooled;
    // As a 1×C matrix product; ndarray's vector-matrix path walks the
    // weight column by column.
    let mut raw = fused.view().insert_axis(Axis(0)).dot(&params.fusion.weight).remove_axis(Axis(0));
    raw += &params.fusion.bias;
    let raw_norm = raw.dot(&raw).sqrt();
    if raw_norm == 0.0 || !raw_norm.is_finite() {
        return Err(EncoderError::DegenerateOutput);
    }
    let output = raw / raw_norm;

    Ok(ForwardCache {
        input: points.to_owned(),
        acts,
        weights,
        weight_slope,
        row_sums,
        argmax,
        pooled,
        attended,
        fused,
        raw_norm,
        output,
    })
}

/// Reverse-mode gradients of `⟨upstream, encode(patch)⟩`.
pub fn encode_backward(
    patch: &PointPatch,
    params: &EncoderParams,
    upstream: &[f64],
) -> Result<EncoderGradients, EncoderError> {
    let cache = forward(patch, params)?;
    backward(&cache, params, upstream)
}

pub fn backward(cache: &ForwardCache, params: &EncoderParams, upstream: &[f64]) -> Result<EncoderGradients, EncoderError> {
    if upstream.len() != EMBED_DIM {
        return Err(EncoderError::UpstreamLength(upstream.len()));
    }
    let g = ArrayView1::from(upstream);
    let n = cache.input.nrows();
    let [h1, h2, h3, h4, h5] = [0, 1, 2, 3, 4].map(|k| &cache.acts[k]);
    let mut grads = EncoderParams::zeros();

    // L2 normalization.
    let p = &cache.output;
    let d_raw = (&g - &(p * p.dot(&g))) / cache.raw_norm;

    // Fusion layer and the alpha/beta blend.
    let fused = cache.fused.view().insert_axis(Axis(1));
    grads.fusion.weight = standard(fused.dot(&d_raw.view().insert_axis(Axis(0))));
    grads.fusion.bias = d_raw.clone();
    let d_fused = params.fusion.weight.dot(&d_raw);
    grads.alpha = &d_fused * &cache.attended;
    grads.beta = &d_fused * &cache.pooled;
    let d_attended = &d_fused * &params.alpha;
    let d_pooled = &d_fused * &params.beta;

    // Gradient on the concat [h2 | h5] and on the attention pre-activations.
    let mut d_local = Array2::<f64>::zeros((n, LOCAL_WIDTH));
    let mut d_global = Array2::<f64>::zeros((n, CONCAT_WIDTH - LOCAL_WIDTH));
    let mut d_attn_pre = Array2::<f64>::zeros((n, CONCAT_WIDTH));
    let (da_local, da_global) = d_attended.view().split_at(Axis(0), LOCAL_WIDTH);
    for i in 0..n {
        let inv = 1.0 / cache.row_sums[i];
        let w = cache.weights.row(i);
        let (w_local, w_global) = w.split_at(Axis(0), LOCAL_WIDTH);
        // q_i = Σ_j dA_j · f_ij · w_ij / s_i
        let q = (Zip::from(da_local).and(h2.row(i)).and(w_local).fold(0.0, |acc, &d, &f, &w| acc + d * f * w)
            + Zip::from(da_global).and(h5.row(i)).and(w_global).fold(0.0, |acc, &d, &f, &w| acc + d * f * w))
            * inv;

        Zip::from(d_local.row_mut(i)).and(da_local).and(w_local).for_each(|o, &d, &w| *o = d * w * inv);
        Zip::from(d_global.row_mut(i)).and(da_global).and(w_global).for_each(|o, &d, &w| *o = d * w * inv);

        let mut dz = d_attn_pre.row_mut(i);
        let (dz_local, dz_global) = dz.view_mut().split_at(Axis(0), LOCAL_WIDTH);
        let (s_local, s_global) = cache.weight_slope.row(i).split_at(Axis(0), LOCAL_WIDTH);
        Zip::from(dz_local).and(da_local).and(h2.row(i)).and(s_local).for_each(|o, &d, &f, &sl| *o = (d * f - q) * inv * sl);
        Zip::from(dz_global)
            .and(da_global)
            .and(h5.row(i))
            .and(s_global)
            .for_each(|o, &d, &f, &sl| *o = (d * f - q) * inv * sl);
    }
    for (j, &i) in cache.argmax.iter().enumerate() {
        if j < LOCAL_WIDTH {
            d_local[[i, j]] += d_pooled[j];
        } else {
            d_global[[i, j - LOCAL_WIDTH]] += d_pooled[j];
        }
    }

    grads.attn.weight = standard(h2.t().dot(&d_attn_pre));
    grads.attn.bias = d_attn_pre.sum_axis(Axis(0));
    d_local += &d_attn_pre.dot(&params.attn.weight.t());

    // Feature stack, top down. The local branch joins at layer 2's output.
    let mut d_out = d_global;
    for k in (0..5).rev() {
        if k == 1 {
            d_out += &d_local;
        }
        let act = &cache.acts[k];
        Zip::from(&mut d_out).and(act).for_each(|d, &a| {
            if a <= 0.0 {
                *d = 0.0;
            }
        });
        let input = match k {
            0 => cache.input.view(),
            1 => h1.view(),
            2 => h2.view(),
            3 => h3.view(),
            _ => h4.view(),
        };
        grads.feat[k].weight = standard(input.t().dot(&d_out));
        grads.feat[k].bias = d_out.sum_axis(Axis(0));
        d_out = d_out.dot(&params.feat[k].weight.t());
    }

    Ok(EncoderGradients { params: grads, input: standard(d_out) })
}

// Products with transposed views can come back column-major; parameter
// tensors are always exposed as row-major slices.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}
