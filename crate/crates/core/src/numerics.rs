//! Dense vectors and matrices, a rectifier MLP with explicit forward traces,
//! its analytic backward pass, seeded initialization, and a central-difference
//! gradient oracle.
//!
//! Layer `l` computes `z_l = W_l a_l + b_l`; hidden layers apply
//! `a_{l+1} = max(0, z_l)` and the last layer returns `z_{L-1}` as logits.
//! The deep feature vector `F(x)` is the input to the last layer, i.e. the
//! output of the penultimate layer (or `x` itself for a single-layer
//! network). That layer is rectified by default; see [`FeatureActivation`].

use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Non-empty sequence of finite `f64`s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("vector must have at least one entry".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "vector entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len.max(1)])
    }

    /// Wraps values produced by arithmetic on already-validated operands.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Euclidean norm of a slice.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Row-major dense matrix of finite `f64`s.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix contains non-finite entries".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Appends one row at the bottom.
    pub(crate) fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols);
        self.values.extend_from_slice(row);
        self.rows += 1;
    }

    /// `W^T v`, used by the backward pass.
    fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * vr;
            }
        }
        out
    }
}

/// `W·x + b`.
pub fn affine_forward(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vector> {
    if w.cols != x.len() {
        return Err(Error::shape(
            "affine_forward",
            format!("W {}x{}", w.rows, w.cols),
            format!("x len {}", x.len()),
        ));
    }
    if w.rows != b.len() {
        return Err(Error::shape(
            "affine_forward",
            format!("W {}x{}", w.rows, w.cols),
            format!("b len {}", b.len()),
        ));
    }
    let out = (0..w.rows)
        .map(|r| {
            w.row(r)
                .iter()
                .zip(x)
                .fold(b[r], |acc, (wi, xi)| acc + wi * xi)
        })
        .collect();
    Ok(Vector::from_raw(out))
}

/// Nonlinearity applied to the feature layer (the penultimate layer's
/// output). Every other hidden layer is always rectified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureActivation {
    #[default]
    Rectifier,
    /// Linear feature layer: `F(x)` may point in any direction.
    Identity,
}

/// Weights and biases of a rectifier MLP.
///
/// `layer_dims = [input, hidden.., feature_dim, num_known]`, so there are
/// `layer_dims.len() - 1` affine layers and the last one maps the feature
/// vector to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vector>,
    feature_activation: FeatureActivation,
}

impl MlpParams {
    pub fn new(layer_dims: Vec<usize>, weights: Vec<Matrix>, biases: Vec<Vector>) -> Result<Self> {
        validate_dims(&layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::shape(
                "MlpParams::new",
                format!("{layers} layers"),
                format!("{} weights / {} biases", weights.len(), biases.len()),
            ));
        }
        for l in 0..layers {
            let want = (layer_dims[l + 1], layer_dims[l]);
            if weights[l].shape() != want {
                return Err(Error::shape(
                    "MlpParams::new",
                    format!("layer {l} expects {}x{}", want.0, want.1),
                    format!("{}x{}", weights[l].rows, weights[l].cols),
                ));
            }
            if biases[l].len() != want.0 {
                return Err(Error::shape(
                    "MlpParams::new",
                    format!("layer {l} bias len {}", want.0),
                    format!("{}", biases[l].len()),
                ));
            }
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            feature_activation: FeatureActivation::Rectifier,
        })
    }

    pub fn with_feature_activation(mut self, act: FeatureActivation) -> Self {
        self.feature_activation = act;
        self
    }

    pub fn feature_activation(&self) -> FeatureActivation {
        self.feature_activation
    }

    /// True when hidden layer `l` applies the rectifier.
    fn rectifies(&self, l: usize) -> bool {
        l + 1 < self.num_layers()
            && !(l + 2 == self.num_layers()
                && self.feature_activation == FeatureActivation::Identity)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    pub fn num_classes(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1]
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vector] {
        &self.biases
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.values.len() + b.len())
            .sum()
    }

    /// Flattens parameters layer by layer: weights (row-major), then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(&w.values);
            out.extend_from_slice(b);
        }
        out
    }

    /// Inverse of [`MlpParams::to_flat`] for the same layer dims.
    pub fn from_flat(layer_dims: &[usize], flat: &[f64]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut at = 0;
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let need = fan_out * fan_in + fan_out;
            if flat.len() < at + need {
                return Err(Error::shape(
                    "MlpParams::from_flat",
                    format!("dims {layer_dims:?}"),
                    format!("{} values", flat.len()),
                ));
            }
            weights.push(Matrix::new(
                fan_out,
                fan_in,
                flat[at..at + fan_out * fan_in].to_vec(),
            )?);
            at += fan_out * fan_in;
            biases.push(Vector::new(flat[at..at + fan_out].to_vec())?);
            at += fan_out;
        }
        if at != flat.len() {
            return Err(Error::shape(
                "MlpParams::from_flat",
                format!("dims {layer_dims:?} need {at}"),
                format!("{} values", flat.len()),
            ));
        }
        Self::new(layer_dims.to_vec(), weights, biases)
    }

    /// [`MlpParams::from_flat`] with the dims and feature activation of
    /// `self`.
    pub fn from_flat_like(&self, flat: &[f64]) -> Result<Self> {
        Ok(Self::from_flat(&self.layer_dims, flat)?
            .with_feature_activation(self.feature_activation))
    }

    /// `p ← p − lr·g`.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) {
        for (w, gw) in self.weights.iter_mut().zip(&grads.weights) {
            for (p, g) in w.values.iter_mut().zip(&gw.values) {
                *p -= lr * g;
            }
        }
        for (b, gb) in self.biases.iter_mut().zip(&grads.biases) {
            for (p, g) in b.0.iter_mut().zip(&gb.0) {
                *p -= lr * g;
            }
        }
    }

    /// Adds one output class to the final layer. Existing rows are kept
    /// verbatim; the new row is drawn like [`init_params`] does and its bias
    /// is zero.
    pub fn with_extra_class(&self, seed: u64) -> Self {
        let mut out = self.clone();
        let last = out.weights.len() - 1;
        let fan_in = out.weights[last].cols;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let row: Vec<f64> = (0..fan_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        out.weights[last].push_row(&row);
        out.biases[last].0.push(0.0);
        let n = out.layer_dims.len();
        out.layer_dims[n - 1] += 1;
        out
    }
}

/// Gradients with the same shapes as the [`MlpParams`] they differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl ParamGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows, w.cols))
                .collect(),
            biases: params
                .biases
                .iter()
                .map(|b| Vector::zeros(b.len()))
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, alpha: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += alpha * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.0.iter_mut().zip(&b.0) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for w in &mut self.weights {
            w.values.iter_mut().for_each(|x| *x *= alpha);
        }
        for b in &mut self.biases {
            b.0.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    /// Same ordering as [`MlpParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(&w.values);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|&g| g == 0.0)
    }
}

/// Per-sample activations from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vector,
    /// `z_l` for every layer.
    pub pre_activations: Vec<Vector>,
    /// `max(0, z_l)` for every hidden layer.
    pub post_activations: Vec<Vector>,
    /// `F(x)`: input to the final layer.
    pub features: Vector,
    /// Final affine output, no softmax.
    pub logits: Vector,
}

impl ForwardTrace {
    /// Input to layer `l`.
    fn layer_input(&self, l: usize) -> &[f64] {
        if l == 0 {
            &self.input
        } else {
            &self.post_activations[l - 1]
        }
    }
}

fn relu(v: &Vector) -> Vector {
    Vector::from_raw(v.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect())
}

pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != params.input_dim() {
        return Err(Error::shape(
            "mlp_forward",
            format!("input dim {}", params.input_dim()),
            format!("x len {}", x.len()),
        ));
    }
    let input = Vector::new(x.to_vec())?;
    let layers = params.num_layers();
    let mut pre = Vec::with_capacity(layers);
    let mut post = Vec::with_capacity(layers - 1);
    let mut a = input.clone();
    for l in 0..layers {
        let z = affine_forward(&params.weights[l], &params.biases[l], &a)?;
        if l + 1 < layers {
            a = if params.rectifies(l) {
                relu(&z)
            } else {
                z.clone()
            };
            post.push(a.clone());
        }
        pre.push(z);
    }
    let features = post.last().cloned().unwrap_or_else(|| input.clone());
    let logits = pre[layers - 1].clone();
    Ok(ForwardTrace {
        input,
        pre_activations: pre,
        post_activations: post,
        features,
        logits,
    })
}

/// Reverse-mode gradients of a loss whose partials with respect to the
/// logits and the feature vector are `dlogits` and `dfeatures`.
///
/// `dfeatures` is added to the gradient flowing into the final layer's
/// input before continuing backward. The rectifier's derivative at 0 is 0.
pub fn mlp_backward(
    params: &MlpParams,
    trace: &ForwardTrace,
    dlogits: &[f64],
    dfeatures: &[f64],
) -> Result<ParamGrads> {
    if dlogits.len() != params.num_classes() {
        return Err(Error::shape(
            "mlp_backward",
            format!("num classes {}", params.num_classes()),
            format!("dlogits len {}", dlogits.len()),
        ));
    }
    if dfeatures.len() != params.feature_dim() {
        return Err(Error::shape(
            "mlp_backward",
            format!("feature dim {}", params.feature_dim()),
            format!("dfeatures len {}", dfeatures.len()),
        ));
    }
    let layers = params.num_layers();
    if trace.pre_activations.len() != layers || trace.input.len() != params.input_dim() {
        return Err(Error::shape(
            "mlp_backward",
            format!("{layers} layers"),
            format!("trace with {} layers", trace.pre_activations.len()),
        ));
    }

    let mut grads = ParamGrads::zeros_like(params);
    let mut delta = dlogits.to_vec();
    for l in (0..layers).rev() {
        if params.rectifies(l) {
            // delta currently holds dL/da_{l+1}; pass it through the rectifier.
            for (d, &z) in delta.iter_mut().zip(trace.pre_activations[l].iter()) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let a_in = trace.layer_input(l);
        let gw = &mut grads.weights[l];
        for (r, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                for (g, &a) in gw.values[r * gw.cols..(r + 1) * gw.cols]
                    .iter_mut()
                    .zip(a_in)
                {
                    *g = d * a;
                }
            }
        }
        grads.biases[l].0.copy_from_slice(&delta);
        if l == 0 {
            break;
        }
        delta = params.weights[l].transpose_mul(&delta);
        if l == layers - 1 {
            for (d, f) in delta.iter_mut().zip(dfeatures) {
                *d += f;
            }
        }
    }
    Ok(grads)
}

/// Central-difference gradient estimate of `f` at `x`.
pub fn finite_difference<F>(f: F, x: &[f64], eps: f64) -> Result<Vector>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!(
            "step size must be positive, got {eps}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Vector::new(grad)
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "need at least input and output dims, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer dims must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

/// [`init_params`] with a chosen feature-layer activation.
pub fn init_params_with(
    layer_dims: &[usize],
    seed: u64,
    feature_activation: FeatureActivation,
) -> Result<MlpParams> {
    Ok(init_params(layer_dims, seed)?.with_feature_activation(feature_activation))
}

/// Seeded initialization: weights `~ N(0, 1) / sqrt(fan_in)` drawn from
/// ChaCha8 in layer order, biases zero.
pub fn init_params(layer_dims: &[usize], seed: u64) -> Result<MlpParams> {
    validate_dims(layer_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in layer_dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        weights.push(Matrix::new(fan_out, fan_in, values)?);
        biases.push(Vector::zeros(fan_out));
    }
    MlpParams::new(layer_dims.to_vec(), weights, biases)
}
