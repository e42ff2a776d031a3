//! Small fully connected classifiers trained with minibatch SGD.
//!
//! Every party's local model is a [`ModelParams`]: a stack of dense layers with
//! a tanh or ReLU nonlinearity between them and a softmax head. Training works
//! on hard labels, soft labels, or both interleaved within each epoch.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, RealVector};
use crate::rng::rng_from_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("input has {found} features, model expects {expected}")]
    InputDimension { expected: usize, found: usize },
    #[error("parameter vector has length {found}, architecture needs {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("soft labels have {found} columns, model has {expected} classes")]
    SoftLabelWidth { expected: usize, found: usize },
    #[error("{features} feature rows but {labels} labels")]
    RowCount { features: usize, labels: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation. ReLU'(0) = 0.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden_sizes: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_sizes,
            num_classes,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// A softmax-regression model with no hidden layer.
    pub fn linear(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(input_dim, Vec::new(), num_classes, Activation::Tanh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(ModelError::InvalidArchitecture(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 {
            return Err(ModelError::InvalidArchitecture("input_dim must be positive".into()));
        }
        if let Some(pos) = self.hidden_sizes.iter().position(|&h| h == 0) {
            return Err(ModelError::InvalidArchitecture(format!(
                "hidden layer {pos} has zero width"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_sizes {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// One dense layer: `weights` is `fan_out × fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer {
                weights: Matrix::zeros(fan_out, fan_in),
                bias: vec![0.0; fan_out],
            })
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Layer-major; within a layer the weights row-major, then the bias.
    pub fn flatten(&self) -> RealVector {
        let mut out = Vec::with_capacity(self.arch.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn unflatten(arch: &Architecture, v: &[f64]) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_count();
        if v.len() != expected {
            return Err(ModelError::ParamLength {
                expected,
                found: v.len(),
            });
        }
        let mut offset = 0;
        let mut layers = Vec::new();
        for (fan_in, fan_out) in arch.layer_dims() {
            let w = v[offset..offset + fan_in * fan_out].to_vec();
            offset += fan_in * fan_out;
            let bias = v[offset..offset + fan_out].to_vec();
            offset += fan_out;
            layers.push(Layer {
                weights: Matrix::from_vec(fan_out, fan_in, w).expect("sized above"),
                bias,
            });
        }
        Ok(Self {
            arch: arch.clone(),
            layers,
        })
    }

    /// `self += scale * other`, for parameter-shaped values of the same
    /// architecture.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

/// Glorot-uniform weights and zero biases, fully determined by `seed`.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut params = ModelParams::zeros(arch);
    for layer in &mut params.layers {
        let (fan_out, fan_in) = (layer.weights.rows(), layer.weights.cols());
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for r in 0..fan_out {
            for c in 0..fan_in {
                layer.weights.set(r, c, rng.gen_range(-limit..=limit));
            }
        }
    }
    Ok(params)
}

/// Labelled examples for local training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(ModelError::RowCount {
                features: features.rows(),
                labels: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l >= classes) {
            Some(row) => Err(ModelError::LabelOutOfRange {
                row,
                label: self.labels[row],
                classes,
            }),
            None => Ok(()),
        }
    }

    /// Concatenates datasets row-wise.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            rows.extend(p.features.iter_rows());
            labels.extend_from_slice(&p.labels);
        }
        let features = if rows.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_rows(&rows).expect("datasets share a feature width")
        };
        Dataset { features, labels }
    }
}

/// Features paired with arbitrary real-valued per-class targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftDataset {
    pub features: Matrix,
    pub soft_labels: Matrix,
}

impl SoftDataset {
    pub fn new(features: Matrix, soft_labels: Matrix) -> Result<Self> {
        if features.rows() != soft_labels.rows() {
            return Err(ModelError::RowCount {
                features: features.rows(),
                labels: soft_labels.rows(),
            });
        }
        Ok(Self {
            features,
            soft_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A batch to evaluate the loss on.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Hard(&'a Dataset),
    Soft(&'a SoftDataset),
}

#[derive(Clone, Copy)]
enum Targets<'a> {
    Hard(&'a [usize]),
    Soft(&'a Matrix),
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - lse).collect()
}

/// Per-layer pre-activations and activations for one input.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn forward_trace(params: &ModelParams, x: &[f64]) -> Trace {
    let n = params.layers.len();
    let mut pre = Vec::with_capacity(n);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    post.push(x.to_vec());
    for (l, layer) in params.layers.iter().enumerate() {
        let input = post.last().expect("input pushed");
        let mut z = layer.weights.mul_vec(input);
        z.iter_mut().zip(&layer.bias).for_each(|(zi, b)| *zi += b);
        let a = if l + 1 < n {
            z.iter().map(|&v| params.arch.activation.apply(v)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(a);
    }
    Trace { pre, post }
}

/// Output logits for one input.
pub fn forward_logits(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    check_input(params, x)?;
    let mut trace = forward_trace(params, x);
    Ok(trace.post.pop().expect("at least one layer"))
}

/// Class probabilities for one input.
pub fn forward_proba(params: &ModelParams, x: &[f64]) -> Result<RealVector> {
    let logits = forward_logits(params, x)?;
    let mut p = vec![0.0; logits.len()];
    softmax_into(&logits, &mut p);
    Ok(p)
}

/// Class probabilities for every row of `features`.
pub fn predict_matrix(params: &ModelParams, features: &Matrix) -> Result<Matrix> {
    let c = params.arch.num_classes;
    let mut out = Matrix::zeros(features.rows(), c);
    for (r, x) in features.iter_rows().enumerate() {
        let p = forward_proba(params, x)?;
        out.row_mut(r).copy_from_slice(&p);
    }
    Ok(out)
}

fn check_input(params: &ModelParams, x: &[f64]) -> Result<()> {
    if x.len() != params.arch.input_dim {
        return Err(ModelError::InputDimension {
            expected: params.arch.input_dim,
            found: x.len(),
        });
    }
    Ok(())
}

fn check_features(params: &ModelParams, features: &Matrix) -> Result<()> {
    if features.rows() > 0 && features.cols() != params.arch.input_dim {
        return Err(ModelError::InputDimension {
            expected: params.arch.input_dim,
            found: features.cols(),
        });
    }
    Ok(())
}

/// Mean loss and its gradient over `rows`, accumulated into `grad`
/// (which must start zeroed).
fn loss_grad_rows(
    params: &ModelParams,
    features: &Matrix,
    targets: Targets<'_>,
    rows: &[usize],
    temperature: f64,
    grad: &mut ModelParams,
) -> f64 {
    let n_layers = params.layers.len();
    let c = params.arch.num_classes;
    let inv_n = 1.0 / rows.len() as f64;
    let mut total = 0.0;
    let mut probs = vec![0.0; c];
    for &r in rows {
        let trace = forward_trace(params, features.row(r));
        let logits = &trace.post[n_layers];
        let mut delta: Vec<f64> = match targets {
            Targets::Hard(labels) => {
                let y = labels[r];
                let logp = log_softmax(logits);
                total -= logp[y];
                softmax_into(logits, &mut probs);
                let mut d = probs.clone();
                d[y] -= 1.0;
                d
            }
            Targets::Soft(soft) => {
                let q = soft.row(r);
                let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                let logp = log_softmax(&scaled);
                total -= q.iter().zip(&logp).map(|(qc, lp)| qc * lp).sum::<f64>();
                softmax_into(&scaled, &mut probs);
                let mass: f64 = q.iter().sum();
                probs
                    .iter()
                    .zip(q)
                    .map(|(p, qc)| (p * mass - qc) / temperature)
                    .collect()
            }
        };
        delta.iter_mut().for_each(|d| *d *= inv_n);

        for l in (0..n_layers).rev() {
            let input = &trace.post[l];
            let layer = &params.layers[l];
            let g = &mut grad.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = g.weights.row_mut(o);
                for (w, &a) in row.iter_mut().zip(input) {
                    *w += d * a;
                }
            }
            if l == 0 {
                break;
            }
            let mut back = vec![0.0; layer.weights.cols()];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (b, &w) in back.iter_mut().zip(layer.weights.row(o)) {
                    *b += w * d;
                }
            }
            let act = params.arch.activation;
            for ((b, &z), &a) in back.iter_mut().zip(&trace.pre[l - 1]).zip(&trace.post[l]) {
                *b *= act.derivative(z, a);
            }
            delta = back;
        }
    }
    total * inv_n
}

/// Mean cross-entropy over the batch and its exact gradient.
///
/// Hard labels use `-log p_y`; soft labels use `-Σ q_c log p_c` with `q` taken
/// as given (no renormalization) at temperature 1.
pub fn loss_and_grad(params: &ModelParams, batch: Batch<'_>) -> Result<(f64, ModelParams)> {
    loss_and_grad_with_temperature(params, batch, 1.0)
}

pub fn loss_and_grad_with_temperature(
    params: &ModelParams,
    batch: Batch<'_>,
    temperature: f64,
) -> Result<(f64, ModelParams)> {
    let (features, targets, n) = match batch {
        Batch::Hard(d) => {
            d.check_labels(params.arch.num_classes)?;
            (&d.features, Targets::Hard(&d.labels), d.len())
        }
        Batch::Soft(s) => {
            if !s.is_empty() && s.soft_labels.cols() != params.arch.num_classes {
                return Err(ModelError::SoftLabelWidth {
                    expected: params.arch.num_classes,
                    found: s.soft_labels.cols(),
                });
            }
            (&s.features, Targets::Soft(&s.soft_labels), s.len())
        }
    };
    if n == 0 {
        return Err(ModelError::EmptyBatch);
    }
    check_features(params, features)?;
    let rows: Vec<usize> = (0..n).collect();
    let mut grad = ModelParams::zeros(&params.arch);
    let loss = loss_grad_rows(params, features, targets, &rows, temperature, &mut grad);
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr_private: f64,
    pub lr_public: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr_private: 0.1,
            lr_public: 0.1,
            batch_size: 16,
            epochs: 1,
            temperature: 1.0,
        }
    }
}

impl SgdConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr_private >= 0.0) || !(self.lr_public >= 0.0) {
            return Err(ModelError::InvalidConfig("learning rates must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(ModelError::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// The visit order the trainer uses for one source: a seeded shuffle of
/// `0..n`, one shuffle per epoch, drawn from a single stream.
pub fn epoch_orders(n: usize, epochs: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    (0..epochs)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx
        })
        .collect()
}

/// Minibatch SGD for `cfg.epochs` passes.
///
/// With `soft` present every epoch visits the hard-label batches first, then
/// the soft-label batches, each source shuffled independently from its own
/// seeded stream. Deterministic in `seed`.
pub fn sgd_epochs(
    params: &ModelParams,
    data: &Dataset,
    soft: Option<&SoftDataset>,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<ModelParams> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    data.check_labels(params.arch.num_classes)?;
    check_features(params, &data.features)?;
    if let Some(s) = soft {
        check_features(params, &s.features)?;
        if !s.is_empty() && s.soft_labels.cols() != params.arch.num_classes {
            return Err(ModelError::SoftLabelWidth {
                expected: params.arch.num_classes,
                found: s.soft_labels.cols(),
            });
        }
    }

    let mut hard_rng = rng_from_seed(crate::rng::derive_seed(seed, &[0]));
    let mut soft_rng = rng_from_seed(crate::rng::derive_seed(seed, &[1]));
    let mut out = params.clone();
    let mut grad = ModelParams::zeros(&params.arch);
    for _ in 0..cfg.epochs {
        let order = epoch_orders(data.len(), 1, &mut hard_rng).pop().expect("one epoch");
        for chunk in order.chunks(cfg.batch_size) {
            sgd_step(&mut out, &mut grad, &data.features, Targets::Hard(&data.labels), chunk, cfg.lr_private, 1.0);
        }
        if let Some(s) = soft.filter(|s| !s.is_empty()) {
            let order = epoch_orders(s.len(), 1, &mut soft_rng).pop().expect("one epoch");
            for chunk in order.chunks(cfg.batch_size) {
                sgd_step(
                    &mut out,
                    &mut grad,
                    &s.features,
                    Targets::Soft(&s.soft_labels),
                    chunk,
                    cfg.lr_public,
                    cfg.temperature,
                );
            }
        }
    }
    Ok(out)
}

fn sgd_step(
    params: &mut ModelParams,
    grad: &mut ModelParams,
    features: &Matrix,
    targets: Targets<'_>,
    rows: &[usize],
    lr: f64,
    temperature: f64,
) {
    if lr == 0.0 {
        return;
    }
    for g in &mut grad.layers {
        g.weights.as_mut_slice().fill(0.0);
        g.bias.fill(0.0);
    }
    loss_grad_rows(params, features, targets, rows, temperature, grad);
    params.add_scaled(grad, -lr);
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(params: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    check_features(params, &test.features)?;
    let mut correct = 0usize;
    for (x, &y) in test.features.iter_rows().zip(&test.labels) {
        if argmax(&forward_logits(params, x)?) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean hard-label cross-entropy, used for loss-gap reporting.
pub fn mean_loss(params: &ModelParams, data: &Dataset) -> Result<f64> {
    Ok(loss_and_grad(params, Batch::Hard(data))?.0)
}
