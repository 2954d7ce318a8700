//! Minimal dense classification networks with hand-written gradients.
//!
//! A [`Network`] is an ordered list of [`LayerSpec`]s. Every layer computes
//! `y = activation(T(x))` where `T` is:
//!
//! - `Dense`: `W x + b`, weights row-major `(output_dim, input_dim)` followed by the bias.
//! - `Activation`: the identity (parameter-free).
//! - `Normalization`: per-feature batch normalization `scale * x_hat + offset`.
//!
//! The last layer's outputs are logits; [`forward`] returns their softmax.
//!
//! Learnable values live in [`ModelParameters`], one flat vector per layer (empty for
//! parameter-free layers). Normalization layers also carry non-learnable running
//! statistics in `buffers`; they are only read when a batch has a single row.

mod checkpoint;
mod layers;
mod loss;
mod train;

pub use checkpoint::{Checkpoint, PretrainMeta, CHECKPOINT_FORMAT_VERSION};
pub use layers::{forward, forward_logits, loss_and_gradients, predict};
pub use loss::LossKind;
pub use train::{accuracy, pretrain_erm, OptimizerConfig, OptimizerKind, PretrainConfig, Pretrained};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Variance floor used by normalization layers.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Activation,
    Normalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    #[default]
    Identity,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    pub(crate) fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense,
            input_dim,
            output_dim,
            activation,
        }
    }

    pub fn activation(dim: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Activation,
            input_dim: dim,
            output_dim: dim,
            activation,
        }
    }

    pub fn normalization(dim: usize) -> Self {
        Self {
            kind: LayerKind::Normalization,
            input_dim: dim,
            output_dim: dim,
            activation: Activation::Identity,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.output_dim * self.input_dim + self.output_dim,
            LayerKind::Activation => 0,
            LayerKind::Normalization => 2 * self.output_dim,
        }
    }

    fn buffer_len(&self) -> usize {
        match self.kind {
            LayerKind::Normalization => 2 * self.output_dim,
            _ => 0,
        }
    }
}

/// A validated stack of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerSpec>", into = "Vec<LayerSpec>")]
pub struct Network {
    layers: Vec<LayerSpec>,
}

impl TryFrom<Vec<LayerSpec>> for Network {
    type Error = Error;

    fn try_from(layers: Vec<LayerSpec>) -> Result<Self> {
        Network::new(layers)
    }
}

impl From<Network> for Vec<LayerSpec> {
    fn from(net: Network) -> Self {
        net.layers
    }
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_dim == 0 || layer.output_dim == 0 {
                return Err(Error::config(format!("layer {i}: dimensions must be positive")));
            }
            if layer.kind != LayerKind::Dense && layer.input_dim != layer.output_dim {
                return Err(Error::config(format!(
                    "layer {i}: {:?} layers must keep their width",
                    layer.kind
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim != pair[1].input_dim {
                return Err(Error::config(format!(
                    "layer {} outputs {} features but layer {} expects {}",
                    i,
                    pair[0].output_dim,
                    i + 1,
                    pair[1].input_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Dense stack `input -> hidden[0] -> ... -> num_classes` with `activation` on
    /// hidden layers and identity on the head.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize, activation: Activation) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::dense(width, h, activation));
            width = h;
        }
        layers.push(LayerSpec::dense(width, num_classes, Activation::Identity));
        Network::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Indices of layers that own learnable parameters.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.param_count() > 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Glorot-uniform dense weights, zero biases, unit scale / zero offset for
    /// normalization layers.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParameters {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut buffers = Vec::with_capacity(self.layers.len());
        let mut names = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let mut values = vec![0.0; spec.param_count()];
            let mut buffer = vec![0.0; spec.buffer_len()];
            match spec.kind {
                LayerKind::Dense => {
                    let limit = (6.0 / (spec.input_dim + spec.output_dim) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                    let weights = spec.output_dim * spec.input_dim;
                    for w in &mut values[..weights] {
                        *w = dist.sample(rng);
                    }
                    names.push(format!("dense{i}"));
                }
                LayerKind::Activation => names.push(format!("act{i}")),
                LayerKind::Normalization => {
                    values[..spec.output_dim].fill(1.0);
                    buffer[spec.output_dim..].fill(1.0);
                    names.push(format!("norm{i}"));
                }
            }
            layers.push(values);
            buffers.push(buffer);
        }
        ModelParameters {
            layer_names: names,
            layers,
            buffers,
        }
    }

    /// Checks that `params` has the shapes this network expects.
    pub fn check_params(&self, params: &ModelParameters) -> Result<()> {
        if params.layers.len() != self.layers.len() || params.buffers.len() != self.layers.len() {
            return Err(Error::config(format!(
                "parameters describe {} layers, network has {}",
                params.layers.len(),
                self.layers.len()
            )));
        }
        for (i, spec) in self.layers.iter().enumerate() {
            if params.layers[i].len() != spec.param_count() {
                return Err(Error::config(format!(
                    "layer {i}: expected {} parameters, found {}",
                    spec.param_count(),
                    params.layers[i].len()
                )));
            }
            if params.buffers[i].len() != spec.buffer_len() {
                return Err(Error::config(format!("layer {i}: bad statistics buffer length")));
            }
        }
        Ok(())
    }
}

/// Per-layer learnable vectors plus normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub layer_names: Vec<String>,
    pub layers: Vec<Vec<f64>>,
    /// Running `[mean; var]` for normalization layers, empty elsewhere.
    pub buffers: Vec<Vec<f64>>,
}

impl ModelParameters {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|v| v.is_finite())
    }
}

/// Row-major input matrix with optional labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    inputs: Vec<f64>,
    rows: usize,
    cols: usize,
    labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, cols: usize, labels: Option<Vec<usize>>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::precondition("batch input width must be positive"));
        }
        if !inputs.len().is_multiple_of(cols) {
            return Err(Error::precondition(format!(
                "{} values do not form rows of width {cols}",
                inputs.len()
            )));
        }
        let rows = inputs.len() / cols;
        if let Some(labels) = &labels {
            if labels.len() != rows {
                return Err(Error::precondition(format!("{} labels for {rows} rows", labels.len())));
            }
        }
        Ok(Self {
            inputs,
            rows,
            cols,
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<usize>>) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::precondition("ragged input rows"));
        }
        Self::new(rows.concat(), cols, labels)
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn input_dim(&self) -> usize {
        self.cols
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn inputs_mut(&mut self) -> &mut [f64] {
        &mut self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.cols..(i + 1) * self.cols]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Copy of this batch with the labels removed; the only form unsupervised losses accept.
    pub fn without_labels(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            rows: self.rows,
            cols: self.cols,
            labels: None,
        }
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Batch {
            inputs,
            rows: indices.len(),
            cols: self.cols,
            labels,
        }
    }

    /// Stacks batches of equal width.
    pub fn concat(batches: &[Batch]) -> Result<Batch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::precondition("nothing to concatenate"))?;
        let cols = first.cols;
        let labeled = first.labels.is_some();
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            if b.cols != cols || b.labels.is_some() != labeled {
                return Err(Error::precondition("batches differ in width or labeling"));
            }
            inputs.extend_from_slice(&b.inputs);
            if let Some(l) = &b.labels {
                labels.extend_from_slice(l);
            }
        }
        Batch::new(inputs, cols, labeled.then_some(labels))
    }
}
