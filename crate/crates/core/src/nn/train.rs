use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_logits, loss_and_gradients, predict, Batch, LayerKind, LossKind, ModelParameters, Network};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
}

/// Plain SGD: `theta <- theta - learning_rate * grad`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub kind: OptimizerKind,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            kind: OptimizerKind::Sgd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub params: ModelParameters,
    /// Percent accuracy on the validation batch.
    pub val_accuracy: f64,
}

/// Percent of rows whose argmax prediction matches the label.
pub fn accuracy(net: &Network, params: &ModelParameters, batch: &Batch) -> Result<f64> {
    let labels = batch
        .labels()
        .ok_or_else(|| Error::precondition("accuracy needs a labeled batch"))?;
    let preds = predict(net, params, &batch.without_labels())?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / batch.len() as f64)
}

/// Supervised cross-entropy training with minibatch SGD over shuffled epochs.
///
/// After the last step the running statistics of normalization layers are set to the
/// full-training-set statistics so single-row batches can still be normalized.
pub fn pretrain_erm(net: &Network, train: &Batch, val: &Batch, cfg: &PretrainConfig) -> Result<Pretrained> {
    cfg.optimizer.validate()?;
    if train.labels().is_none() {
        return Err(Error::precondition("pretraining needs labeled data"));
    }
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::precondition("pretraining needs data and a positive batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = net.init_params(&mut rng);
    let lr = cfg.optimizer.learning_rate;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = train.select(&order[cursor..end]);
        cursor = end;
        let (loss, grads) = match loss_and_gradients(net, &params, &batch, LossKind::CrossEntropy) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        for (theta, g) in params.layers.iter_mut().zip(&grads) {
            for (t, d) in theta.iter_mut().zip(g) {
                *t -= lr * d;
            }
        }
    }

    refresh_norm_statistics(net, &mut params, train)?;
    let val_accuracy = accuracy(net, &params, val)?;
    Ok(Pretrained { params, val_accuracy })
}

/// Recomputes running mean/variance of every normalization layer over `data`.
fn refresh_norm_statistics(net: &Network, params: &mut ModelParameters, data: &Batch) -> Result<()> {
    if !net.layers().iter().any(|l| l.kind == LayerKind::Normalization) {
        return Ok(());
    }
    let rows = data.len();
    for (l, spec) in net.layers().iter().enumerate() {
        if spec.kind != LayerKind::Normalization {
            continue;
        }
        // inputs to layer l are the outputs of the prefix network
        let input = if l == 0 {
            data.inputs().to_vec()
        } else {
            let prefix = Network::new(net.layers()[..l].to_vec())?;
            let prefix_params = ModelParameters {
                layer_names: params.layer_names[..l].to_vec(),
                layers: params.layers[..l].to_vec(),
                buffers: params.buffers[..l].to_vec(),
            };
            forward_logits(&prefix, &prefix_params, &data.without_labels())?
        };
        let d = spec.output_dim;
        let mut mean = vec![0.0; d];
        for row in input.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / rows as f64;
            }
        }
        let mut var = vec![0.0; d];
        for row in input.chunks_exact(d) {
            for c in 0..d {
                var[c] += (row[c] - mean[c]).powi(2) / rows as f64;
            }
        }
        params.buffers[l] = [mean, var].concat();
    }
    Ok(())
}
