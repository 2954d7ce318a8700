use super::loss::{argmax, log_softmax, loss_and_logit_grad};
use super::{Batch, LayerKind, LossKind, ModelParameters, Network, NORM_EPS};
use crate::{Error, Result};

struct NormCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

struct LayerCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    output: Vec<f64>,
    norm: Option<NormCache>,
}

fn check_batch(net: &Network, params: &ModelParameters, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::precondition("empty batch"));
    }
    if batch.input_dim() != net.input_dim() {
        return Err(Error::config(format!(
            "batch has {} features, network expects {}",
            batch.input_dim(),
            net.input_dim()
        )));
    }
    net.check_params(params)
}

fn run(net: &Network, params: &ModelParameters, batch: &Batch) -> Result<Vec<LayerCache>> {
    check_batch(net, params, batch)?;
    let rows = batch.len();
    let mut caches: Vec<LayerCache> = Vec::with_capacity(net.len());
    let mut x = batch.inputs().to_vec();

    for (l, spec) in net.layers().iter().enumerate() {
        let (din, dout) = (spec.input_dim, spec.output_dim);
        let theta = &params.layers[l];
        let mut norm = None;
        let pre = match spec.kind {
            LayerKind::Dense => {
                let (w, b) = theta.split_at(dout * din);
                let mut z = Vec::with_capacity(rows * dout);
                for xr in x.chunks_exact(din) {
                    for o in 0..dout {
                        let wr = &w[o * din..(o + 1) * din];
                        z.push(b[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>());
                    }
                }
                z
            }
            LayerKind::Activation => x.clone(),
            LayerKind::Normalization => {
                let (scale, offset) = theta.split_at(dout);
                let batch_stats = rows > 1;
                let (mean, var) = if batch_stats {
                    let mut mean = vec![0.0; dout];
                    for xr in x.chunks_exact(dout) {
                        for (m, v) in mean.iter_mut().zip(xr) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= rows as f64);
                    let mut var = vec![0.0; dout];
                    for xr in x.chunks_exact(dout) {
                        for c in 0..dout {
                            let d = xr[c] - mean[c];
                            var[c] += d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= rows as f64);
                    (mean, var)
                } else {
                    let buf = &params.buffers[l];
                    (buf[..dout].to_vec(), buf[dout..].to_vec())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                let mut x_hat = Vec::with_capacity(x.len());
                let mut z = Vec::with_capacity(x.len());
                for xr in x.chunks_exact(dout) {
                    for c in 0..dout {
                        let h = (xr[c] - mean[c]) * inv_std[c];
                        x_hat.push(h);
                        z.push(scale[c] * h + offset[c]);
                    }
                }
                norm = Some(NormCache {
                    x_hat,
                    inv_std,
                    batch_stats,
                });
                z
            }
        };
        let output: Vec<f64> = pre.iter().map(|&z| spec.activation.apply(z)).collect();
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: l });
        }
        let input = std::mem::replace(&mut x, output.clone());
        caches.push(LayerCache {
            input,
            pre,
            output,
            norm,
        });
    }
    Ok(caches)
}

/// Logit matrix, `batch.len() x num_classes`, row-major.
pub fn forward_logits(net: &Network, params: &ModelParameters, batch: &Batch) -> Result<Vec<f64>> {
    let mut caches = run(net, params, batch)?;
    Ok(caches.pop().expect("nonempty network").output)
}

/// Softmax class probabilities, one row per sample.
pub fn forward(net: &Network, params: &ModelParameters, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let k = net.num_classes();
    let logp = log_softmax(&forward_logits(net, params, batch)?, k);
    Ok(logp
        .chunks_exact(k)
        .map(|row| row.iter().map(|v| v.exp()).collect())
        .collect())
}

/// Argmax class per sample.
pub fn predict(net: &Network, params: &ModelParameters, batch: &Batch) -> Result<Vec<usize>> {
    let k = net.num_classes();
    let logits = forward_logits(net, params, batch)?;
    Ok(logits.chunks_exact(k).map(argmax).collect())
}

/// Mean batch loss and its gradient, shaped like `params.layers`.
pub fn loss_and_gradients(
    net: &Network,
    params: &ModelParameters,
    batch: &Batch,
    loss: LossKind,
) -> Result<(f64, Vec<Vec<f64>>)> {
    loss.validate()?;
    let caches = run(net, params, batch)?;
    let rows = batch.len();
    let k = net.num_classes();
    let logits = &caches.last().expect("nonempty network").output;
    let (value, mut upstream) = loss_and_logit_grad(loss, logits, k, batch.labels())?;
    if !value.is_finite() {
        return Err(Error::NonFinite { layer: net.len() - 1 });
    }

    let mut grads: Vec<Vec<f64>> = net.layers().iter().map(|s| vec![0.0; s.param_count()]).collect();
    for (l, spec) in net.layers().iter().enumerate().rev() {
        let cache = &caches[l];
        let (din, dout) = (spec.input_dim, spec.output_dim);
        let dz: Vec<f64> = upstream
            .iter()
            .zip(cache.pre.iter().zip(&cache.output))
            .map(|(g, (&z, &y))| g * spec.activation.derivative(z, y))
            .collect();
        let theta = &params.layers[l];
        let grad = &mut grads[l];

        upstream = match spec.kind {
            LayerKind::Dense => {
                let (gw, gb) = grad.split_at_mut(dout * din);
                let w = &theta[..dout * din];
                let mut dx = vec![0.0; rows * din];
                for r in 0..rows {
                    let xr = &cache.input[r * din..(r + 1) * din];
                    let dzr = &dz[r * dout..(r + 1) * dout];
                    let dxr = &mut dx[r * din..(r + 1) * din];
                    for o in 0..dout {
                        let d = dzr[o];
                        gb[o] += d;
                        let gwr = &mut gw[o * din..(o + 1) * din];
                        let wr = &w[o * din..(o + 1) * din];
                        for i in 0..din {
                            gwr[i] += d * xr[i];
                            dxr[i] += d * wr[i];
                        }
                    }
                }
                dx
            }
            LayerKind::Activation => dz,
            LayerKind::Normalization => {
                let nc = cache.norm.as_ref().expect("normalization cache");
                let scale = &theta[..dout];
                let (gs, go) = grad.split_at_mut(dout);
                let mut dx_hat = vec![0.0; rows * dout];
                for r in 0..rows {
                    for c in 0..dout {
                        let idx = r * dout + c;
                        gs[c] += dz[idx] * nc.x_hat[idx];
                        go[c] += dz[idx];
                        dx_hat[idx] = dz[idx] * scale[c];
                    }
                }
                if nc.batch_stats {
                    let n = rows as f64;
                    let mut sum = vec![0.0; dout];
                    let mut sum_xh = vec![0.0; dout];
                    for r in 0..rows {
                        for c in 0..dout {
                            let idx = r * dout + c;
                            sum[c] += dx_hat[idx];
                            sum_xh[c] += dx_hat[idx] * nc.x_hat[idx];
                        }
                    }
                    let mut dx = vec![0.0; rows * dout];
                    for r in 0..rows {
                        for c in 0..dout {
                            let idx = r * dout + c;
                            dx[idx] = nc.inv_std[c] / n * (n * dx_hat[idx] - sum[c] - nc.x_hat[idx] * sum_xh[c]);
                        }
                    }
                    dx
                } else {
                    dx_hat
                        .iter()
                        .enumerate()
                        .map(|(idx, d)| d * nc.inv_std[idx % dout])
                        .collect()
                }
            }
        };
    }
    Ok((value, grads))
}
