//! The batch-normalized feedforward classifier and its exact gradients.
//!
//! Every hidden layer maps its input through
//!
//! ```text
//! H = X Wᵀ -> batch norm (scale, shift) -> ReLU -> 2x1 max-pool, stride 2
//! ```
//!
//! so a layer with `F` filters emits `F / 2` features. After the last layer the
//! pooled features go through `logits = F θᵀ` and a softmax cross-entropy loss,
//! averaged over the mini-batch.
//!
//! Matrices hold one sample per row. The linear layers have no bias: the batch
//! norm shift plays that role.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::manifold::random_point;
use crate::math;
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::{Error, Result, Rng};

/// Architecture and batch-norm constants.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct NetworkConfig {
    /// Number of hidden layers, 2 or 4.
    pub depth: usize,
    pub input_dim: usize,
    pub filters_per_layer: usize,
    pub n_classes: usize,
    pub bn_eps: f64,
    /// Weight of the current batch in the running-statistics average.
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::mnist(2)
    }
}

impl NetworkConfig {
    /// 64 filters per layer on 28x28 digits, 10 classes.
    pub fn mnist(depth: usize) -> Self {
        NetworkConfig { depth, input_dim: 784, filters_per_layer: 64, n_classes: 10, bn_eps: 1e-5, bn_momentum: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth != 2 && self.depth != 4 {
            return Err(Error::Precondition(format!("depth must be 2 or 4, got {}", self.depth)));
        }
        if self.filters_per_layer < 2 || self.filters_per_layer % 2 != 0 {
            return Err(Error::Precondition(format!(
                "filters_per_layer must be even and >= 2, got {}",
                self.filters_per_layer
            )));
        }
        if self.input_dim == 0 || self.n_classes < 2 {
            return Err(Error::Precondition("input_dim must be >= 1 and n_classes >= 2".into()));
        }
        if self.bn_eps <= 0.0 || !self.bn_eps.is_finite() {
            return Err(Error::Precondition(format!("bn_eps must be > 0, got {}", self.bn_eps)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Precondition(format!("bn_momentum must lie in (0, 1], got {}", self.bn_momentum)));
        }
        Ok(())
    }

    /// Width of a layer's output after pooling.
    pub fn pooled_dim(&self) -> usize {
        self.filters_per_layer / 2
    }

    /// Input width of hidden layer `layer` (0-based).
    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.pooled_dim()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerParams {
    /// One filter per row, `filters x in_dim`.
    pub weight: Matrix,
    pub bn_scale: Vec<f64>,
    pub bn_shift: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    /// Class vectors, one per row, `n_classes x pooled_dim`.
    pub theta: Matrix,
}

impl NetworkParams {
    /// Standard-normal weights and class vectors with every row normalized;
    /// batch norm starts as the identity transform.
    pub fn init(cfg: &NetworkConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.filters_per_layer;
        let layers = (0..cfg.depth)
            .map(|l| LayerParams {
                weight: random_point(f, cfg.layer_input_dim(l), rng).into_matrix(),
                bn_scale: vec![1.0; f],
                bn_shift: vec![0.0; f],
                bn_running_mean: vec![0.0; f],
                bn_running_var: vec![1.0; f],
            })
            .collect();
        let theta = random_point(cfg.n_classes, cfg.pooled_dim(), rng).into_matrix();
        Ok(NetworkParams { layers, theta })
    }

    /// Checks every shape against `cfg`.
    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        cfg.validate()?;
        if self.layers.len() != cfg.depth {
            return Err(Error::shape("NetworkParams", format!("{} layers for depth {}", self.layers.len(), cfg.depth)));
        }
        let f = cfg.filters_per_layer;
        for (l, layer) in self.layers.iter().enumerate() {
            let want = (f, cfg.layer_input_dim(l));
            if layer.weight.shape() != want {
                return Err(Error::shape(
                    "NetworkParams",
                    format!("layer {l} weight is {:?}, expected {want:?}", layer.weight.shape()),
                ));
            }
            let lens =
                [layer.bn_scale.len(), layer.bn_shift.len(), layer.bn_running_mean.len(), layer.bn_running_var.len()];
            if lens.iter().any(|&n| n != f) {
                return Err(Error::shape(
                    "NetworkParams",
                    format!("layer {l} batch-norm vectors have lengths {lens:?}, expected {f}"),
                ));
            }
        }
        if self.theta.shape() != (cfg.n_classes, cfg.pooled_dim()) {
            return Err(Error::shape("NetworkParams", format!("theta is {:?}", self.theta.shape())));
        }
        Ok(())
    }

    /// Mutable views of every trainable parameter block, in the order
    /// `(weight, bn_scale, bn_shift)` per layer, then `theta`.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 1);
        for layer in &mut self.layers {
            let LayerParams { weight, bn_scale, bn_shift, .. } = layer;
            out.push(weight.as_mut_slice());
            out.push(bn_scale.as_mut_slice());
            out.push(bn_shift.as_mut_slice());
        }
        out.push(self.theta.as_mut_slice());
        out
    }

    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 1);
        for layer in &self.layers {
            out.push(layer.weight.as_slice());
            out.push(layer.bn_scale.as_slice());
            out.push(layer.bn_shift.as_slice());
        }
        out.push(self.theta.as_slice());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is updated.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    /// Filter responses `h`, `batch x filters`.
    pub pre_bn: Matrix,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub normalized: Matrix,
    /// Row-major `batch x filters`, true where the batch-norm output was positive.
    pub relu_mask: Vec<bool>,
    /// Row-major `batch x filters/2`; the column (2k or 2k+1) that won pool slot k.
    pub pool_argmax: Vec<usize>,
    /// Pooled layer output, the next layer's input.
    pub output: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub mode: Mode,
    pub layers: Vec<LayerCache>,
    pub logits: Matrix,
    pub probs: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub loss: f64,
    pub cache: ForwardCache,
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bn_scale: Vec<f64>,
    pub bn_shift: Vec<f64>,
}

/// Partial derivatives of the mini-batch loss with respect to every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub theta: Matrix,
}

impl Gradients {
    /// Same block order as [`NetworkParams::trainable`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 1);
        for layer in &self.layers {
            out.push(layer.weight.as_slice());
            out.push(layer.bn_scale.as_slice());
            out.push(layer.bn_shift.as_slice());
        }
        out.push(self.theta.as_slice());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// `H = X Wᵀ`.
pub fn linear_forward(weight: &Matrix, x: &Matrix) -> Result<Matrix> {
    if x.cols() != weight.cols() {
        return Err(Error::shape(
            "linear_forward",
            format!("input width {} vs filter width {}", x.cols(), weight.cols()),
        ));
    }
    matmul_nt(x, weight)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormOutput {
    pub output: Matrix,
    pub normalized: Matrix,
    /// Statistics used for normalization (batch in train mode, running in eval mode).
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Running statistics after this call; unchanged in eval mode.
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Per-feature standardization followed by the learned scale and shift.
///
/// Train mode uses the batch mean and the population (divide-by-m) variance.
pub fn batchnorm_forward(
    h: &Matrix,
    layer: &LayerParams,
    eps: f64,
    mode: Mode,
    momentum: f64,
) -> Result<BatchNormOutput> {
    let (m, f) = h.shape();
    if layer.bn_scale.len() != f || layer.bn_shift.len() != f {
        return Err(Error::shape(
            "batchnorm_forward",
            format!("{f} features, {} scales, {} shifts", layer.bn_scale.len(), layer.bn_shift.len()),
        ));
    }
    let (mean, var, running_mean, running_var) = match mode {
        Mode::Train => {
            if m < 2 {
                return Err(Error::Protocol(format!("batch norm in train mode needs a batch of at least 2, got {m}")));
            }
            let mut mean = vec![0.0; f];
            for row in h.row_iter() {
                mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            mean.iter_mut().for_each(|a| *a /= m as f64);
            let mut var = vec![0.0; f];
            for row in h.row_iter() {
                for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - mu;
                    *a += d * d;
                }
            }
            var.iter_mut().for_each(|a| *a /= m as f64);
            let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
                old.iter().zip(new).map(|(o, n)| (1.0 - momentum) * o + momentum * n).collect()
            };
            let rm = blend(&layer.bn_running_mean, &mean);
            let rv = blend(&layer.bn_running_var, &var);
            (mean, var, rm, rv)
        }
        Mode::Eval => (
            layer.bn_running_mean.clone(),
            layer.bn_running_var.clone(),
            layer.bn_running_mean.clone(),
            layer.bn_running_var.clone(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
    let mut normalized = Matrix::zeros(m, f);
    let mut output = Matrix::zeros(m, f);
    for i in 0..m {
        let src = h.row(i);
        let nrow = normalized.row_mut(i);
        for j in 0..f {
            nrow[j] = (src[j] - mean[j]) * inv_std[j];
        }
        let orow = output.row_mut(i);
        for j in 0..f {
            orow[j] = layer.bn_scale[j] * nrow[j] + layer.bn_shift[j];
        }
    }
    Ok(BatchNormOutput { output, normalized, mean, var, running_mean, running_var })
}

/// Elementwise `max(0, x)` and the mask of strictly positive entries.
pub fn relu_forward(b: &Matrix) -> (Matrix, Vec<bool>) {
    let mask: Vec<bool> = b.as_slice().iter().map(|v| *v > 0.0).collect();
    let data = b.as_slice().iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect();
    (Matrix::from_raw(b.rows(), b.cols(), data), mask)
}

/// Max over adjacent column pairs `(2k, 2k+1)`; ties go to `2k`.
pub fn maxpool2_forward(r: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    let (m, f) = r.shape();
    if f % 2 != 0 {
        return Err(Error::shape("maxpool2_forward", format!("odd feature count {f}")));
    }
    let half = f / 2;
    let mut out = Matrix::zeros(m, half);
    let mut argmax = Vec::with_capacity(m * half);
    for i in 0..m {
        let src = r.row(i);
        let dst = out.row_mut(i);
        for k in 0..half {
            let (a, b) = (src[2 * k], src[2 * k + 1]);
            if b > a {
                dst[k] = b;
                argmax.push(2 * k + 1);
            } else {
                dst[k] = a;
                argmax.push(2 * k);
            }
        }
    }
    Ok((out, argmax))
}

/// Mean cross-entropy of the softmax of `logits` against `labels`, and the probabilities.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (m, k) = logits.shape();
    if labels.len() != m {
        return Err(Error::shape("softmax_xent", format!("{} labels for {m} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = Matrix::zeros(m, k);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let prow = probs.row_mut(i);
        let mut sum = 0.0;
        for (p, z) in prow.iter_mut().zip(row) {
            *p = math::exp(z - max);
            sum += *p;
        }
        prow.iter_mut().for_each(|p| *p /= sum);
        total += math::ln(sum) - (row[label] - max);
    }
    Ok((total / m as f64, probs))
}

fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

struct LayerPass {
    caches: Vec<LayerCache>,
    running: Vec<(Vec<f64>, Vec<f64>)>,
    logits: Matrix,
}

fn forward_layers(params: &NetworkParams, cfg: &NetworkConfig, x: &Matrix, mode: Mode) -> Result<LayerPass> {
    if params.layers.len() != cfg.depth {
        return Err(Error::shape("forward", format!("{} layers for depth {}", params.layers.len(), cfg.depth)));
    }
    if x.cols() != cfg.input_dim {
        return Err(Error::shape("forward", format!("input width {} vs configured {}", x.cols(), cfg.input_dim)));
    }
    let mut caches: Vec<LayerCache> = Vec::with_capacity(cfg.depth);
    let mut running = Vec::with_capacity(cfg.depth);
    for layer in &params.layers {
        let input = caches.last().map_or(x, |c| &c.output);
        let pre_bn = linear_forward(&layer.weight, input)?;
        let bn = batchnorm_forward(&pre_bn, layer, cfg.bn_eps, mode, cfg.bn_momentum)?;
        let (rect, relu_mask) = relu_forward(&bn.output);
        let (output, pool_argmax) = maxpool2_forward(&rect)?;
        running.push((bn.running_mean, bn.running_var));
        caches.push(LayerCache {
            pre_bn,
            batch_mean: bn.mean,
            batch_var: bn.var,
            normalized: bn.normalized,
            relu_mask,
            pool_argmax,
            output,
        });
    }
    let features = caches.last().map_or(x, |c| &c.output);
    if features.cols() != params.theta.cols() {
        return Err(Error::shape(
            "forward",
            format!("features {} wide, theta {} wide", features.cols(), params.theta.cols()),
        ));
    }
    let logits = matmul_nt(features, &params.theta)?;
    Ok(LayerPass { caches, running, logits })
}

/// Full forward pass. In train mode the running batch-norm statistics of `params`
/// are updated; in eval mode `params` is left as is.
pub fn forward(
    params: &mut NetworkParams,
    cfg: &NetworkConfig,
    x: &Matrix,
    labels: &[usize],
    mode: Mode,
) -> Result<ForwardOutput> {
    let pass = forward_layers(params, cfg, x, mode)?;
    let (loss, probs) = softmax_xent(&pass.logits, labels)?;
    if mode == Mode::Train {
        for (layer, (rm, rv)) in params.layers.iter_mut().zip(pass.running) {
            layer.bn_running_mean = rm;
            layer.bn_running_var = rv;
        }
    }
    let predictions = argmax_rows(&probs);
    Ok(ForwardOutput {
        loss,
        cache: ForwardCache { mode, layers: pass.caches, logits: pass.logits, probs },
        predictions,
    })
}

/// Train-mode loss without touching the running statistics.
pub fn train_loss(params: &NetworkParams, cfg: &NetworkConfig, x: &Matrix, labels: &[usize]) -> Result<f64> {
    let pass = forward_layers(params, cfg, x, Mode::Train)?;
    Ok(softmax_xent(&pass.logits, labels)?.0)
}

/// Eval-mode class predictions, computed in chunks of `chunk` rows of `images` picked by `rows`.
pub fn predict(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    images: &Matrix,
    rows: &[usize],
    chunk: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(rows.len());
    for idx in rows.chunks(chunk.max(1)) {
        let x = images.select_rows(idx);
        let pass = forward_layers(params, cfg, &x, Mode::Eval)?;
        out.extend(argmax_rows(&pass.logits));
    }
    Ok(out)
}

/// Eval-mode misclassification rate over the selected rows.
pub fn classification_error(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    images: &Matrix,
    labels: &[usize],
    rows: &[usize],
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Protocol("classification error over an empty set".into()));
    }
    let preds = predict(params, cfg, images, rows, 1000)?;
    let wrong = preds.iter().zip(rows).filter(|(p, &r)| **p != labels[r]).count();
    Ok(wrong as f64 / rows.len() as f64)
}

/// Exact gradients of the train-mode loss, differentiating through the batch statistics.
pub fn backward(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    cache: &ForwardCache,
    x: &Matrix,
    labels: &[usize],
) -> Result<Gradients> {
    if cache.mode != Mode::Train {
        return Err(Error::Protocol("backward needs a train-mode forward cache".into()));
    }
    let m = x.rows();
    if cache.layers.len() != params.layers.len()
        || cache.probs.rows() != m
        || labels.len() != m
        || cache.probs.cols() != cfg.n_classes
    {
        return Err(Error::Protocol("forward cache does not match the inputs".into()));
    }
    let mf = m as f64;

    let mut dlogits = cache.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        let row = dlogits.row_mut(i);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= mf);
    }
    let features = cache.layers.last().map_or(x, |c| &c.output);
    let theta = matmul_tn(&dlogits, features)?;
    let mut d_out = matmul(&dlogits, &params.theta)?;

    let mut layers = Vec::with_capacity(params.layers.len());
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let lc = &cache.layers[l];
        let f = layer.weight.rows();
        let half = f / 2;

        // pool routing, then the ReLU mask
        let mut d_bn = Matrix::zeros(m, f);
        for i in 0..m {
            let src = d_out.row(i);
            let dst = d_bn.row_mut(i);
            for (&g, &j) in src.iter().zip(&lc.pool_argmax[i * half..(i + 1) * half]) {
                if lc.relu_mask[i * f + j] {
                    dst[j] = g;
                }
            }
        }

        let mut d_scale = vec![0.0; f];
        let mut d_shift = vec![0.0; f];
        for i in 0..m {
            let g = d_bn.row(i);
            let xh = lc.normalized.row(i);
            for j in 0..f {
                d_scale[j] += g[j] * xh[j];
                d_shift[j] += g[j];
            }
        }
        // dxhat = g * scale; sums over the batch reuse d_shift and d_scale
        let mut d_h = Matrix::zeros(m, f);
        for j in 0..f {
            let inv_std = 1.0 / math::sqrt(lc.batch_var[j] + cfg.bn_eps);
            let gamma = layer.bn_scale[j];
            let sum_dxhat = gamma * d_shift[j];
            let sum_dxhat_xhat = gamma * d_scale[j];
            for i in 0..m {
                let dxhat = d_bn.get(i, j) * gamma;
                let xh = lc.normalized.get(i, j);
                d_h.set(i, j, inv_std / mf * (mf * dxhat - sum_dxhat - xh * sum_dxhat_xhat));
            }
        }

        let input = if l == 0 { x } else { &cache.layers[l - 1].output };
        let weight = matmul_tn(&d_h, input)?;
        if l > 0 {
            d_out = matmul(&d_h, &layer.weight)?;
        }
        layers.push(LayerGrads { weight, bn_scale: d_scale, bn_shift: d_shift });
    }
    layers.reverse();
    Ok(Gradients { layers, theta })
}

/// Relative error used by the gradient checks: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
