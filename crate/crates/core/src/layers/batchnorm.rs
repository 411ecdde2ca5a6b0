//! Per-channel batch normalization over the batch and spatial axes.

use std::collections::BTreeMap;

use super::{LayerGradients, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const EPSILON: f64 = 1e-5;
pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormState<T> {
    /// gamma 1, beta 0, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], T::one()),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
            momentum: MOMENTUM,
            epsilon: EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// What the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

/// Batch statistics of one train-mode forward: mean and unbiased variance.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

fn layout<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != channels {
        return Err(Error::invalid(format!(
            "batchnorm: input {shape:?} does not have {channels} channels on axis 1"
        )));
    }
    let batch = shape[0];
    let plane = shape[2..].iter().product();
    Ok((batch, plane))
}

fn check_affine<T: Scalar>(gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = gamma.len();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batchnorm affine", gamma.shape(), beta.shape()));
    }
    Ok(c)
}

/// Normalizes with batch statistics. Returns the output, the backward
/// cache and the batch statistics (the caller folds them into its running
/// averages).
pub fn bn_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: f64,
) -> Result<(Tensor<T>, BnCache<T>, BatchStats<T>)> {
    let c = check_affine(gamma, beta)?;
    let (batch, plane) = layout(x, c)?;
    let count = batch * plane;
    if count < 2 {
        return Err(Error::invalid(format!(
            "batchnorm train mode needs at least 2 values per channel, got {count}"
        )));
    }
    let xs = x.data();
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ch in 0..c {
        let slices = (0..batch).map(|b| &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
        let sum: f64 = slices.clone().flatten().map(|v| v.as_f64()).sum();
        let m = sum / count as f64;
        let ss: f64 = slices.flatten().map(|v| (v.as_f64() - m).powi(2)).sum();
        mean[ch] = m;
        var[ch] = ss / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();

    let mut xhat = vec![T::zero(); xs.len()];
    let mut y = vec![T::zero(); xs.len()];
    for (i, (&v, (h, o))) in xs.iter().zip(xhat.iter_mut().zip(y.iter_mut())).enumerate() {
        let ch = (i / plane) % c;
        let n = (v.as_f64() - mean[ch]) * inv_std[ch];
        *h = T::from_f64(n);
        *o = T::from_f64(gamma.data()[ch].as_f64() * n + beta.data()[ch].as_f64());
    }
    let unbiased = count as f64 / (count - 1) as f64;
    let stats = BatchStats {
        mean: Tensor::new(vec![c], mean.iter().map(|&m| T::from_f64(m)).collect())?,
        var: Tensor::new(vec![c], var.iter().map(|&v| T::from_f64(v * unbiased)).collect())?,
    };
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BnCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
        },
        stats,
    ))
}

/// Normalizes with the running statistics only.
pub fn bn_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let c = check_affine(gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape("batchnorm running stats", running_mean.shape(), running_var.shape()));
    }
    let (_, plane) = layout(x, c)?;
    let scale: Vec<f64> = (0..c)
        .map(|ch| gamma.data()[ch].as_f64() / (running_var.data()[ch].as_f64() + epsilon).sqrt())
        .collect();
    let shift: Vec<f64> = (0..c)
        .map(|ch| beta.data()[ch].as_f64() - running_mean.data()[ch].as_f64() * scale[ch])
        .collect();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / plane) % c;
            T::from_f64(v.as_f64() * scale[ch] + shift[ch])
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `running ← momentum · running + (1 − momentum) · batch`.
pub fn update_running<T: Scalar>(running: &mut Tensor<T>, batch: &Tensor<T>, momentum: f64) {
    for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
        *r = T::from_f64(momentum * r.as_f64() + (1.0 - momentum) * b.as_f64());
    }
}

/// Exact gradient of the train-mode normalization, including the
/// dependence of the batch statistics on the input. Returns
/// `(dx, dgamma, dbeta)`.
pub fn bn_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::shape("batchnorm_backward", grad_out.shape(), cache.xhat.shape()));
    }
    let c = gamma.len();
    let (batch, plane) = layout(grad_out, c)?;
    let count = (batch * plane) as f64;
    let (dy, xhat) = (grad_out.data(), cache.xhat.data());

    let mut sum_dy = vec![0f64; c];
    let mut sum_dy_xhat = vec![0f64; c];
    for (i, (&g, &h)) in dy.iter().zip(xhat).enumerate() {
        let ch = (i / plane) % c;
        sum_dy[ch] += g.as_f64();
        sum_dy_xhat[ch] += g.as_f64() * h.as_f64();
    }
    let dx = dy
        .iter()
        .zip(xhat)
        .enumerate()
        .map(|(i, (&g, &h))| {
            let ch = (i / plane) % c;
            let k = gamma.data()[ch].as_f64() * cache.inv_std[ch] / count;
            T::from_f64(k * (count * g.as_f64() - sum_dy[ch] - h.as_f64() * sum_dy_xhat[ch]))
        })
        .collect();
    let to_t = |v: Vec<f64>| Tensor::new(vec![c], v.into_iter().map(T::from_f64).collect());
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        to_t(sum_dy_xhat)?,
        to_t(sum_dy)?,
    ))
}

/// Batch normalization against an owned state. Train mode normalizes with
/// batch statistics and updates the running averages; eval mode reads the
/// running averages and mutates nothing.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    match mode {
        Mode::Train => {
            let (y, cache, stats) = bn_train_forward(x, &state.gamma, &state.beta, state.epsilon)?;
            update_running(&mut state.running_mean, &stats.mean, state.momentum);
            update_running(&mut state.running_var, &stats.var, state.momentum);
            Ok((y, Some(cache)))
        }
        Mode::Eval => Ok((
            bn_eval_forward(x, &state.gamma, &state.beta, &state.running_mean, &state.running_var, state.epsilon)?,
            None,
        )),
    }
}

/// Gradients (`"gamma"`, `"beta"`, input) of a train-mode forward.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    state: &BatchNormState<T>,
    grad_out: &Tensor<T>,
) -> Result<LayerGradients<T>> {
    let (dx, dgamma, dbeta) = bn_backward(cache, &state.gamma, grad_out)?;
    let mut params = BTreeMap::new();
    params.insert("gamma", dgamma);
    params.insert("beta", dbeta);
    Ok(LayerGradients { params, input: dx })
}
