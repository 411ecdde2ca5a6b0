//! Two-convolution residual blocks.
//!
//! Main path `conv → BN → ReLU → conv → BN`, added to the shortcut, then a
//! final ReLU. Identity shortcuts pass the input through; projection
//! shortcuts apply a kernel-1 convolution with the block stride followed by
//! batch normalization.

use super::batchnorm::{bn_backward, bn_eval_forward, bn_train_forward, BatchStats, BnCache, EPSILON};
use super::{conv_backward, conv_forward, relu, relu_backward, ConvSpec, Mode, Window};
use crate::error::{Error, Result};
use crate::params::Scope;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    Projection(ConvSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub shortcut: Shortcut,
}

impl BlockSpec {
    /// A block with `kernel`/`padding` on both convolutions and `stride` on
    /// the first. `window_of` builds the 1D or 2D window.
    fn build(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        projection: bool,
        window_of: impl Fn(usize) -> Window,
        unit_window: Window,
    ) -> Result<Self> {
        if !projection && (in_channels != out_channels || stride != 1) {
            return Err(Error::invalid(format!(
                "identity shortcut needs matching channels and stride 1 \
                 (got {in_channels}→{out_channels}, stride {stride})"
            )));
        }
        let conv1 = ConvSpec {
            window: window_of(stride),
            in_channels,
            out_channels,
        };
        let conv2 = ConvSpec {
            window: window_of(1),
            in_channels: out_channels,
            out_channels,
        };
        let shortcut = if projection {
            Shortcut::Projection(ConvSpec {
                window: unit_window,
                in_channels,
                out_channels,
            })
        } else {
            Shortcut::Identity
        };
        Ok(Self { conv1, conv2, shortcut })
    }

    pub fn d1(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        projection: bool,
    ) -> Result<Self> {
        Self::build(
            in_channels,
            out_channels,
            stride,
            projection,
            |s| Window::d1(kernel, s, padding),
            Window::d1(1, stride, 0),
        )
    }

    pub fn d2(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        projection: bool,
    ) -> Result<Self> {
        Self::build(
            in_channels,
            out_channels,
            stride,
            projection,
            |s| Window::square(kernel, s, padding),
            Window::square(1, stride, 0),
        )
    }

    pub fn is_projection(&self) -> bool {
        matches!(self.shortcut, Shortcut::Projection(_))
    }

    /// Local parameter names and shapes, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("conv1.w".to_string(), self.conv1.weight_shape())];
        out.extend(bn_shapes("bn1", self.conv1.out_channels));
        out.push(("conv2.w".to_string(), self.conv2.weight_shape()));
        out.extend(bn_shapes("bn2", self.conv2.out_channels));
        if let Shortcut::Projection(p) = self.shortcut {
            out.push(("proj.w".to_string(), p.weight_shape()));
            out.extend(bn_shapes("proj_bn", p.out_channels));
        }
        out
    }
}

pub(crate) fn bn_shapes(prefix: &str, channels: usize) -> Vec<(String, Vec<usize>)> {
    ["gamma", "beta", "running_mean", "running_var"]
        .iter()
        .map(|s| (format!("{prefix}.{s}"), vec![channels]))
        .collect()
}

/// Batch statistics produced by one train-mode normalization, keyed by the
/// local prefix of its layer (for example `"bn1"`).
pub type StatsUpdate<T> = (String, BatchStats<T>);

/// Batch normalization reading `gamma`/`beta`/running stats under `local`.
pub(crate) fn bn_scoped<T: Scalar>(
    scope: &Scope<'_, T>,
    local: &str,
    x: &Tensor<T>,
    mode: Mode,
    stats: &mut Vec<StatsUpdate<T>>,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    let gamma = scope.get(&format!("{local}.gamma"))?;
    let beta = scope.get(&format!("{local}.beta"))?;
    match mode {
        Mode::Train => {
            let (y, cache, s) = bn_train_forward(x, gamma, beta, EPSILON)?;
            stats.push((local.to_string(), s));
            Ok((y, Some(cache)))
        }
        Mode::Eval => {
            let rm = scope.get(&format!("{local}.running_mean"))?;
            let rv = scope.get(&format!("{local}.running_var"))?;
            Ok((bn_eval_forward(x, gamma, beta, rm, rv, EPSILON)?, None))
        }
    }
}

/// Activations retained for the backward pass of one block.
#[derive(Debug, Clone)]
pub struct BlockTape<T> {
    x: Tensor<T>,
    bn1: BnCache<T>,
    a1: Tensor<T>,
    bn2: BnCache<T>,
    proj_bn: Option<BnCache<T>>,
    y: Tensor<T>,
}

pub struct BlockOutput<T> {
    pub y: Tensor<T>,
    pub tape: Option<BlockTape<T>>,
    pub stats: Vec<StatsUpdate<T>>,
}

pub fn block_forward<T: Scalar>(
    spec: &BlockSpec,
    scope: Scope<'_, T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<BlockOutput<T>> {
    let mut stats = Vec::new();
    let h1 = conv_forward(x, scope.get("conv1.w")?, None, &spec.conv1)?;
    let (n1, bn1) = bn_scoped(&scope, "bn1", &h1, mode, &mut stats)?;
    let a1 = relu(&n1);
    let h2 = conv_forward(&a1, scope.get("conv2.w")?, None, &spec.conv2)?;
    let (main, bn2) = bn_scoped(&scope, "bn2", &h2, mode, &mut stats)?;

    let (short, proj_bn) = match spec.shortcut {
        Shortcut::Identity => (x.clone(), None),
        Shortcut::Projection(p) => {
            let s = conv_forward(x, scope.get("proj.w")?, None, &p)?;
            bn_scoped(&scope, "proj_bn", &s, mode, &mut stats)?
        }
    };
    if short.shape() != main.shape() {
        return Err(Error::shape("residual add", main.shape(), short.shape()));
    }
    let y = relu(&main.add(&short)?);
    let tape = match mode {
        Mode::Train => Some(BlockTape {
            x: x.clone(),
            bn1: bn1.expect("train mode caches"),
            a1,
            bn2: bn2.expect("train mode caches"),
            proj_bn,
            y: y.clone(),
        }),
        Mode::Eval => None,
    };
    Ok(BlockOutput { y, tape, stats })
}

/// Input gradient plus gradients keyed by local parameter name.
pub fn block_backward<T: Scalar>(
    spec: &BlockSpec,
    scope: Scope<'_, T>,
    tape: &BlockTape<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<(String, Tensor<T>)>)> {
    let mut grads = Vec::new();
    let g = relu_backward(&tape.y, grad_out)?;

    let (d_h2, dg2, db2) = bn_backward(&tape.bn2, scope.get("bn2.gamma")?, &g)?;
    let c2 = conv_backward(&tape.a1, scope.get("conv2.w")?, &spec.conv2, &d_h2, false)?;
    let d_n1 = relu_backward(&tape.a1, &c2.input)?;
    let (d_h1, dg1, db1) = bn_backward(&tape.bn1, scope.get("bn1.gamma")?, &d_n1)?;
    let c1 = conv_backward(&tape.x, scope.get("conv1.w")?, &spec.conv1, &d_h1, false)?;
    let mut dx = c1.input.clone();

    grads.push(("conv1.w".to_string(), c1.params["w"].clone()));
    grads.push(("bn1.gamma".to_string(), dg1));
    grads.push(("bn1.beta".to_string(), db1));
    grads.push(("conv2.w".to_string(), c2.params["w"].clone()));
    grads.push(("bn2.gamma".to_string(), dg2));
    grads.push(("bn2.beta".to_string(), db2));

    match spec.shortcut {
        Shortcut::Identity => dx.add_assign(&g)?,
        Shortcut::Projection(p) => {
            let cache = tape
                .proj_bn
                .as_ref()
                .ok_or_else(|| Error::StaleTape("projection cache missing".into()))?;
            let (d_s, dgp, dbp) = bn_backward(cache, scope.get("proj_bn.gamma")?, &g)?;
            let cp = conv_backward(&tape.x, scope.get("proj.w")?, &p, &d_s, false)?;
            dx.add_assign(&cp.input)?;
            grads.push(("proj.w".to_string(), cp.params["w"].clone()));
            grads.push(("proj_bn.gamma".to_string(), dgp));
            grads.push(("proj_bn.beta".to_string(), dbp));
        }
    }
    Ok((dx, grads))
}
