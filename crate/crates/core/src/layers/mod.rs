//! Differentiable layer primitives with explicit forward and backward passes.
//!
//! Spatial layers accept `(batch, channels, length)` audio or
//! `(batch, channels, height, width)` images. Internally a length-`L` signal
//! is the `L × 1` image, so a 1D window `k / s / p` is exactly the 2D
//! window `(k×1) / (s×1) / (p×0)`.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod lstm;
pub mod pool;
pub mod residual;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use activation::{relu, relu_backward, scaled_tanh, scaled_tanh_backward};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormState, BnCache};
pub use conv::{conv_backward, conv_forward};
pub use linear::{linear_backward, linear_forward};
pub use lstm::{lstm_gate_backward, lstm_step, lstm_step_backward, LstmCache, LstmGateGrads, LstmParams};
pub use pool::{gap_backward, global_average_pool, maxpool, maxpool_backward, MaxPoolIndices};
pub use residual::{BlockSpec, Shortcut};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Kernel, stride and padding along one or two spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    rank: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl Window {
    pub fn d1(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            rank: 1,
            kernel: [kernel, 1],
            stride: [stride, 1],
            padding: [padding, 0],
        }
    }

    pub fn d2(kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Self {
        Self {
            rank: 2,
            kernel,
            stride,
            padding,
        }
    }

    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self::d2([kernel; 2], [stride; 2], [padding; 2])
    }

    /// Number of spatial axes (1 for audio, 2 for images).
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// The 2D window that acts identically on a signal viewed as `L × 1`.
    pub fn as_2d(&self) -> Self {
        Self { rank: 2, ..*self }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::invalid(format!(
                "kernel and stride must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((L + 2p − k) / s) + 1` per axis; rejects outputs below one.
    pub fn output_extent(&self, input: [usize; 2]) -> Result<[usize; 2]> {
        self.validate()?;
        let mut out = [0; 2];
        for a in 0..2 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::invalid(format!(
                    "padded extent {padded} smaller than kernel {} on axis {a}",
                    self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub window: Window,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn d1(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            window: Window::d1(kernel, stride, padding),
            in_channels,
            out_channels,
        }
    }

    pub fn d2(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            window: Window::square(kernel, stride, padding),
            in_channels,
            out_channels,
        }
    }

    /// Weight shape: `(out, in, k)` or `(out, in, kh, kw)`.
    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.window.kernel[..self.window.rank]);
        s
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.window.kernel[0] * self.window.kernel[1]
    }
}

/// Gradients of one layer: parameters keyed by local name, plus the input.
#[derive(Debug, Clone)]
pub struct LayerGradients<T = f32> {
    pub params: BTreeMap<&'static str, Tensor<T>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> LayerGradients<T> {
    pub fn param(&self, name: &str) -> &Tensor<T> {
        &self.params[name]
    }
}

/// `(batch, channels, [h, w])` of an activation with `rank` spatial axes.
pub(crate) fn split_dims(shape: &[usize], rank: usize) -> Result<(usize, usize, [usize; 2])> {
    match (rank, shape) {
        (1, &[b, c, l]) => Ok((b, c, [l, 1])),
        (2, &[b, c, h, w]) => Ok((b, c, [h, w])),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("expected (batch, channels) + {rank} spatial axes"),
        }),
    }
}

pub(crate) fn join_dims(b: usize, c: usize, spatial: [usize; 2], rank: usize) -> Vec<usize> {
    let mut s = vec![b, c];
    s.extend_from_slice(&spatial[..rank]);
    s
}
