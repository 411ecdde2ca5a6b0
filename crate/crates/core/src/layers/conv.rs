//! Cross-correlation with zero padding, lowered to GEMM through im2col.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{join_dims, split_dims, ConvSpec, LayerGradients, Window};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct Geometry {
    batch: usize,
    channels: usize,
    input: [usize; 2],
    output: [usize; 2],
    window: Window,
}

impl Geometry {
    fn in_plane(&self) -> usize {
        self.input[0] * self.input[1]
    }

    fn out_plane(&self) -> usize {
        self.output[0] * self.output[1]
    }

    fn col_rows(&self) -> usize {
        self.channels * self.window.kernel[0] * self.window.kernel[1]
    }

    /// A 1×1, stride-1, unpadded window reads the input unchanged.
    fn is_pointwise(&self) -> bool {
        self.window.kernel == [1, 1] && self.window.stride == [1, 1] && self.window.padding == [0, 0]
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Geometry> {
    let rank = spec.window.rank();
    let (batch, channels, input) = split_dims(x.shape(), rank)?;
    if channels != spec.in_channels {
        return Err(Error::invalid(format!(
            "conv: input has {channels} channels, spec expects {}",
            spec.in_channels
        )));
    }
    let want = spec.weight_shape();
    if w.shape() != want.as_slice() {
        return Err(Error::shape("conv weight", w.shape(), &want));
    }
    let output = spec.window.output_extent(input)?;
    Ok(Geometry {
        batch,
        channels,
        input,
        output,
        window: spec.window,
    })
}

/// Unfold one sample `(C, H, W)` into `(C·kh·kw) × (OH·OW)` columns.
fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let [kh, kw] = g.window.kernel;
    let [sh, sw] = g.window.stride;
    let [ph, pw] = g.window.padding;
    let [h, w] = g.input;
    let [oh, ow] = g.output;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `(C, H, W)`.
fn col2im<T: Scalar>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let [kh, kw] = g.window.kernel;
    let [sh, sw] = g.window.stride;
    let [ph, pw] = g.window.padding;
    let [h, w] = g.input;
    let [oh, ow] = g.output;
    dx.fill(T::zero());
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < w {
                            line[ix as usize] = line[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation of `x` with `w` (no kernel flip), plus optional bias.
/// Works for `(B, C, L)` audio with a 1D spec and `(B, C, H, W)` images
/// with a 2D spec.
pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, spec)?;
    let out_c = spec.out_channels;
    if let Some(b) = b {
        if b.shape() != [out_c] {
            return Err(Error::shape("conv bias", b.shape(), &[out_c]));
        }
    }
    let (in_size, out_size) = (g.channels * g.in_plane(), out_c * g.out_plane());
    let mut out = vec![T::zero(); g.batch * out_size];
    out.par_chunks_mut(out_size)
        .zip(x.data().par_chunks(in_size))
        .for_each(|(y, xs)| {
            let (k, n) = (g.col_rows(), g.out_plane());
            if g.is_pointwise() {
                T::gemm(out_c, k, n, w.data(), false, xs, false, T::zero(), y);
            } else {
                let mut cols = vec![T::zero(); k * n];
                im2col(&g, xs, &mut cols);
                T::gemm(out_c, k, n, w.data(), false, &cols, false, T::zero(), y);
            }
            if let Some(b) = b {
                for (o, plane) in y.chunks_mut(n).enumerate() {
                    let bias = b.data()[o];
                    plane.iter_mut().for_each(|v| *v = *v + bias);
                }
            }
        });
    Tensor::new(join_dims(g.batch, out_c, g.output, spec.window.rank()), out)
}

/// Gradients of [`conv_forward`] w.r.t. weight (`"w"`), bias (`"b"`, when
/// `with_bias`) and input.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    with_bias: bool,
) -> Result<LayerGradients<T>> {
    let g = geometry(x, w, spec)?;
    let out_c = spec.out_channels;
    let want = join_dims(g.batch, out_c, g.output, spec.window.rank());
    if grad_out.shape() != want.as_slice() {
        return Err(Error::shape("conv_backward grad_out", grad_out.shape(), &want));
    }
    let (k, n) = (g.col_rows(), g.out_plane());
    let (in_size, out_size) = (g.channels * g.in_plane(), out_c * n);

    let mut dx = vec![T::zero(); x.len()];
    // per-sample weight gradients, summed afterwards in sample order so the
    // result does not depend on thread scheduling
    let dws: Vec<Vec<T>> = dx
        .par_chunks_mut(in_size)
        .zip(x.data().par_chunks(in_size))
        .zip(grad_out.data().par_chunks(out_size))
        .map(|((dxs, xs), dy)| {
            let mut dw = vec![T::zero(); out_c * k];
            if g.is_pointwise() {
                T::gemm(out_c, n, k, dy, false, xs, true, T::zero(), &mut dw);
                T::gemm(k, out_c, n, w.data(), true, dy, false, T::zero(), dxs);
            } else {
                let mut cols = vec![T::zero(); k * n];
                im2col(&g, xs, &mut cols);
                T::gemm(out_c, n, k, dy, false, &cols, true, T::zero(), &mut dw);
                T::gemm(k, out_c, n, w.data(), true, dy, false, T::zero(), &mut cols);
                col2im(&g, &cols, dxs);
            }
            dw
        })
        .collect();

    let mut dw = vec![T::zero(); out_c * k];
    for part in &dws {
        for (a, &b) in dw.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    let mut params = BTreeMap::new();
    params.insert("w", Tensor::new(spec.weight_shape(), dw)?);
    if with_bias {
        let mut db = vec![T::zero(); out_c];
        for sample in grad_out.data().chunks(out_size) {
            for (o, plane) in sample.chunks(n).enumerate() {
                db[o] = db[o] + plane.iter().copied().sum();
            }
        }
        params.insert("b", Tensor::new(vec![out_c], db)?);
    }
    Ok(LayerGradients {
        params,
        input: Tensor::new(x.shape().to_vec(), dx)?,
    })
}
