use rayon::prelude::*;

use super::{join_dims, split_dims, Window};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Argmax positions recorded by [`maxpool`]; one flat input index per
/// output element.
#[derive(Debug, Clone)]
pub struct MaxPoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl MaxPoolIndices {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Max pooling with `−∞` padding. Ties resolve to the lowest input index.
pub fn maxpool<T: Scalar>(x: &Tensor<T>, window: &Window) -> Result<(Tensor<T>, MaxPoolIndices)> {
    let rank = window.rank();
    let (batch, channels, [h, w]) = split_dims(x.shape(), rank)?;
    if window.padding[0] >= window.kernel[0] || window.padding[1] >= window.kernel[1] {
        return Err(Error::invalid(format!(
            "maxpool padding must be smaller than the kernel: {window:?}"
        )));
    }
    let [oh, ow] = window.output_extent([h, w])?;
    let [kh, kw] = window.kernel;
    let [sh, sw] = window.stride;
    let [ph, pw] = window.padding;
    let planes = batch * channels;
    let (in_plane, out_plane) = (h * w, oh * ow);

    let mut out = vec![T::zero(); planes * out_plane];
    let mut argmax = vec![0usize; planes * out_plane];
    out.par_chunks_mut(out_plane)
        .zip(argmax.par_chunks_mut(out_plane))
        .enumerate()
        .for_each(|(p, (o, a))| {
            let src = &x.data()[p * in_plane..(p + 1) * in_plane];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    // row-major scan with strict comparison keeps the lowest index on ties
                    for ki in 0..kh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if best_i == usize::MAX || src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    o[oy * ow + ox] = best;
                    a[oy * ow + ox] = p * in_plane + best_i;
                }
            }
        });
    Ok((
        Tensor::new(join_dims(batch, channels, [oh, ow], rank), out)?,
        MaxPoolIndices {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each output gradient to the single input element that won its window.
pub fn maxpool_backward<T: Scalar>(indices: &MaxPoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::invalid(format!(
            "maxpool_backward: {} gradients for {} pooled outputs",
            grad_out.len(),
            indices.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(indices.input_shape.clone());
    let d = dx.data_mut();
    for (&i, &g) in indices.argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    Ok(dx)
}

/// Mean over every axis after `(batch, channels)`; output `(batch, channels)`.
pub fn global_average_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 3 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "global average pooling needs at least one spatial axis".into(),
        });
    }
    let axes: Vec<usize> = (2..x.rank()).collect();
    x.reduce_mean(&axes)
}

pub fn gap_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = (input_shape[0], input_shape[1]);
    if grad_out.shape() != [b, c] {
        return Err(Error::shape("gap_backward", grad_out.shape(), &[b, c]));
    }
    let plane: usize = input_shape[2..].iter().product();
    let inv = T::from_f64(1.0 / plane as f64);
    let mut dx = Vec::with_capacity(b * c * plane);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat(g * inv).take(plane));
    }
    Tensor::new(input_shape.to_vec(), dx)
}
