use crate::error::{Error, Result};
use crate::tensor::{elementwise, Elementwise, Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    elementwise(Elementwise::Max0, x, None).expect("unary op")
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape("relu_backward", output.shape(), grad_out.shape()));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// `(tanh(z) + 1) / 2`, mapping the reals onto `(0, 1)`.
///
/// Evaluated as the identical `1 / (1 + e^(−2z))`, which avoids the
/// cancellation in `tanh(z) + 1` for large negative `z`.
pub fn scaled_tanh<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let two = T::from_f64(2.0);
    z.map(|v| T::one() / (T::one() + (-two * v).exp()))
}

/// Gradient of [`scaled_tanh`] given its pre-activation `z`.
pub fn scaled_tanh_backward<T: Scalar>(z: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if z.shape() != grad_out.shape() {
        return Err(Error::shape("scaled_tanh_backward", z.shape(), grad_out.shape()));
    }
    let half = T::from_f64(0.5);
    let data = z
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let t = v.tanh();
            g * (T::one() - t * t) * half
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}
