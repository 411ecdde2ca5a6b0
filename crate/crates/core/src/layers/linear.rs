use std::collections::BTreeMap;

use super::LayerGradients;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `x · w + b` for `x (B×D)`, `w (D×K)`, `b (K)`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let k = w.shape().get(1).copied().unwrap_or(0);
    if b.shape() != [k] {
        return Err(Error::shape("linear bias", b.shape(), &[k]));
    }
    let mut y = x.matmul(w)?;
    for row in y.data_mut().chunks_mut(k) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v = *v + bias;
        }
    }
    Ok(y)
}

/// Gradients `"w"`, `"b"` and input of [`linear_forward`].
pub fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LayerGradients<T>> {
    let (&[bsz, d], &[d2, k]) = (x.shape(), w.shape()) else {
        return Err(Error::shape("linear_backward", x.shape(), w.shape()));
    };
    if d != d2 || grad_out.shape() != [bsz, k] {
        return Err(Error::shape("linear_backward", grad_out.shape(), &[bsz, k]));
    }
    let mut dw = vec![T::zero(); d * k];
    T::gemm(d, bsz, k, x.data(), true, grad_out.data(), false, T::zero(), &mut dw);
    let mut dx = vec![T::zero(); bsz * d];
    T::gemm(bsz, k, d, grad_out.data(), false, w.data(), true, T::zero(), &mut dx);
    let mut db = vec![T::zero(); k];
    for row in grad_out.data().chunks(k) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a = *a + g;
        }
    }
    let mut params = BTreeMap::new();
    params.insert("w", Tensor::new(vec![d, k], dw)?);
    params.insert("b", Tensor::new(vec![k], db)?);
    Ok(LayerGradients {
        params,
        input: Tensor::new(vec![bsz, d], dx)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, relative_error, weighted_sum, STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_zero_weights() {
        let x = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(linear_forward(&x, &id, &b).unwrap().data(), &[1.5, 1.5, 3.5, 3.5]);
        let zero = Tensor::zeros(vec![2, 2]);
        assert_eq!(linear_forward(&x, &zero, &b).unwrap().data(), &[0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn matches_matmul_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_fn(vec![3, 6], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn(vec![6, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f32>::from_fn(vec![4], |_| rng.gen_range(-1.0..1.0));
        let y = linear_forward(&x, &w, &b).unwrap();
        let mm = x.matmul(&w).unwrap();
        for (i, (&a, &m)) in y.data().iter().zip(mm.data()).enumerate() {
            assert_eq!(a, m + b.data()[i % 4]);
        }
    }

    #[test]
    fn rejects_mismatch() {
        let x = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(linear_forward(&x, &Tensor::zeros(vec![4, 2]), &Tensor::zeros(vec![2])).is_err());
        assert!(linear_forward(&x, &Tensor::zeros(vec![3, 2]), &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn(vec![3, 5], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::<f64>::from_fn(vec![5, 2], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(vec![2], |_| rng.gen_range(-1.0..1.0));
        let r = Tensor::<f64>::from_fn(vec![3, 2], |_| rng.gen_range(-1.0..1.0));
        let g = linear_backward(&x, &w, &r).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| weighted_sum(&linear_forward(x, w, b).unwrap(), &r);
        assert!(relative_error(g.input.data(), &numeric_gradient(&x, None, STEP, |t| loss(t, &w, &b))) <= 1e-5);
        assert!(relative_error(g.param("w").data(), &numeric_gradient(&w, None, STEP, |t| loss(&x, t, &b))) <= 1e-5);
        assert!(relative_error(g.param("b").data(), &numeric_gradient(&b, None, STEP, |t| loss(&x, &w, t))) <= 1e-5);
    }
}
