//! Dense row-major tensors.
//!
//! Activations use a channel-first layout: `(batch, channels, spatial...)`.
//! One spatial axis is audio, two are images. Values are immutable once
//! built except through the explicit `*_mut` accessors used by the layer
//! kernels and the optimizer.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f32` (training and
/// inference) and `f64` (finite-difference gradient checks).
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    /// `c = a · b + beta · c` for row-major `a (m×k)`, `b (k×n)`, `c (m×n)`.
    /// Either operand can be read transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 fits in scalar")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar fits in f64")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // (row stride, column stride) of the logical matrix
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// `c = a · b + beta · c` for a single row `a`: one streaming pass over
/// `b`, avoiding the packing copy a blocked kernel makes.
fn row_times_matrix<T: Float>(k: usize, n: usize, a: &[T], b: &[T], b_transposed: bool, beta: T, c: &mut [T]) {
    if beta == T::zero() {
        c.iter_mut().for_each(|v| *v = T::zero());
    } else if beta != T::one() {
        c.iter_mut().for_each(|v| *v = *v * beta);
    }
    if b_transposed {
        for (out, row) in c.iter_mut().zip(b.chunks_exact(k)) {
            let dot = a.iter().zip(row).fold(T::zero(), |s, (&x, &y)| s + x * y);
            *out = *out + dot;
        }
    } else {
        for (&x, row) in a.iter().zip(b.chunks_exact(n)) {
            for (out, &y) in c.iter_mut().zip(row) {
                *out = *out + x * y;
            }
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs length");
                assert_eq!(b.len(), k * n, "gemm: rhs length");
                assert_eq!(c.len(), m * n, "gemm: output length");
                if m == 0 || n == 0 {
                    return;
                }
                if m == 1 {
                    row_times_matrix(k, n, a, b, b_transposed, beta, c);
                    return;
                }
                let (rsa, csa) = strides(m, k, a_transposed);
                let (rsb, csb) = strides(k, n, b_transposed);
                // SAFETY: the asserts above pin every buffer to the extents
                // and strides handed to the kernel.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Element-wise operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Max0,
    Tanh,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(SHOWN)];
        if self.data.len() > SHOWN {
            write!(f, "{head:?}…")
        } else {
            write!(f, "{head:?}")
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows".into(),
        })
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics on a zero extent; use [`Tensor::new`] for unchecked input.
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("valid shape");
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("valid shape");
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        elementwise(Elementwise::Add, self, Some(other))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        elementwise(Elementwise::Sub, self, Some(other))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        elementwise(Elementwise::Mul, self, Some(other))
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// In-place `self += other`, shapes must match exactly.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Same shape and bit-identical payload.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Self> {
        reduce_mean(self, axes)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let [rows, cols] = self.shape[..] else {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose needs rank 2".into(),
            });
        };
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Tensor::new(vec![cols, rows], out)
    }

    /// Contiguous sub-tensor `index` along the leading axis.
    pub fn index_outer(&self, index: usize) -> Result<Self> {
        let Some((&outer, rest)) = self.shape.split_first() else {
            return Err(Error::invalid("index_outer on a rank-0 tensor"));
        };
        if index >= outer {
            return Err(Error::invalid(format!(
                "index {index} out of range for leading extent {outer}"
            )));
        }
        let inner = self.data.len() / outer;
        Tensor::new(
            rest.to_vec(),
            self.data[index * inner..(index + 1) * inner].to_vec(),
        )
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// Applies `op` element by element. Binary operations need identical
/// shapes, or a single-element right operand which is broadcast.
pub fn elementwise<T: Scalar>(op: Elementwise, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if !op.is_binary() {
        if b.is_some() {
            return Err(Error::invalid(format!("{op:?} takes one operand")));
        }
        let f: fn(T) -> T = match op {
            Elementwise::Max0 => |v| if v > T::zero() { v } else { T::zero() },
            Elementwise::Tanh => |v| v.tanh(),
            _ => unreachable!(),
        };
        return Ok(a.map(f));
    }
    let b = b.ok_or_else(|| Error::invalid(format!("{op:?} takes two operands")))?;
    let f: fn(T, T) -> T = match op {
        Elementwise::Add => |x, y| x + y,
        Elementwise::Sub => |x, y| x - y,
        Elementwise::Mul => |x, y| x * y,
        _ => unreachable!(),
    };
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.len() == 1 {
        let y = b.data[0];
        return Ok(a.map(|x| f(x, y)));
    }
    Err(Error::shape("elementwise", &a.shape, &b.shape))
}

/// Arithmetic mean over `axes`; the reduced axes are removed. Accumulates
/// in f64. An empty axis set returns a copy.
pub fn reduce_mean<T: Scalar>(a: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = a.rank();
    let mut reduced = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(Error::invalid(format!("axis {ax} out of range for rank {rank}")));
        }
        if reduced[ax] {
            return Err(Error::invalid(format!("axis {ax} repeated")));
        }
        reduced[ax] = true;
    }
    if axes.is_empty() {
        return Ok(a.clone());
    }
    let out_shape: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| a.shape[i]).collect();
    let out_len: usize = out_shape.iter().product();
    let count: usize = (0..rank).filter(|&i| reduced[i]).map(|i| a.shape[i]).product();

    // row-major strides of the kept axes inside the output
    let mut out_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        if !reduced[i] {
            out_strides[i] = s;
            s *= a.shape[i];
        }
    }
    let mut sums = vec![0f64; out_len];
    let mut idx = vec![0usize; rank];
    for &v in &a.data {
        let o: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        sums[o] += v.as_f64();
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < a.shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let data = sums.into_iter().map(|s| T::from_f64(s / count as f64)).collect();
    Tensor::new(out_shape, data)
}

/// `(M×K) · (K×N)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let ([m, k], [k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (*m, *k, *n);
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), false, b.data(), false, T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_row_gemm_matches_blocked_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (k, n) = (7, 5);
        let a: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for transposed in [false, true] {
            for beta in [0.0, 1.0, 0.5] {
                let mut one = c0.clone();
                f64::gemm(1, k, n, &a, false, &b, transposed, beta, &mut one);
                // Two identical rows take the blocked path.
                let mut two = [c0.clone(), c0.clone()].concat();
                f64::gemm(2, k, n, &[a.clone(), a.clone()].concat(), false, &b, transposed, beta, &mut two);
                for j in 0..n {
                    assert!((one[j] - two[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let r = elementwise(Elementwise::Max0, &t(&[3], &[-1.0, 0.0, 2.0]), None).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let r = elementwise(Elementwise::Tanh, &t(&[1], &[0.0]), None).unwrap();
        assert_eq!(r.data(), &[0.0]);
    }

    #[test]
    fn binary_shape_mismatch_reports_both_shapes() {
        let err = t(&[2], &[1.0, 2.0]).add(&t(&[3], &[1.0, 2.0, 3.0])).unwrap_err();
        match err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scalar_broadcast_only() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = a.mul(&Tensor::scalar(2.0)).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 6.0, 8.0]);
        assert!(a.add(&t(&[2], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn reduce_mean_examples() {
        let a = t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(a.reduce_mean(&[1]).unwrap().data(), &[2.0, 6.0]);
        assert_eq!(a.reduce_mean(&[0]).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(a.reduce_mean(&[]).unwrap(), a);

        let ramp = Tensor::<f32>::from_fn(vec![4, 4], |i| i as f32);
        let m = ramp.reduce_mean(&[0, 1]).unwrap();
        assert_eq!(m.shape(), &[] as &[usize]);
        assert_eq!(m.data(), &[7.5]);
    }

    #[test]
    fn reduce_mean_middle_axis() {
        // (2,3,2): mean over axis 1
        let a = Tensor::<f64>::from_fn(vec![2, 3, 2], |i| i as f64);
        let m = a.reduce_mean(&[1]).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[2.0, 3.0, 8.0, 9.0]);
    }

    #[test]
    fn reduce_mean_rejects_bad_axis() {
        let a = t(&[2, 2], &[1.0; 4]);
        assert!(a.reduce_mean(&[2]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.5, -2.0, 3.25, 4.0]);
        assert_eq!(id.matmul(&m).unwrap(), m);
        let r = t(&[1, 2], &[1.0, 2.0]).matmul(&t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(t(&[1, 2], &[1.0, 2.0]).matmul(&t(&[3, 1], &[1.0; 3])).is_err());
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(3, 4, 2), (64, 64, 64), (17, 33, 9), (1, 64, 1)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = t(&[m, k], &a).matmul(&t(&[k, n], &b)).unwrap();
            let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            let want = naive_matmul(&a64, &b64, m, k, n);
            let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((*g as f64 - w).abs() <= 1e-6 * scale.max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn transposed_gemm_operands() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2, 2], &[1.0, 0.5, -1.0, 2.0]);
        // aᵀ · b computed with the transposed flag against an explicit transpose
        let mut out = vec![0.0f32; 6];
        f32::gemm(3, 2, 2, a.data(), true, b.data(), false, 0.0, &mut out);
        let want = a.transpose().unwrap().matmul(&b).unwrap();
        assert_eq!(out, want.data());
    }

    proptest! {
        #[test]
        fn reshape_round_trip(dims in proptest::collection::vec(1usize..5, 1..4)) {
            let n: usize = dims.iter().product();
            let a = Tensor::<f32>::from_fn(dims.clone(), |i| i as f32 * 0.5);
            let flat = a.reshape(vec![n]).unwrap();
            prop_assert_eq!(flat.reshape(dims).unwrap(), a);
        }

        #[test]
        fn mean_of_constant(c in -100.0f32..100.0, dims in proptest::collection::vec(1usize..6, 1..4)) {
            let a = Tensor::<f32>::full(dims.clone(), c);
            let all: Vec<usize> = (0..dims.len()).collect();
            let m = a.reduce_mean(&all).unwrap().data()[0];
            let n: usize = dims.iter().product();
            let tol = c.abs() * f32::EPSILON * (n as f32).log2().max(1.0);
            prop_assert!((m - c).abs() <= tol);
        }
    }
}
