//! Single LSTM time step.
//!
//! Gate pre-activations are `x·w_x + h·w_h + b` with the `4H` columns laid
//! out as input, forget, candidate, output.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct LstmParams<'a, T> {
    pub w_x: &'a Tensor<T>,
    pub w_h: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
}

impl<T: Scalar> LstmParams<'_, T> {
    /// `(input size, hidden size)`.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let (&[d, g4], &[h, g4b]) = (self.w_x.shape(), self.w_h.shape()) else {
            return Err(Error::shape("lstm weights", self.w_x.shape(), self.w_h.shape()));
        };
        if g4 != 4 * h || g4b != 4 * h || self.b.shape() != [4 * h] {
            return Err(Error::shape("lstm weights", self.w_h.shape(), self.b.shape()));
        }
        Ok((d, h))
    }
}

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    x: Tensor<T>,
    h_prev: Tensor<T>,
    c_prev: Tensor<T>,
    /// Activated gates `[i | f | g | o]`, `B × 4H`.
    gates: Vec<T>,
    tanh_c: Vec<T>,
    hidden: usize,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// One step: returns `(h_t, c_t)` and the cache for [`lstm_step_backward`].
pub fn lstm_step<T: Scalar>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
    params: LstmParams<'_, T>,
) -> Result<(Tensor<T>, Tensor<T>, LstmCache<T>)> {
    let (d, h) = params.dims()?;
    let batch = x.shape().first().copied().unwrap_or(0);
    if x.shape() != [batch, d] {
        return Err(Error::shape("lstm input", x.shape(), &[batch, d]));
    }
    if h_prev.shape() != [batch, h] || c_prev.shape() != [batch, h] {
        return Err(Error::shape("lstm state", h_prev.shape(), c_prev.shape()));
    }
    let g4 = 4 * h;
    let mut pre = vec![T::zero(); batch * g4];
    for row in pre.chunks_mut(g4) {
        row.copy_from_slice(params.b.data());
    }
    T::gemm(batch, d, g4, x.data(), false, params.w_x.data(), false, T::one(), &mut pre);
    T::gemm(batch, h, g4, h_prev.data(), false, params.w_h.data(), false, T::one(), &mut pre);

    let mut gates = pre;
    let mut c = vec![T::zero(); batch * h];
    let mut hn = vec![T::zero(); batch * h];
    let mut tanh_c = vec![T::zero(); batch * h];
    for b in 0..batch {
        let row = &mut gates[b * g4..(b + 1) * g4];
        for j in 0..h {
            row[j] = sigmoid(row[j]);
            row[h + j] = sigmoid(row[h + j]);
            row[2 * h + j] = row[2 * h + j].tanh();
            row[3 * h + j] = sigmoid(row[3 * h + j]);
            let k = b * h + j;
            c[k] = row[h + j] * c_prev.data()[k] + row[j] * row[2 * h + j];
            tanh_c[k] = c[k].tanh();
            hn[k] = row[3 * h + j] * tanh_c[k];
        }
    }
    let cache = LstmCache {
        x: x.clone(),
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        gates,
        tanh_c,
        hidden: h,
    };
    Ok((Tensor::new(vec![batch, h], hn)?, Tensor::new(vec![batch, h], c)?, cache))
}

/// Gradients of one step.
#[derive(Debug, Clone)]
pub struct LstmStepGrads<T> {
    pub x: Tensor<T>,
    pub h_prev: Tensor<T>,
    pub c_prev: Tensor<T>,
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub b: Tensor<T>,
}

/// Input-side gradients of one step: the gate pre-activation gradient
/// `dpre` (`B × 4H`) plus `dx`, `dh_{t-1}` and `dc_{t-1}`. Weight gradients
/// are `xᵀ·dpre`, `h_{t-1}ᵀ·dpre` and the column sums of `dpre`.
pub struct LstmGateGrads<T> {
    pub dpre: Vec<T>,
    pub x: Tensor<T>,
    pub h_prev: Tensor<T>,
    pub c_prev: Tensor<T>,
}

impl<T: Scalar> LstmCache<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.x
    }

    pub fn h_prev(&self) -> &Tensor<T> {
        &self.h_prev
    }
}

pub fn lstm_gate_backward<T: Scalar>(
    cache: &LstmCache<T>,
    params: LstmParams<'_, T>,
    dh: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<LstmGateGrads<T>> {
    let (d, h) = params.dims()?;
    if h != cache.hidden {
        return Err(Error::StaleTape("lstm cache from a different layer".into()));
    }
    let batch = cache.x.shape()[0];
    if dh.shape() != [batch, h] || dc.shape() != [batch, h] {
        return Err(Error::shape("lstm_step_backward", dh.shape(), &[batch, h]));
    }
    let g4 = 4 * h;
    let mut dpre = vec![T::zero(); batch * g4];
    let mut dc_prev = vec![T::zero(); batch * h];
    for b in 0..batch {
        let gate = &cache.gates[b * g4..(b + 1) * g4];
        let dp = &mut dpre[b * g4..(b + 1) * g4];
        for j in 0..h {
            let k = b * h + j;
            let (i, f, g, o) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
            let tc = cache.tanh_c[k];
            let dct = dc.data()[k] + dh.data()[k] * o * (T::one() - tc * tc);
            let d_o = dh.data()[k] * tc;
            let d_i = dct * g;
            let d_g = dct * i;
            let d_f = dct * cache.c_prev.data()[k];
            dc_prev[k] = dct * f;
            dp[j] = d_i * i * (T::one() - i);
            dp[h + j] = d_f * f * (T::one() - f);
            dp[2 * h + j] = d_g * (T::one() - g * g);
            dp[3 * h + j] = d_o * o * (T::one() - o);
        }
    }
    let mut dx = vec![T::zero(); batch * d];
    T::gemm(batch, g4, d, &dpre, false, params.w_x.data(), true, T::zero(), &mut dx);
    let mut dh_prev = vec![T::zero(); batch * h];
    T::gemm(batch, g4, h, &dpre, false, params.w_h.data(), true, T::zero(), &mut dh_prev);
    Ok(LstmGateGrads {
        dpre,
        x: Tensor::new(vec![batch, d], dx)?,
        h_prev: Tensor::new(vec![batch, h], dh_prev)?,
        c_prev: Tensor::new(vec![batch, h], dc_prev)?,
    })
}

/// Backward through one step given upstream `dh_t` and `dc_t`.
pub fn lstm_step_backward<T: Scalar>(
    cache: &LstmCache<T>,
    params: LstmParams<'_, T>,
    dh: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<LstmStepGrads<T>> {
    let (d, h) = params.dims()?;
    let g = lstm_gate_backward(cache, params, dh, dc)?;
    let batch = cache.x.shape()[0];
    let g4 = 4 * h;
    let mut w_x = vec![T::zero(); d * g4];
    T::gemm(d, batch, g4, cache.x.data(), true, &g.dpre, false, T::zero(), &mut w_x);
    let mut w_h = vec![T::zero(); h * g4];
    T::gemm(h, batch, g4, cache.h_prev.data(), true, &g.dpre, false, T::zero(), &mut w_h);
    let mut db = vec![T::zero(); g4];
    for row in g.dpre.chunks(g4) {
        for (a, &v) in db.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    Ok(LstmStepGrads {
        x: g.x,
        h_prev: g.h_prev,
        c_prev: g.c_prev,
        w_x: Tensor::new(vec![d, g4], w_x)?,
        w_h: Tensor::new(vec![h, g4], w_h)?,
        b: Tensor::new(vec![g4], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, relative_error, weighted_sum, STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_parameters_closed_form() {
        let (d, h) = (3, 2);
        let w_x = Tensor::<f64>::zeros(vec![d, 4 * h]);
        let w_h = Tensor::zeros(vec![h, 4 * h]);
        let b = Tensor::zeros(vec![4 * h]);
        let x = Tensor::full(vec![1, d], 0.7);
        let h0 = Tensor::full(vec![1, h], 0.3);
        let c0 = Tensor::new(vec![1, h], vec![1.0, -2.0]).unwrap();
        let (hn, cn, _) = lstm_step(&x, &h0, &c0, LstmParams { w_x: &w_x, w_h: &w_h, b: &b }).unwrap();
        assert_eq!(cn.data(), &[0.5, -1.0]);
        assert_eq!(hn.data(), &[0.5 * 0.5f64.tanh(), 0.5 * (-1.0f64).tanh()]);
    }

    #[test]
    fn saturated_gates_carry_the_cell() {
        let h = 3;
        let w_x = Tensor::<f64>::zeros(vec![2, 4 * h]);
        let w_h = Tensor::zeros(vec![h, 4 * h]);
        // input gate → 0, forget gate → 1
        let b = Tensor::from_fn(vec![4 * h], |i| match i / h {
            0 => -1e3,
            1 => 1e3,
            _ => 0.0,
        });
        let c0 = Tensor::new(vec![1, h], vec![0.4, -1.2, 3.0]).unwrap();
        let (_, cn, _) = lstm_step(
            &Tensor::full(vec![1, 2], 1.0),
            &Tensor::zeros(vec![1, h]),
            &c0,
            LstmParams { w_x: &w_x, w_h: &w_h, b: &b },
        )
        .unwrap();
        assert_eq!(cn, c0);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (bsz, d, h) = (2, 3, 4);
        let w_x = rand_t(&[d, 4 * h], &mut rng).cast::<f32>();
        let w_h = rand_t(&[h, 4 * h], &mut rng).cast::<f32>();
        let b = rand_t(&[4 * h], &mut rng).cast::<f32>();
        let x = rand_t(&[bsz, d], &mut rng).cast::<f32>();
        let h0 = rand_t(&[bsz, h], &mut rng).cast::<f32>();
        let c0 = rand_t(&[bsz, h], &mut rng).cast::<f32>();
        let (hn, cn, _) = lstm_step(&x, &h0, &c0, LstmParams { w_x: &w_x, w_h: &w_h, b: &b }).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for s in 0..bsz {
            for j in 0..h {
                let pre = |gate: usize| {
                    let col = gate * h + j;
                    let mut acc = b.data()[col] as f64;
                    for k in 0..d {
                        acc += x.data()[s * d + k] as f64 * w_x.data()[k * 4 * h + col] as f64;
                    }
                    for k in 0..h {
                        acc += h0.data()[s * h + k] as f64 * w_h.data()[k * 4 * h + col] as f64;
                    }
                    acc
                };
                let (i, f, g, o) = (sig(pre(0)), sig(pre(1)), pre(2).tanh(), sig(pre(3)));
                let c = f * c0.data()[s * h + j] as f64 + i * g;
                let hh = o * c.tanh();
                assert!((cn.data()[s * h + j] as f64 - c).abs() < 1e-6);
                assert!((hn.data()[s * h + j] as f64 - hh).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (bsz, d, h) = (2, 3, 2);
        let w_x = rand_t(&[d, 4 * h], &mut rng);
        let w_h = rand_t(&[h, 4 * h], &mut rng);
        let b = rand_t(&[4 * h], &mut rng);
        let x = rand_t(&[bsz, d], &mut rng);
        let h0 = rand_t(&[bsz, h], &mut rng);
        let c0 = rand_t(&[bsz, h], &mut rng);
        let rh = rand_t(&[bsz, h], &mut rng);
        let rc = rand_t(&[bsz, h], &mut rng);

        let f = |x: &Tensor<f64>, h0: &Tensor<f64>, c0: &Tensor<f64>, wx: &Tensor<f64>, wh: &Tensor<f64>, b: &Tensor<f64>| {
            let (hn, cn, _) = lstm_step(x, h0, c0, LstmParams { w_x: wx, w_h: wh, b }).unwrap();
            weighted_sum(&hn, &rh) + weighted_sum(&cn, &rc)
        };
        let (_, _, cache) = lstm_step(&x, &h0, &c0, LstmParams { w_x: &w_x, w_h: &w_h, b: &b }).unwrap();
        let g = lstm_step_backward(&cache, LstmParams { w_x: &w_x, w_h: &w_h, b: &b }, &rh, &rc).unwrap();
        let checks = [
            (g.x.data().to_vec(), numeric_gradient(&x, None, STEP, |t| f(t, &h0, &c0, &w_x, &w_h, &b))),
            (g.h_prev.data().to_vec(), numeric_gradient(&h0, None, STEP, |t| f(&x, t, &c0, &w_x, &w_h, &b))),
            (g.c_prev.data().to_vec(), numeric_gradient(&c0, None, STEP, |t| f(&x, &h0, t, &w_x, &w_h, &b))),
            (g.w_x.data().to_vec(), numeric_gradient(&w_x, None, STEP, |t| f(&x, &h0, &c0, t, &w_h, &b))),
            (g.w_h.data().to_vec(), numeric_gradient(&w_h, None, STEP, |t| f(&x, &h0, &c0, &w_x, t, &b))),
            (g.b.data().to_vec(), numeric_gradient(&b, None, STEP, |t| f(&x, &h0, &c0, &w_x, &w_h, t))),
        ];
        for (i, (a, n)) in checks.iter().enumerate() {
            let e = relative_error(a, n);
            assert!(e <= 1e-5, "check {i}: {e}");
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let w_x = Tensor::<f32>::zeros(vec![3, 8]);
        let w_h = Tensor::zeros(vec![2, 8]);
        let b = Tensor::zeros(vec![8]);
        let p = LstmParams { w_x: &w_x, w_h: &w_h, b: &b };
        assert!(lstm_step(&Tensor::zeros(vec![1, 4]), &Tensor::zeros(vec![1, 2]), &Tensor::zeros(vec![1, 2]), p).is_err());
        assert!(lstm_step(&Tensor::zeros(vec![1, 3]), &Tensor::zeros(vec![1, 3]), &Tensor::zeros(vec![1, 2]), p).is_err());
    }
}
