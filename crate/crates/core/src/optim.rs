//! Mean absolute error, Adam and the step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{is_trainable, Gradients, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Mean of `|pred − target|` over all entries, and its subgradient
/// `sign(pred − target) / n` with `sign(0) = 0`.
pub fn mae_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mae_loss", pred.shape(), target.shape()));
    }
    if !pred.all_finite() || !target.all_finite() {
        return Err(Error::NonFinite {
            name: "mae_loss input".into(),
        });
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.as_f64() - t.as_f64();
            total += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            T::from_f64(sign / n)
        })
        .collect();
    Ok((total / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let mut m = ParamSet::new();
        for (n, p) in params.iter().filter(|(n, _)| is_trainable(n)) {
            m.insert(n, Tensor::zeros(p.shape().to_vec())).expect("unique names");
        }
        Self {
            v: m.clone(),
            m,
            t: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update at step size `alpha`. Every trainable
/// parameter needs a gradient; nothing is modified if any gradient is
/// missing, misshapen or non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    alpha: f64,
) -> Result<()> {
    for (name, m) in state.m.iter() {
        let g = grads
            .get(name)
            .map_err(|_| Error::ManifestMismatch(format!("no gradient for {name}")))?;
        if g.shape() != m.shape() {
            return Err(Error::shape("adam_step", g.shape(), m.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                name: format!("gradient of {name}"),
            });
        }
    }
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
        ..
    } = state.config;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    let names: Vec<String> = state.m.names().map(str::to_string).collect();
    for name in names {
        let g = grads.get(&name)?;
        let m = state.m.get_mut(&name)?;
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = T::from_f64(beta1 * mi.as_f64() + (1.0 - beta1) * gi.as_f64());
        }
        let v = state.v.get_mut(&name)?;
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            let gi = gi.as_f64();
            *vi = T::from_f64(beta2 * vi.as_f64() + (1.0 - beta2) * gi * gi);
        }
        let (m, v) = (state.m.get(&name)?.clone(), state.v.get(&name)?.clone());
        let p = params.get_mut(&name)?;
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi.as_f64() / c1;
            let v_hat = vi.as_f64() / c2;
            *pi = T::from_f64(pi.as_f64() - alpha * m_hat / (v_hat.sqrt() + epsilon));
        }
    }
    params.bump_generation();
    Ok(())
}

/// `initial / factor^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial_alpha: f64,
    pub decay_factor: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial_alpha: 2e-4,
            decay_factor: 10.0,
            period: 300,
        }
    }
}

impl LrSchedule {
    pub fn alpha_for_epoch(&self, epoch: usize) -> f64 {
        self.initial_alpha / self.decay_factor.powi((epoch / self.period.max(1)) as i32)
    }
}

/// The default schedule evaluated at `epoch`.
pub fn alpha_for_epoch(epoch: usize) -> f64 {
    LrSchedule::default().alpha_for_epoch(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(name: &str, values: Vec<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::new(vec![values.len()], values).unwrap()).unwrap();
        p
    }

    #[test]
    fn mae_examples() {
        let p = Tensor::<f64>::full(vec![1, 5], 0.5);
        let t = Tensor::new(vec![1, 5], vec![0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let (loss, g) = mae_loss(&p, &t).unwrap();
        assert!((loss - 0.26).abs() < 1e-12);
        assert_eq!(g.data(), &[0.2, 0.2, -0.2, -0.2, -0.2]);
        let (swapped, _) = mae_loss(&t, &p).unwrap();
        assert_eq!(loss, swapped);
        let (zero, g0) = mae_loss(&t, &t).unwrap();
        assert_eq!(zero, 0.0);
        assert!(g0.data().iter().all(|&v| v == 0.0));
        assert!(mae_loss(&p, &Tensor::zeros(vec![5])).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one("w", vec![1.0, -2.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &one("w", vec![0.0, 0.0]), &mut s, 2e-4).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_alpha() {
        let mut p = one("w", vec![0.0, 0.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &one("w", vec![3.0, -0.5]), &mut s, 2e-4).unwrap();
        let d = p.get("w").unwrap().data();
        assert!((d[0] + 2e-4).abs() < 1e-11, "{}", d[0]);
        assert!((d[1] - 2e-4).abs() < 1e-11, "{}", d[1]);
    }

    /// Scalar Adam written out independently.
    fn scalar_adam(theta0: f64, steps: usize, grad: impl Fn(f64) -> f64) -> f64 {
        let (a, b1, b2, eps) = (2e-4, 0.5, 0.999, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for t in 1..=steps {
            let g = grad(th);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t as i32));
            let vh = v / (1.0 - f64::powi(b2, t as i32));
            th -= a * mh / (vh.sqrt() + eps);
        }
        th
    }

    #[test]
    fn hundred_steps_on_quadratic_match_oracle() {
        let grad = |x: f64| 2.0 * (x - 0.3);
        let mut p = one("x", vec![1.7]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        for _ in 0..100 {
            let x = p.get("x").unwrap().data()[0];
            adam_step(&mut p, &one("x", vec![grad(x)]), &mut s, 2e-4).unwrap();
        }
        let want = scalar_adam(1.7, 100, grad);
        assert!((p.get("x").unwrap().data()[0] - want).abs() <= 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one("fusion.w", vec![0.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        match adam_step(&mut p, &one("fusion.w", vec![f64::NAN]), &mut s, 2e-4) {
            Err(Error::NonFinite { name }) => assert!(name.contains("fusion.w")),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.t, 0);
    }

    #[test]
    fn running_stats_are_not_optimized() {
        let mut p = one("bn.gamma", vec![1.0]);
        p.insert("bn.running_mean", Tensor::zeros(vec![1])).unwrap();
        let s = AdamState::new(&p, AdamConfig::default());
        assert_eq!(s.m.names().collect::<Vec<_>>(), vec!["bn.gamma"]);
    }

    #[test]
    fn schedule() {
        assert_eq!(alpha_for_epoch(0), 2e-4);
        assert_eq!(alpha_for_epoch(299), 2e-4);
        assert_eq!(alpha_for_epoch(300), 2e-5);
        assert_eq!(alpha_for_epoch(600), 2e-6);
        assert_eq!(alpha_for_epoch(899), 2e-4 / 100.0);
        for e in 0..2000 {
            assert!(alpha_for_epoch(e + 1) <= alpha_for_epoch(e));
        }
    }

    proptest! {
        #[test]
        fn update_is_bounded(g in proptest::collection::vec(-1e3f64..1e3, 1..8), steps in 1usize..20) {
            let n = g.len();
            let mut p = one("w", vec![0.0; n]);
            let mut s = AdamState::new(&p, AdamConfig::default());
            for k in 0..steps {
                let before = p.get("w").unwrap().clone();
                let gk: Vec<f64> = g.iter().map(|v| v * (k as f64 + 1.0).sin()).collect();
                adam_step(&mut p, &one("w", gk), &mut s, 2e-4).unwrap();
                let after = p.get("w").unwrap();
                for (a, b) in after.data().iter().zip(before.data()) {
                    prop_assert!((a - b).abs() <= 10.0 * 2e-4);
                }
            }
        }

        #[test]
        fn permutation_equivariant(g in proptest::collection::vec(-5f64..5.0, 2..8)) {
            let n = g.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            let init: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
            let mut a = one("w", init.clone());
            let mut b = one("w", perm.iter().map(|&i| init[i]).collect());
            let mut sa = AdamState::new(&a, AdamConfig::default());
            let mut sb = AdamState::new(&b, AdamConfig::default());
            adam_step(&mut a, &one("w", g.clone()), &mut sa, 2e-4).unwrap();
            adam_step(&mut b, &one("w", perm.iter().map(|&i| g[i]).collect()), &mut sb, 2e-4).unwrap();
            let (da, db) = (a.get("w").unwrap().data(), b.get("w").unwrap().data());
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(db[k].to_bits(), da[i].to_bits());
            }
        }
    }
}
