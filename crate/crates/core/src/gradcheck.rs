//! Central finite differences in 64-bit precision.
//!
//! Only forward evaluations are used here, so the estimates stay independent
//! of every analytic backward pass they are compared against.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::batchnorm::{bn_backward, bn_train_forward, EPSILON};
use crate::layers::residual::{block_backward, block_forward};
use crate::layers::{
    conv_backward, conv_forward, gap_backward, global_average_pool, linear_backward, linear_forward, lstm_step,
    lstm_step_backward, maxpool, maxpool_backward, scaled_tanh, scaled_tanh_backward, BlockSpec, ConvSpec,
    LstmParams, Mode, Window,
};
use crate::model::{self, Architecture};
use crate::params::{is_trainable, ParamSet};
use crate::tensor::Tensor;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "relative_error: length mismatch");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let denom = norm(analytic).max(norm(numeric));
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Central-difference gradient of `f` at `x` for the listed coordinates
/// (all coordinates when `coords` is `None`).
pub fn numeric_gradient(
    x: &Tensor<f64>,
    coords: Option<&[usize]>,
    step: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - step;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `Σ weights ⊙ y`: a smooth scalar loss whose gradient w.r.t. `y` is `weights`.
pub fn weighted_sum(y: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Tolerance for single layers.
pub const LAYER_TOLERANCE: f64 = 1e-5;
/// Tolerance for the composed miniature network.
pub const NETWORK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Largest relative error over `inputs`, where `analytic[i]` is the claimed
/// gradient of `loss` with respect to `inputs[i]`.
fn compare(inputs: &[Tensor<f64>], analytic: &[Tensor<f64>], loss: impl Fn(&[Tensor<f64>]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut probe = inputs.to_vec();
        let n = numeric_gradient(&inputs[i], None, STEP, |t| {
            probe[i] = t.clone();
            loss(&probe)
        });
        worst = worst.max(relative_error(a.data(), &n));
    }
    worst
}

fn conv_check(x_shape: &[usize], spec: ConvSpec, rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = random(x_shape, rng);
    let w = random(&spec.weight_shape(), rng);
    let b = random(&[spec.out_channels], rng);
    let y = conv_forward(&x, &w, Some(&b), &spec)?;
    let up = random(y.shape(), rng);
    let g = conv_backward(&x, &w, &spec, &up, true)?;
    Ok(compare(
        &[x, w, b],
        &[g.input.clone(), g.param("w").clone(), g.param("b").clone()],
        |t| weighted_sum(&conv_forward(&t[0], &t[1], Some(&t[2]), &spec).unwrap(), &up),
    ))
}

fn batchnorm_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = random(&[4, 3, 5], rng);
    let gamma = random(&[3], rng);
    let beta = random(&[3], rng);
    let (y, cache, _) = bn_train_forward(&x, &gamma, &beta, EPSILON)?;
    let up = random(y.shape(), rng);
    let (dx, dg, db) = bn_backward(&cache, &gamma, &up)?;
    Ok(compare(&[x, gamma, beta], &[dx, dg, db], |t| {
        weighted_sum(&bn_train_forward(&t[0], &t[1], &t[2], EPSILON).unwrap().0, &up)
    }))
}

fn maxpool_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = random(&[2, 2, 7, 6], rng);
    let window = Window::square(3, 2, 1);
    let (y, idx) = maxpool(&x, &window)?;
    let up = random(y.shape(), rng);
    let dx = maxpool_backward(&idx, &up)?;
    Ok(compare(&[x], &[dx], |t| weighted_sum(&maxpool(&t[0], &window).unwrap().0, &up)))
}

fn gap_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = random(&[2, 3, 4, 5], rng);
    let up = random(&[2, 3], rng);
    let dx = gap_backward(x.shape(), &up)?;
    Ok(compare(&[x], &[dx], |t| weighted_sum(&global_average_pool(&t[0]).unwrap(), &up)))
}

fn linear_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = random(&[3, 6], rng);
    let w = random(&[6, 4], rng);
    let b = random(&[4], rng);
    let up = random(&[3, 4], rng);
    let g = linear_backward(&x, &w, &up)?;
    Ok(compare(
        &[x, w, b],
        &[g.input.clone(), g.param("w").clone(), g.param("b").clone()],
        |t| weighted_sum(&linear_forward(&t[0], &t[1], &t[2]).unwrap(), &up),
    ))
}

fn scaled_tanh_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let z = random(&[3, 5], rng).scale(3.0);
    let up = random(&[3, 5], rng);
    let dz = scaled_tanh_backward(&z, &up)?;
    Ok(compare(&[z], &[dz], |t| weighted_sum(&scaled_tanh(&t[0]), &up)))
}

fn block_check(spec: BlockSpec, x_shape: &[usize], rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut params = ParamSet::new();
    for (name, shape) in spec.param_shapes() {
        let t = if name.ends_with(".running_var") {
            Tensor::full(shape, 1.0)
        } else if name.ends_with(".gamma") {
            Tensor::from_fn(shape, |_| rng.gen_range(0.5..1.5))
        } else {
            random(&shape, rng)
        };
        params.insert(name, t)?;
    }
    let x = random(x_shape, rng);
    let out = block_forward(&spec, params.scope(""), &x, Mode::Train)?;
    let up = random(out.y.shape(), rng);
    let (dx, grads) = block_backward(&spec, params.scope(""), out.tape.as_ref().expect("train tape"), &up)?;
    let names: Vec<String> = grads.iter().map(|(n, _)| n.clone()).collect();
    let mut inputs = vec![x];
    let mut analytic = vec![dx];
    for (n, g) in grads {
        inputs.push(params.get(&n)?.clone());
        analytic.push(g);
    }
    Ok(compare(&inputs, &analytic, |t| {
        let mut p = params.clone();
        for (n, v) in names.iter().zip(&t[1..]) {
            *p.get_mut(n).unwrap() = v.clone();
        }
        weighted_sum(&block_forward(&spec, p.scope(""), &t[0], Mode::Train).unwrap().y, &up)
    }))
}

fn lstm_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, d, h) = (2, 3, 4);
    let x = random(&[b, d], rng);
    let hp = random(&[b, h], rng);
    let cp = random(&[b, h], rng);
    let wx = random(&[d, 4 * h], rng);
    let wh = random(&[h, 4 * h], rng);
    let bias = random(&[4 * h], rng);
    let (uh, uc) = (random(&[b, h], rng), random(&[b, h], rng));
    let p = LstmParams { w_x: &wx, w_h: &wh, b: &bias };
    let (_, _, cache) = lstm_step(&x, &hp, &cp, p)?;
    let g = lstm_step_backward(&cache, p, &uh, &uc)?;
    Ok(compare(
        &[x, hp, cp, wx.clone(), wh.clone(), bias.clone()],
        &[g.x, g.h_prev, g.c_prev, g.w_x, g.w_h, g.b],
        |t| {
            let p = LstmParams { w_x: &t[3], w_h: &t[4], b: &t[5] };
            let (hn, cn, _) = lstm_step(&t[0], &t[1], &t[2], p).unwrap();
            weighted_sum(&hn, &uh) + weighted_sum(&cn, &uc)
        },
    ))
}

/// Per-tensor relative errors of the full miniature network (batch 3,
/// audio 1024, frames 16×16) against central differences on up to
/// `coords_per_tensor` sampled coordinates of every trainable tensor.
pub fn network_gradcheck(seed: u64, coords_per_tensor: usize) -> Result<Vec<(String, f64)>> {
    let arch = Architecture::mini();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamSet<f64> = model::build_network(&arch, seed).cast();
    for (name, t) in params.iter_mut() {
        if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        } else if name.ends_with(".beta") || name == "fusion.b" {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let batch = 3;
    let audio = Tensor::from_fn(vec![batch, 1, 1024], |_| rng.gen_range(-1.0..1.0));
    let frames = Tensor::from_fn(vec![batch, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
    let up = random(&[batch, arch.outputs], &mut rng);

    let loss = |p: &ParamSet<f64>| {
        let mut p = p.clone();
        let (out, _) = model::forward_batch_train(&arch, &mut p, &audio, &frames).unwrap();
        weighted_sum(&out.scores, &up)
    };
    let mut work = params.clone();
    let (_, tape) = model::forward_batch_train(&arch, &mut work, &audio, &frames)?;
    let grads = model::backward(&arch, &work, &tape, &up)?;

    let mut report = Vec::new();
    for (name, g) in grads.iter() {
        debug_assert!(is_trainable(name));
        let n = g.len();
        let coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let base = params.get(name)?.clone();
        let numeric = numeric_gradient(&base, Some(&coords), STEP, |t| {
            *params.get_mut(name).unwrap() = t.clone();
            loss(&params)
        });
        *params.get_mut(name)? = base;
        let analytic: Vec<f64> = coords.iter().map(|&i| g.data()[i]).collect();
        report.push((name.to_string(), relative_error(&analytic, &numeric)));
    }
    Ok(report)
}

/// Every layer check plus the composed miniature network.
pub fn suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = |name: &str, err: f64| CheckResult {
        name: name.to_string(),
        max_relative_error: err,
        tolerance: LAYER_TOLERANCE,
    };
    let mut out = vec![
        layer("conv1d", conv_check(&[2, 2, 23], ConvSpec::d1(2, 3, 9, 4, 4), &mut rng)?),
        layer("conv2d", conv_check(&[2, 2, 6, 5], ConvSpec::d2(2, 3, 3, 2, 1), &mut rng)?),
        layer("batchnorm", batchnorm_check(&mut rng)?),
        layer("maxpool", maxpool_check(&mut rng)?),
        layer("global_average_pool", gap_check(&mut rng)?),
        layer("linear", linear_check(&mut rng)?),
        layer("scaled_tanh", scaled_tanh_check(&mut rng)?),
        layer(
            "residual_identity_2d",
            block_check(BlockSpec::d2(3, 3, 3, 1, 1, false)?, &[2, 3, 5, 5], &mut rng)?,
        ),
        layer(
            "residual_projection_2d",
            block_check(BlockSpec::d2(2, 4, 3, 2, 1, true)?, &[2, 2, 6, 6], &mut rng)?,
        ),
        layer(
            "residual_projection_1d",
            block_check(BlockSpec::d1(2, 3, 9, 4, 4, true)?, &[2, 2, 20], &mut rng)?,
        ),
        layer("lstm_step", lstm_check(&mut rng)?),
    ];
    let net = network_gradcheck(seed, 16)?;
    let worst = net.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    out.push(CheckResult {
        name: "network_mini".into(),
        max_relative_error: worst,
        tolerance: NETWORK_TOLERANCE,
    });
    Ok(out)
}
