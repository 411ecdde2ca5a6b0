//! Recurrent head over per-second audiovisual features: two LSTM layers
//! and a linear layer squashed into trait scores, trained with truncated
//! backpropagation through time.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Clip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::layers::{linear_forward, lstm_gate_backward, lstm_step, scaled_tanh, scaled_tanh_backward, LstmCache, LstmParams, Mode};
use crate::model::{self, he_normal, Architecture, TraitVector, TRAITS};
use crate::optim::{adam_step, AdamConfig, AdamState, LrSchedule};
use crate::params::{Gradients, ParamSet};
use crate::tensor::{Scalar, Tensor};
use crate::train::checkpoint::{read_container, rng_from_bytes, rng_to_bytes, write_container, Container};

pub const FRAMES_PER_SECOND: usize = crate::data::clip::FRAME_RATE;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RnnConfig {
    pub input: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub dropout: f64,
    /// Backpropagation is cut every this many steps.
    pub truncation: usize,
}

impl RnnConfig {
    /// Two layers of 512 units and five outputs over `input`-wide features.
    pub fn standard(input: usize) -> Self {
        Self {
            input,
            hidden: 512,
            outputs: TRAITS,
            dropout: 0.5,
            truncation: 15,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.outputs == 0 || self.truncation == 0 {
            return Err(Error::invalid(format!("degenerate recurrent head {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout rate {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, h, k) = (self.input, self.hidden, self.outputs);
        vec![
            ("lstm1.w_x", vec![d, 4 * h]),
            ("lstm1.w_h", vec![h, 4 * h]),
            ("lstm1.b", vec![4 * h]),
            ("lstm2.w_x", vec![h, 4 * h]),
            ("lstm2.w_h", vec![h, 4 * h]),
            ("lstm2.b", vec![4 * h]),
            ("out.w", vec![h, k]),
            ("out.b", vec![k]),
        ]
    }

    /// Reads the layer sizes off a parameter set; rate and truncation keep
    /// their standard values.
    pub fn detect<T: Scalar>(params: &ParamSet<T>) -> Result<Self> {
        let w = params.get("lstm1.w_x")?.shape().to_vec();
        let o = params.get("out.w")?.shape().to_vec();
        let (&[d, _], &[h, k]) = (w.as_slice(), o.as_slice()) else {
            return Err(Error::ManifestMismatch("recurrent head weights are not matrices".into()));
        };
        let cfg = Self {
            input: d,
            hidden: h,
            outputs: k,
            ..Self::standard(d)
        };
        cfg.check(params)?;
        Ok(cfg)
    }

    pub fn check<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        let shapes = self.shapes();
        if params.len() != shapes.len() {
            return Err(Error::ManifestMismatch(format!("expected {} head tensors, found {}", shapes.len(), params.len())));
        }
        for ((name, shape), (n, t)) in shapes.iter().zip(params.iter()) {
            if *name != n || shape.as_slice() != t.shape() {
                return Err(Error::ManifestMismatch(format!("expected {name} {shape:?}, found {n} {:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// He-normal weights, zero biases except a forget-gate bias of 1.
pub fn init_rnn(config: &RnnConfig, seed: u64) -> Result<ParamSet<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    let mut p = ParamSet::new();
    for (name, shape) in config.shapes() {
        let t = if name.ends_with(".b") {
            let mut b = Tensor::zeros(shape);
            if name.starts_with("lstm") {
                b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            }
            b
        } else {
            let fan_in = shape[0];
            he_normal(shape, fan_in, &mut rng)
        };
        p.insert(name, t)?;
    }
    Ok(p)
}

/// Hidden and cell states of both layers, each `1 × H`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnState<T = f32> {
    pub h1: Tensor<T>,
    pub c1: Tensor<T>,
    pub h2: Tensor<T>,
    pub c2: Tensor<T>,
}

impl<T: Scalar> RnnState<T> {
    pub fn zeros(hidden: usize) -> Self {
        let z = Tensor::zeros(vec![1, hidden]);
        Self {
            h1: z.clone(),
            c1: z.clone(),
            h2: z.clone(),
            c2: z,
        }
    }
}

/// Inverted-dropout multipliers (0 or `1/(1−rate)`) applied to each layer's
/// output at every step.
#[derive(Debug, Clone)]
pub struct DropoutMasks<T = f32> {
    pub layer1: Vec<Tensor<T>>,
    pub layer2: Vec<Tensor<T>>,
}

impl<T: Scalar> DropoutMasks<T> {
    pub fn draw(steps: usize, hidden: usize, rate: f64, rng: &mut impl Rng) -> Self {
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mut one = || Tensor::from_fn(vec![1, hidden], |_| if rng.gen_bool(rate) { T::zero() } else { keep });
        let layer1 = (0..steps).map(|_| one()).collect();
        let layer2 = (0..steps).map(|_| one()).collect();
        Self { layer1, layer2 }
    }
}

fn lstm<'a, T: Scalar>(p: &'a ParamSet<T>, layer: &str) -> Result<LstmParams<'a, T>> {
    Ok(LstmParams {
        w_x: p.get(&format!("{layer}.w_x"))?,
        w_h: p.get(&format!("{layer}.w_h"))?,
        b: p.get(&format!("{layer}.b"))?,
    })
}

struct StepTape<T> {
    l1: LstmCache<T>,
    l2: LstmCache<T>,
    u2: Tensor<T>,
    z: Tensor<T>,
}

struct SegmentRun<T> {
    outputs: Tensor<T>,
    tapes: Vec<StepTape<T>>,
    final_state: RnnState<T>,
}

fn run_segment<T: Scalar>(
    params: &ParamSet<T>,
    init: &RnnState<T>,
    inputs: &Tensor<T>,
    masks: Option<&DropoutMasks<T>>,
) -> Result<SegmentRun<T>> {
    let &[steps, d] = inputs.shape() else {
        return Err(Error::InvalidShape {
            shape: inputs.shape().to_vec(),
            reason: "feature sequence must be steps × features".into(),
        });
    };
    if let Some(m) = masks {
        if m.layer1.len() < steps || m.layer2.len() < steps {
            return Err(Error::invalid("fewer dropout masks than steps"));
        }
    }
    let (p1, p2) = (lstm(params, "lstm1")?, lstm(params, "lstm2")?);
    let (w, b) = (params.get("out.w")?, params.get("out.b")?);
    let mut state = init.clone();
    let mut tapes = Vec::with_capacity(steps);
    let mut outputs = Vec::with_capacity(steps * b.len());
    for t in 0..steps {
        let x = Tensor::new(vec![1, d], inputs.data()[t * d..(t + 1) * d].to_vec())?;
        let (h1, c1, l1) = lstm_step(&x, &state.h1, &state.c1, p1)?;
        let u1 = match masks {
            Some(m) => h1.mul(&m.layer1[t])?,
            None => h1.clone(),
        };
        let (h2, c2, l2) = lstm_step(&u1, &state.h2, &state.c2, p2)?;
        let u2 = match masks {
            Some(m) => h2.mul(&m.layer2[t])?,
            None => h2.clone(),
        };
        let z = linear_forward(&u2, w, b)?;
        outputs.extend_from_slice(scaled_tanh(&z).data());
        tapes.push(StepTape { l1, l2, u2, z });
        state = RnnState { h1, c1, h2, c2 };
    }
    Ok(SegmentRun {
        outputs: Tensor::new(vec![steps, b.len()], outputs)?,
        tapes,
        final_state: state,
    })
}

/// Per-step scores `(steps, outputs)` from zero initial states. Train mode
/// draws fresh dropout masks from `rng`.
pub fn rnn_forward<T: Scalar>(
    seq: &Tensor<T>,
    params: &ParamSet<T>,
    config: &RnnConfig,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>> {
    let steps = seq.shape().first().copied().unwrap_or(0);
    let masks = match (mode, rng) {
        (Mode::Train, Some(rng)) => Some(DropoutMasks::draw(steps, config.hidden, config.dropout, rng)),
        (Mode::Train, None) => return Err(Error::invalid("train mode needs a generator for dropout")),
        (Mode::Eval, _) => None,
    };
    Ok(run_segment(params, &RnnState::zeros(config.hidden), seq, masks.as_ref())?.outputs)
}

pub struct SegmentResult<T> {
    /// `Σ_t weight · Σ_k |y − target|` over the segment.
    pub loss: f64,
    pub grads: Gradients<T>,
    pub final_state: RnnState<T>,
}

/// Forward and backward over one truncated segment starting from `init`
/// (treated as a constant). Each step contributes `weight · Σ_k |y − target|`
/// to the loss; `targets` is `(steps, outputs)`.
pub fn bptt_segment<T: Scalar>(
    params: &ParamSet<T>,
    init: &RnnState<T>,
    inputs: &Tensor<T>,
    targets: &Tensor<T>,
    masks: Option<&DropoutMasks<T>>,
    weight: f64,
) -> Result<SegmentResult<T>> {
    let run = run_segment(params, init, inputs, masks)?;
    if targets.shape() != run.outputs.shape() {
        return Err(Error::shape("bptt targets", targets.shape(), run.outputs.shape()));
    }
    let (steps, k) = (run.outputs.shape()[0], run.outputs.shape()[1]);
    let hidden = init.h1.len();
    let (p1, p2) = (lstm(params, "lstm1")?, lstm(params, "lstm2")?);
    let w = params.get("out.w")?;
    let mut loss = 0.0;
    let zero = Tensor::<T>::zeros(vec![1, hidden]);
    let (mut dh1, mut dc1, mut dh2, mut dc2) = (zero.clone(), zero.clone(), zero.clone(), zero);
    // Per-step rows; weight gradients are one product over the segment.
    let mut dz_rows = vec![T::zero(); steps * k];
    let mut dpre1 = vec![T::zero(); steps * 4 * hidden];
    let mut dpre2 = vec![T::zero(); steps * 4 * hidden];
    for (t, tape) in run.tapes.iter().enumerate().rev() {
        let y = &run.outputs.data()[t * k..(t + 1) * k];
        let target = &targets.data()[t * k..(t + 1) * k];
        let dy: Vec<T> = y
            .iter()
            .zip(target)
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                loss += weight * d.abs();
                T::from_f64(weight * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 })
            })
            .collect();
        let dz = scaled_tanh_backward(&tape.z, &Tensor::new(vec![1, k], dy)?)?;
        let mut d_u2 = vec![T::zero(); hidden];
        T::gemm(1, k, hidden, dz.data(), false, w.data(), true, T::zero(), &mut d_u2);
        dz_rows[t * k..(t + 1) * k].copy_from_slice(dz.data());
        let mut d_h2 = Tensor::new(vec![1, hidden], d_u2)?;
        if let Some(m) = masks {
            d_h2 = d_h2.mul(&m.layer2[t])?;
        }
        d_h2.add_assign(&dh2)?;
        let g2 = lstm_gate_backward(&tape.l2, p2, &d_h2, &dc2)?;
        dpre2[t * 4 * hidden..(t + 1) * 4 * hidden].copy_from_slice(&g2.dpre);
        dh2 = g2.h_prev;
        dc2 = g2.c_prev;
        let mut d_h1 = match masks {
            Some(m) => g2.x.mul(&m.layer1[t])?,
            None => g2.x,
        };
        d_h1.add_assign(&dh1)?;
        let g1 = lstm_gate_backward(&tape.l1, p1, &d_h1, &dc1)?;
        dpre1[t * 4 * hidden..(t + 1) * 4 * hidden].copy_from_slice(&g1.dpre);
        dh1 = g1.h_prev;
        dc1 = g1.c_prev;
    }
    let stack = |f: &dyn Fn(&StepTape<T>) -> &Tensor<T>| -> Vec<T> {
        run.tapes.iter().flat_map(|tp| f(tp).data().iter().copied()).collect()
    };
    let mut grads = ParamSet::new();
    for (layer, dpre, xs, hs) in [
        ("lstm1", &dpre1, stack(&|tp| tp.l1.input()), stack(&|tp| tp.l1.h_prev())),
        ("lstm2", &dpre2, stack(&|tp| tp.l2.input()), stack(&|tp| tp.l2.h_prev())),
    ] {
        let g4 = 4 * hidden;
        let d = params.get(&format!("{layer}.w_x"))?.shape()[0];
        let mut w_x = vec![T::zero(); d * g4];
        T::gemm(d, steps, g4, &xs, true, dpre, false, T::zero(), &mut w_x);
        let mut w_h = vec![T::zero(); hidden * g4];
        T::gemm(hidden, steps, g4, &hs, true, dpre, false, T::zero(), &mut w_h);
        let b = column_sums(dpre, g4);
        grads.insert(format!("{layer}.w_x"), Tensor::new(vec![d, g4], w_x)?)?;
        grads.insert(format!("{layer}.w_h"), Tensor::new(vec![hidden, g4], w_h)?)?;
        grads.insert(format!("{layer}.b"), Tensor::new(vec![g4], b)?)?;
    }
    let us = stack(&|tp| &tp.u2);
    let mut w_out = vec![T::zero(); hidden * k];
    T::gemm(hidden, steps, k, &us, true, &dz_rows, false, T::zero(), &mut w_out);
    grads.insert("out.w", Tensor::new(vec![hidden, k], w_out)?)?;
    grads.insert("out.b", Tensor::new(vec![k], column_sums(&dz_rows, k))?)?;
    Ok(SegmentResult {
        loss,
        grads,
        final_state: run.final_state,
    })
}

fn column_sums<T: Scalar>(rows: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for row in rows.chunks(width) {
        for (a, &v) in out.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    out
}

/// Truncated-BPTT gradient of the sequence loss
/// `(1 / (steps · outputs)) Σ_t Σ_k |y − target|` at fixed parameters: the
/// sum of per-segment gradients, each segment starting from the previous
/// segment's final state as a constant.
pub fn tbptt_gradients<T: Scalar>(
    params: &ParamSet<T>,
    config: &RnnConfig,
    inputs: &Tensor<T>,
    targets: &Tensor<T>,
    masks: Option<&DropoutMasks<T>>,
) -> Result<(f64, Gradients<T>)> {
    let &[steps, d] = inputs.shape() else {
        return Err(Error::invalid("feature sequence must be steps × features"));
    };
    let k = config.outputs;
    let weight = 1.0 / (steps * k) as f64;
    let mut state = RnnState::zeros(config.hidden);
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for start in (0..steps).step_by(config.truncation) {
        let end = (start + config.truncation).min(steps);
        let x = Tensor::new(vec![end - start, d], inputs.data()[start * d..end * d].to_vec())?;
        let y = Tensor::new(vec![end - start, k], targets.data()[start * k..end * k].to_vec())?;
        let m = masks.map(|m| DropoutMasks {
            layer1: m.layer1[start..end].to_vec(),
            layer2: m.layer2[start..end].to_vec(),
        });
        let seg = bptt_segment(params, &state, &x, &y, m.as_ref(), weight)?;
        for (name, g) in seg.grads.iter() {
            total.get_mut(name)?.add_assign(g)?;
        }
        loss += seg.loss;
        state = seg.final_state;
    }
    Ok((loss, total))
}

/// A labelled feature sequence `(steps, features)`.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: String,
    pub features: Tensor<f32>,
    pub label: TraitVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnTrainConfig {
    pub epochs: usize,
    pub schedule: LrSchedule,
}

impl Default for RnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            schedule: LrSchedule::default(),
        }
    }
}

/// Trained head plus optimizer and generator state.
#[derive(Debug, Clone)]
pub struct RnnCheckpoint {
    pub epoch: u32,
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
    pub rng: ChaCha8Rng,
}

impl RnnCheckpoint {
    pub fn fresh(config: &RnnConfig, seed: u64) -> Result<Self> {
        let params = init_rnn(config, seed)?;
        let adam = AdamState::new(&params, AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            epoch: 0,
            params,
            adam,
            rng,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut optimizer = ParamSet::new();
        for (n, t) in self.adam.m.iter() {
            optimizer.insert(format!("adam.m.{n}"), t.clone())?;
        }
        for (n, t) in self.adam.v.iter() {
            optimizer.insert(format!("adam.v.{n}"), t.clone())?;
        }
        write_container(
            path,
            &Container {
                epoch: self.epoch,
                tensors: self.params.clone(),
                optimizer,
                step: self.adam.t,
                blob: rng_to_bytes(&self.rng),
            },
        )
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, RnnConfig)> {
        let c = read_container(path)?;
        let config = RnnConfig::detect(&c.tensors)?;
        let mut adam = AdamState::new(&c.tensors, AdamConfig::default());
        for (prefix, set) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
            for (n, t) in set.iter_mut() {
                let stored = c.optimizer.get(&format!("{prefix}{n}"))?;
                if stored.shape() != t.shape() {
                    return Err(Error::ManifestMismatch(format!("{prefix}{n} has shape {:?}", stored.shape())));
                }
                *t = stored.clone();
            }
        }
        adam.t = c.step;
        let rng = rng_from_bytes(&c.blob).ok_or_else(|| Error::ManifestMismatch("bad generator state".into()))?;
        Ok((
            Self {
                epoch: c.epoch,
                params: c.tensors,
                adam,
                rng,
            },
            config,
        ))
    }
}

/// Adam on truncated segments: every sequence starts from zero state, each
/// segment of `truncation` steps gets fresh dropout masks and one update
/// on its per-step mean MAE, and its final state is carried forward as a
/// constant. Returns per-epoch mean train-mode per-step MAE.
pub fn train_rnn(
    config: &RnnConfig,
    sequences: &[Sequence],
    train: &RnnTrainConfig,
    mut state: RnnCheckpoint,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(RnnCheckpoint, Vec<f64>)> {
    config.validate()?;
    config.check(&state.params)?;
    if sequences.is_empty() {
        return Err(Error::invalid("no feature sequences to train on"));
    }
    let k = config.outputs;
    let mut losses = Vec::new();
    while (state.epoch as usize) < train.epochs {
        let alpha = train.schedule.alpha_for_epoch(state.epoch as usize);
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut state.rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for &i in &order {
            let seq = &sequences[i];
            let &[len, d] = seq.features.shape() else {
                return Err(Error::invalid(format!("{}: features must be steps × features", seq.id)));
            };
            if d != config.input {
                return Err(Error::shape("rnn features", seq.features.shape(), &[len, config.input]));
            }
            let target: Vec<f32> = seq.label.0[..k].to_vec();
            let mut carried = RnnState::zeros(config.hidden);
            for start in (0..len).step_by(config.truncation) {
                let end = (start + config.truncation).min(len);
                let n = end - start;
                let x = Tensor::new(vec![n, d], seq.features.data()[start * d..end * d].to_vec())?;
                let y = Tensor::new(vec![n, k], target.iter().copied().cycle().take(n * k).collect())?;
                let masks = DropoutMasks::draw(n, config.hidden, config.dropout, &mut state.rng);
                let seg = bptt_segment(&state.params, &carried, &x, &y, Some(&masks), 1.0 / (n * k) as f64)?;
                if !seg.loss.is_finite() {
                    return Err(Error::NonFinite {
                        name: format!("recurrent loss on {}", seq.id),
                    });
                }
                adam_step(&mut state.params, &seg.grads, &mut state.adam, alpha)?;
                total += seg.loss * n as f64;
                steps += n;
                carried = seg.final_state;
            }
        }
        let mae = total / steps.max(1) as f64;
        on_epoch(state.epoch as usize, mae);
        losses.push(mae);
        state.epoch += 1;
    }
    Ok((state, losses))
}

/// Eval-mode per-step MAE averaged over all steps of all sequences.
pub fn rnn_mae(config: &RnnConfig, params: &ParamSet<f32>, sequences: &[Sequence]) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for s in sequences {
        let y = rnn_forward(&s.features, params, config, Mode::Eval, None)?;
        for row in y.data().chunks(config.outputs) {
            total += row.iter().zip(s.label.values()).map(|(&p, &t)| (p as f64 - t as f64).abs()).sum::<f64>();
            n += config.outputs;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Time-average of per-step outputs `(steps, outputs)`.
pub fn average_over_time(per_step: &Tensor<f32>) -> Vec<f32> {
    let &[steps, k] = per_step.shape() else {
        return Vec::new();
    };
    (0..k)
        .map(|j| ((0..steps).map(|t| per_step.data()[t * k + j] as f64).sum::<f64>() / steps as f64) as f32)
        .collect()
}

/// Per-second features of a clip: row `t` concatenates the pooled auditory
/// features of samples `[16000t, 16000(t+1))` and the visual features pooled
/// over that second's frames, both in eval mode.
pub fn extract_features(arch: &Architecture, params: &ParamSet<f32>, clip: &Clip) -> Result<Tensor<f32>> {
    let seconds = clip.sample_count() / SAMPLE_RATE;
    if seconds == 0 {
        return Err(Error::invalid(format!("clip of {:.3} s is shorter than one second", clip.seconds())));
    }
    let rows = (0..seconds)
        .into_par_iter()
        .map(|t| {
            let audio = &clip.audio()[t * SAMPLE_RATE..(t + 1) * SAMPLE_RATE];
            let first = t * FRAMES_PER_SECOND;
            let last = ((t + 1) * FRAMES_PER_SECOND).min(clip.frame_count());
            if first >= last {
                return Err(Error::invalid(format!("second {t} has no frames")));
            }
            let frames: Vec<usize> = (first..last).collect();
            let mut row = model::audio_features(arch, params, audio)?;
            row.extend(model::clip_visual_features(arch, params, clip, &frames)?);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let width = rows[0].len();
    Tensor::new(vec![seconds, width], rows.concat())
}

/// Time-averaged head output for a clip.
pub fn predict_rnn(
    arch: &Architecture,
    base: &ParamSet<f32>,
    config: &RnnConfig,
    head: &ParamSet<f32>,
    clip: &Clip,
) -> Result<Vec<f32>> {
    let feats = extract_features(arch, base, clip)?;
    Ok(average_over_time(&rnn_forward(&feats, head, config, Mode::Eval, None)?))
}

/// Writes `feat.<clip_id>` tensors into one container file.
pub fn save_feature_cache(path: &std::path::Path, features: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut tensors = ParamSet::new();
    for (id, t) in features {
        tensors.insert(format!("feat.{id}"), t.clone())?;
    }
    write_container(
        path,
        &Container {
            epoch: 0,
            tensors,
            optimizer: ParamSet::new(),
            step: 0,
            blob: Vec::new(),
        },
    )
}

pub fn load_feature_cache(path: &std::path::Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let c = read_container(path)?;
    c.tensors
        .iter()
        .map(|(n, t)| {
            n.strip_prefix("feat.")
                .map(|id| (id.to_string(), t.clone()))
                .ok_or_else(|| Error::ManifestMismatch(format!("{n} is not a feature tensor")))
        })
        .collect()
}

#[cfg(test)]
mod tests;
