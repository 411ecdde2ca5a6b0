//! The audiovisual network: stream assembly, the training forward and
//! backward passes, and full-clip inference.

mod arch;

pub use arch::{Architecture, ChannelPlan, Init, ManifestEntry, Modality, StreamArch, Variant, TRAITS};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::Clip;
use crate::error::{Error, Result};
use crate::layers::batchnorm::{bn_backward, update_running, BatchStats, BnCache, MOMENTUM};
use crate::layers::residual::{bn_scoped, block_backward, block_forward, BlockTape};
use crate::layers::{
    conv_backward, conv_forward, gap_backward, global_average_pool, linear_backward, linear_forward, maxpool,
    maxpool_backward, relu, relu_backward, scaled_tanh, scaled_tanh_backward, MaxPoolIndices, Mode,
};
use crate::params::{is_trainable, Gradients, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Five trait scores in `[0, 1]`, in the order openness, agreeableness,
/// conscientiousness, neuroticism, extraversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraitVector(pub [f32; TRAITS]);

pub const TRAIT_NAMES: [&str; TRAITS] = [
    "openness",
    "agreeableness",
    "conscientiousness",
    "neuroticism",
    "extraversion",
];

impl TraitVector {
    pub fn new(values: [f32; TRAITS]) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("{} = {v} outside [0, 1]", TRAIT_NAMES[i])));
        }
        Ok(Self(values))
    }

    pub fn openness(&self) -> f32 {
        self.0[0]
    }
    pub fn agreeableness(&self) -> f32 {
        self.0[1]
    }
    pub fn conscientiousness(&self) -> f32 {
        self.0[2]
    }
    pub fn neuroticism(&self) -> f32 {
        self.0[3]
    }
    pub fn extraversion(&self) -> f32 {
        self.0[4]
    }

    pub fn values(&self) -> &[f32; TRAITS] {
        &self.0
    }
}

/// He-initialized parameters for `arch`; deterministic in `seed`.
pub fn build_network(arch: &Architecture, seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for entry in arch.manifest() {
        let t = init_tensor(&entry, &mut rng);
        params.insert(entry.name, t).expect("manifest names are unique");
    }
    params
}

pub(crate) fn init_tensor(entry: &ManifestEntry, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    match entry.init {
        Init::He { fan_in } => he_normal(entry.shape.clone(), fan_in, rng),
        Init::Zeros => Tensor::zeros(entry.shape.clone()),
        Init::Ones => Tensor::full(entry.shape.clone(), 1.0),
    }
}

/// Draws from Normal(0, sqrt(2 / fan_in)).
pub fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
}

struct StreamTape<T> {
    x: Tensor<T>,
    stem_bn: BnCache<T>,
    stem_act: Tensor<T>,
    pool: MaxPoolIndices,
    blocks: Vec<BlockTape<T>>,
    pre_gap_shape: Vec<usize>,
}

struct StreamOutput<T> {
    pooled: Tensor<T>,
    pre_gap_shape: Vec<usize>,
    tape: Option<StreamTape<T>>,
    stats: Vec<(String, BatchStats<T>)>,
}

fn stream_forward<T: Scalar>(
    arch: &StreamArch,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<StreamOutput<T>> {
    let p = arch.prefix();
    let stem_scope_name = format!("{p}.stem");
    let stem = params.scope(&stem_scope_name);
    let mut local_stats = Vec::new();
    let h = conv_forward(x, stem.get("conv.w")?, None, &arch.stem)?;
    let (n, stem_bn) = bn_scoped(&stem, "bn", &h, mode, &mut local_stats)?;
    let stem_act = relu(&n);
    let (mut a, pool) = maxpool(&stem_act, &arch.pool)?;
    let mut stats: Vec<(String, BatchStats<T>)> = local_stats
        .into_iter()
        .map(|(l, s)| (format!("{stem_scope_name}.{l}"), s))
        .collect();

    let mut blocks = Vec::new();
    for (name, spec) in &arch.blocks {
        let scope_name = format!("{p}.{name}");
        let out = block_forward(spec, params.scope(&scope_name), &a, mode)?;
        stats.extend(out.stats.into_iter().map(|(l, s)| (format!("{scope_name}.{l}"), s)));
        if let Some(t) = out.tape {
            blocks.push(t);
        }
        a = out.y;
    }
    let pre_gap_shape = a.shape().to_vec();
    let pooled = global_average_pool(&a)?;
    let tape = match mode {
        Mode::Train => Some(StreamTape {
            x: x.clone(),
            stem_bn: stem_bn.expect("train mode caches"),
            stem_act,
            pool,
            blocks,
            pre_gap_shape: pre_gap_shape.clone(),
        }),
        Mode::Eval => None,
    };
    Ok(StreamOutput {
        pooled,
        pre_gap_shape,
        tape,
        stats,
    })
}

fn stream_backward<T: Scalar>(
    arch: &StreamArch,
    params: &ParamSet<T>,
    tape: &StreamTape<T>,
    grad_pooled: &Tensor<T>,
    grads: &mut HashMap<String, Tensor<T>>,
) -> Result<()> {
    let p = arch.prefix();
    let mut g = gap_backward(&tape.pre_gap_shape, grad_pooled)?;
    for ((name, spec), bt) in arch.blocks.iter().zip(&tape.blocks).rev() {
        let scope_name = format!("{p}.{name}");
        let (dx, local) = block_backward(spec, params.scope(&scope_name), bt, &g)?;
        for (l, t) in local {
            grads.insert(format!("{scope_name}.{l}"), t);
        }
        g = dx;
    }
    let g = maxpool_backward(&tape.pool, &g)?;
    let g = relu_backward(&tape.stem_act, &g)?;
    let (g, dgamma, dbeta) = bn_backward(&tape.stem_bn, params.get(&format!("{p}.stem.bn.gamma"))?, &g)?;
    let c = conv_backward(&tape.x, params.get(&format!("{p}.stem.conv.w"))?, &arch.stem, &g, false)?;
    grads.insert(format!("{p}.stem.conv.w"), c.params["w"].clone());
    grads.insert(format!("{p}.stem.bn.gamma"), dgamma);
    grads.insert(format!("{p}.stem.bn.beta"), dbeta);
    Ok(())
}

/// Activations retained by [`forward_train`] for [`backward`].
pub struct Tape<T = f32> {
    generation: u64,
    outputs: usize,
    batch: usize,
    audio: StreamTape<T>,
    visual: StreamTape<T>,
    fused: Tensor<T>,
    z: Tensor<T>,
}

impl<T> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Spatial shape entering global pooling, `(audio, visual)`.
    pub fn pre_gap_shapes(&self) -> (&[usize], &[usize]) {
        (&self.audio.pre_gap_shape, &self.visual.pre_gap_shape)
    }
}

/// Output of a batched forward pass.
pub struct BatchOutput<T> {
    /// `(B, outputs)` scores in `(0, 1)`.
    pub scores: Tensor<T>,
    /// Concatenated pooled stream features `(B, fusion_inputs)`.
    pub features: Tensor<T>,
    pub audio_pre_gap: Vec<usize>,
    pub visual_pre_gap: Vec<usize>,
}

fn concat_features<T: Scalar>(a: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[ba, ca], &[bv, cv]) = (a.shape(), v.shape()) else {
        return Err(Error::shape("feature concat", a.shape(), v.shape()));
    };
    if ba != bv {
        return Err(Error::shape("feature concat", a.shape(), v.shape()));
    }
    let mut data = Vec::with_capacity(ba * (ca + cv));
    for b in 0..ba {
        data.extend_from_slice(&a.data()[b * ca..(b + 1) * ca]);
        data.extend_from_slice(&v.data()[b * cv..(b + 1) * cv]);
    }
    Tensor::new(vec![ba, ca + cv], data)
}

fn fuse<T: Scalar>(params: &ParamSet<T>, features: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let z = linear_forward(features, params.get("fusion.w")?, params.get("fusion.b")?)?;
    Ok((scaled_tanh(&z), z))
}

fn check_inputs<T: Scalar>(audio: &Tensor<T>, frames: &Tensor<T>) -> Result<usize> {
    let (&[ba, 1, _], &[bv, _, _, _]) = (audio.shape(), frames.shape()) else {
        return Err(Error::shape("network inputs (B,1,L) / (B,C,H,W)", audio.shape(), frames.shape()));
    };
    if ba != bv {
        return Err(Error::shape("network input batch", audio.shape(), frames.shape()));
    }
    Ok(ba)
}

fn apply_stats<T: Scalar>(params: &mut ParamSet<T>, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    for (name, s) in stats {
        update_running(params.get_mut(&format!("{name}.running_mean"))?, &s.mean, MOMENTUM);
        update_running(params.get_mut(&format!("{name}.running_var"))?, &s.var, MOMENTUM);
    }
    Ok(())
}

/// Train-mode forward on any valid input extents (batch ≥ 2). Updates the
/// batch-norm running statistics in `params`.
pub fn forward_batch_train<T: Scalar>(
    arch: &Architecture,
    params: &mut ParamSet<T>,
    audio: &Tensor<T>,
    frames: &Tensor<T>,
) -> Result<(BatchOutput<T>, Tape<T>)> {
    let batch = check_inputs(audio, frames)?;
    if batch < 2 {
        return Err(Error::invalid("training batches need at least 2 clips"));
    }
    let a = stream_forward(&arch.audio, params, audio, Mode::Train)?;
    let v = stream_forward(&arch.visual, params, frames, Mode::Train)?;
    let features = concat_features(&a.pooled, &v.pooled)?;
    let (scores, z) = fuse(params, &features)?;
    apply_stats(params, &a.stats)?;
    apply_stats(params, &v.stats)?;
    let tape = Tape {
        generation: params.generation(),
        outputs: arch.outputs,
        batch,
        audio: a.tape.expect("train mode"),
        visual: v.tape.expect("train mode"),
        fused: features.clone(),
        z,
    };
    Ok((
        BatchOutput {
            scores,
            features,
            audio_pre_gap: a.pre_gap_shape,
            visual_pre_gap: v.pre_gap_shape,
        },
        tape,
    ))
}

/// Eval-mode forward on a batch; reads running statistics, mutates nothing.
pub fn forward_batch_eval<T: Scalar>(
    arch: &Architecture,
    params: &ParamSet<T>,
    audio: &Tensor<T>,
    frames: &Tensor<T>,
) -> Result<BatchOutput<T>> {
    check_inputs(audio, frames)?;
    let a = stream_forward(&arch.audio, params, audio, Mode::Eval)?;
    let v = stream_forward(&arch.visual, params, frames, Mode::Eval)?;
    let features = concat_features(&a.pooled, &v.pooled)?;
    let (scores, _) = fuse(params, &features)?;
    Ok(BatchOutput {
        scores,
        features,
        audio_pre_gap: a.pre_gap_shape,
        visual_pre_gap: v.pre_gap_shape,
    })
}

/// Training forward on exact crops: audio `(B, 1, audio_crop)`, frames
/// `(B, 3, frame_crop, frame_crop)`.
pub fn forward_train<T: Scalar>(
    arch: &Architecture,
    params: &mut ParamSet<T>,
    audio_crop: &Tensor<T>,
    frame_crop: &Tensor<T>,
) -> Result<(Tensor<T>, Tape<T>)> {
    let b = audio_crop.shape().first().copied().unwrap_or(0);
    let want_a = [b, 1, arch.audio_crop];
    let want_v = [b, 3, arch.frame_crop, arch.frame_crop];
    if audio_crop.shape() != want_a {
        return Err(Error::shape("audio crop", audio_crop.shape(), &want_a));
    }
    if frame_crop.shape() != want_v {
        return Err(Error::shape("frame crop", frame_crop.shape(), &want_v));
    }
    let (out, tape) = forward_batch_train(arch, params, audio_crop, frame_crop)?;
    Ok((out.scores, tape))
}

/// Gradients of every trainable tensor, in manifest order.
pub fn backward<T: Scalar>(
    arch: &Architecture,
    params: &ParamSet<T>,
    tape: &Tape<T>,
    grad_out: &Tensor<T>,
) -> Result<Gradients<T>> {
    if tape.generation != params.generation() {
        return Err(Error::StaleTape(format!(
            "tape recorded at parameter generation {}, parameters are at {}",
            tape.generation,
            params.generation()
        )));
    }
    if tape.outputs != arch.outputs {
        return Err(Error::StaleTape("tape from a different architecture".into()));
    }
    if grad_out.shape() != [tape.batch, tape.outputs] {
        return Err(Error::shape("backward grad_out", grad_out.shape(), &[tape.batch, tape.outputs]));
    }
    let mut grads = HashMap::new();
    let dz = scaled_tanh_backward(&tape.z, grad_out)?;
    let lin = linear_backward(&tape.fused, params.get("fusion.w")?, &dz)?;
    grads.insert("fusion.w".to_string(), lin.params["w"].clone());
    grads.insert("fusion.b".to_string(), lin.params["b"].clone());

    let ca = arch.audio.out_channels();
    let cv = arch.visual.out_channels();
    let (mut da, mut dv) = (Vec::with_capacity(tape.batch * ca), Vec::with_capacity(tape.batch * cv));
    for row in lin.input.data().chunks(ca + cv) {
        da.extend_from_slice(&row[..ca]);
        dv.extend_from_slice(&row[ca..]);
    }
    stream_backward(&arch.audio, params, &tape.audio, &Tensor::new(vec![tape.batch, ca], da)?, &mut grads)?;
    stream_backward(&arch.visual, params, &tape.visual, &Tensor::new(vec![tape.batch, cv], dv)?, &mut grads)?;

    let mut out = Gradients::new();
    for entry in arch.manifest().into_iter().filter(|e| is_trainable(&e.name)) {
        let g = grads
            .remove(&entry.name)
            .ok_or_else(|| Error::StaleTape(format!("no gradient produced for {}", entry.name)))?;
        out.insert(entry.name, g)?;
    }
    Ok(out)
}

/// Inference options.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferOptions {
    /// Use every `frame_stride`-th frame; 1 uses all frames.
    pub frame_stride: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { frame_stride: 1 }
    }
}

/// Zero-pads audio symmetrically up to `min_len` samples.
pub fn pad_audio(samples: &[f32], min_len: usize) -> Vec<f32> {
    if samples.len() >= min_len {
        return samples.to_vec();
    }
    let total = min_len - samples.len();
    let left = total / 2;
    let mut out = vec![0.0; min_len];
    out[left..left + samples.len()].copy_from_slice(samples);
    out
}

/// Pooled auditory features `(C,)` of a whole waveform, eval mode.
pub fn audio_features(arch: &Architecture, params: &ParamSet<f32>, samples: &[f32]) -> Result<Vec<f32>> {
    if samples.is_empty() {
        return Err(Error::invalid("empty audio"));
    }
    let padded = pad_audio(samples, arch.min_audio_len());
    let len = padded.len();
    let x = Tensor::new(vec![1, 1, len], padded)?;
    Ok(stream_forward(&arch.audio, params, &x, Mode::Eval)?.pooled.into_data())
}

/// Pooled visual features `(C,)` of one frame `(3, H, W)` at native resolution.
pub fn frame_features(arch: &Architecture, params: &ParamSet<f32>, frame: &Tensor<f32>) -> Result<Vec<f32>> {
    let x = frame.reshape(std::iter::once(1).chain(frame.shape().iter().copied()).collect::<Vec<_>>())?;
    Ok(stream_forward(&arch.visual, params, &x, Mode::Eval)?.pooled.into_data())
}

/// Per-channel mean of equally sized vectors, independent of their order:
/// each channel's values are sorted before an f64 summation.
pub fn order_invariant_mean(rows: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = rows.first().ok_or_else(|| Error::invalid("mean of zero rows"))?;
    let width = first.len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::invalid("rows differ in width"));
    }
    let n = rows.len() as f64;
    Ok((0..width)
        .map(|c| {
            let mut col: Vec<f32> = rows.iter().map(|r| r[c]).collect();
            col.sort_by(f32::total_cmp);
            (col.iter().map(|&v| v as f64).sum::<f64>() / n) as f32
        })
        .collect())
}

/// Spatiotemporally pooled visual features over the selected frames.
pub fn clip_visual_features(
    arch: &Architecture,
    params: &ParamSet<f32>,
    clip: &Clip,
    frames: &[usize],
) -> Result<Vec<f32>> {
    if frames.is_empty() {
        return Err(Error::invalid("clip has no frames"));
    }
    let rows = frames
        .par_iter()
        .map(|&i| frame_features(arch, params, &clip.frame_tensor(i)?))
        .collect::<Result<Vec<_>>>()?;
    order_invariant_mean(&rows)
}

/// Fusion-layer input for a whole clip: auditory features of the entire
/// waveform followed by visual features pooled over frames.
pub fn clip_features(arch: &Architecture, params: &ParamSet<f32>, clip: &Clip, opts: InferOptions) -> Result<Vec<f32>> {
    if clip.frame_count() == 0 || clip.sample_count() == 0 {
        return Err(Error::invalid("empty clip"));
    }
    let stride = opts.frame_stride.max(1);
    let frames: Vec<usize> = (0..clip.frame_count()).step_by(stride).collect();
    let mut f = audio_features(arch, params, clip.audio())?;
    f.extend(clip_visual_features(arch, params, clip, &frames)?);
    Ok(f)
}

/// Applies the fusion layer to one feature vector.
pub fn head(params: &ParamSet<f32>, features: &[f32]) -> Result<Vec<f32>> {
    let x = Tensor::new(vec![1, features.len()], features.to_vec())?;
    Ok(fuse(params, &x)?.0.into_data())
}

/// Full-clip scores (any head width), eval mode.
pub fn predict(arch: &Architecture, params: &ParamSet<f32>, clip: &Clip, opts: InferOptions) -> Result<Vec<f32>> {
    head(params, &clip_features(arch, params, clip, opts)?)
}

/// Full-clip trait prediction for a five-trait network.
pub fn forward_infer(arch: &Architecture, params: &ParamSet<f32>, clip: &Clip, opts: InferOptions) -> Result<TraitVector> {
    if arch.outputs != TRAITS {
        return Err(Error::invalid(format!("network has {} outputs, not {TRAITS}", arch.outputs)));
    }
    let v = predict(arch, params, clip, opts)?;
    Ok(TraitVector(v.try_into().expect("five outputs")))
}

#[cfg(test)]
mod tests;
