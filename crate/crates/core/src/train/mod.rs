//! The training loop, evaluation, per-trait fine-tuning and checkpoints.

pub mod checkpoint;
mod eval;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use eval::{evaluate, evaluate_clips, evaluate_crops, EvalReport, Prediction};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{apply_frame_crop, crop_audio, draw_frame_crop, write_atomic, Clip};
use crate::error::{Error, Result};
use crate::model::{self, build_network, Architecture, TRAITS};
use crate::optim::{adam_step, mae_loss, AdamConfig, AdamState, LrSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total epochs; a resumed run continues up to this count.
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Write `epoch-NNNN.ckpt` every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
    /// Where checkpoints and `loss.csv` go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 900,
            batch_size: 32,
            schedule: LrSchedule::default(),
            seed: 0,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2 for batch normalization"));
        }
        Ok(())
    }
}

/// Which label columns the network regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    AllTraits,
    Trait(usize),
}

impl Target {
    fn width(self) -> usize {
        match self {
            Target::AllTraits => TRAITS,
            Target::Trait(_) => 1,
        }
    }

    fn pick(self, label: &[f32; TRAITS]) -> Vec<f32> {
        match self {
            Target::AllTraits => label.to_vec(),
            Target::Trait(k) => vec![label[k]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub alpha: f64,
    pub train_mae: f64,
}

/// A fresh run: He-initialized parameters, zero moments, seeded generator.
pub fn fresh_checkpoint(arch: &Architecture, seed: u64) -> Checkpoint {
    let params = build_network(arch, seed);
    let adam = AdamState::new(&params, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Checkpoint {
        epoch: 0,
        params,
        adam,
        rng,
    }
}

fn batch_tensors(
    arch: &Architecture,
    clips: &[&Clip],
    target: Target,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let b = clips.len();
    let mut audio = Vec::with_capacity(b * arch.audio_crop);
    let mut frames = Vec::with_capacity(b * 3 * arch.frame_crop * arch.frame_crop);
    let mut labels = Vec::with_capacity(b * target.width());
    for clip in clips {
        let label = clip.label.ok_or_else(|| Error::invalid("training clip has no label"))?;
        audio.extend(crop_audio(clip.audio(), arch.audio_crop, rng));
        let c = draw_frame_crop(clip, arch.frame_crop, rng)?;
        frames.extend(apply_frame_crop(clip, arch.frame_crop, c)?);
        labels.extend(target.pick(label.values()));
    }
    Ok((
        Tensor::new(vec![b, 1, arch.audio_crop], audio)?,
        Tensor::new(vec![b, 3, arch.frame_crop, arch.frame_crop], frames)?,
        Tensor::new(vec![b, target.width()], labels)?,
    ))
}

/// One pass over `clips`: seeded shuffle, then per mini-batch fresh crops,
/// forward, MAE, backward and an Adam step. A trailing batch of one clip is
/// dropped. Returns the sample-weighted mean training MAE.
pub fn train_epoch(
    arch: &Architecture,
    state: &mut Checkpoint,
    clips: &[Clip],
    config: &TrainConfig,
    target: Target,
) -> Result<EpochLoss> {
    if arch.outputs != target.width() {
        return Err(Error::invalid(format!(
            "network has {} outputs but the target has {}",
            arch.outputs,
            target.width()
        )));
    }
    let epoch = state.epoch as usize;
    let alpha = config.schedule.alpha_for_epoch(epoch);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.shuffle(&mut state.rng);
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in order.chunks(config.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let batch: Vec<&Clip> = chunk.iter().map(|&i| &clips[i]).collect();
        let (audio, frames, labels) = batch_tensors(arch, &batch, target, &mut state.rng)?;
        let (pred, tape) = model::forward_train(arch, &mut state.params, &audio, &frames)?;
        let (loss, grad) = mae_loss(&pred, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                name: format!("training loss at epoch {epoch}"),
            });
        }
        let grads = model::backward(arch, &state.params, &tape, &grad)?;
        adam_step(&mut state.params, &grads, &mut state.adam, alpha)?;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    if count == 0 {
        return Err(Error::invalid("no mini-batch of at least 2 clips"));
    }
    state.epoch += 1;
    Ok(EpochLoss {
        epoch,
        alpha,
        train_mae: total / count as f64,
    })
}

pub fn loss_log_csv(losses: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,alpha,train_mae\n");
    for l in losses {
        let _ = writeln!(s, "{},{:e},{:.9}", l.epoch, l.alpha, l.train_mae);
    }
    s
}

/// Reads rows of an existing loss log with epoch below `before`.
pub fn read_loss_log(path: &Path, before: usize) -> Result<Vec<EpochLoss>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let parse = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok());
        let (Some(e), Some(a), Some(m)) = (parse(0), parse(1), parse(2)) else {
            return Err(Error::invalid(format!("{}: malformed loss log row", path.display())));
        };
        if (e as usize) < before {
            out.push(EpochLoss {
                epoch: e as usize,
                alpha: a,
                train_mae: m,
            });
        }
    }
    Ok(out)
}

/// Trains from `state` until `config.epochs` epochs are complete.
///
/// With an output directory, `loss.csv` is rewritten after every epoch,
/// `epoch-NNNN.ckpt` at the configured cadence and `final.ckpt` at the end.
/// A non-finite loss saves the state at the start of the failing epoch as
/// `last_good.ckpt` and returns the error.
pub fn train(
    arch: &Architecture,
    clips: &[Clip],
    config: &TrainConfig,
    mut state: Checkpoint,
    target: Target,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<(Checkpoint, Vec<EpochLoss>)> {
    config.validate()?;
    if clips.len() < 2 {
        return Err(Error::invalid("training needs at least 2 clips"));
    }
    arch.validate(&state.params)?;
    let out = config.out_dir.as_deref();
    let mut losses = match out.map(|d| d.join("loss.csv")) {
        Some(p) if state.epoch > 0 && p.exists() => read_loss_log(&p, state.epoch as usize)?,
        _ => Vec::new(),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while (state.epoch as usize) < config.epochs {
        let snapshot = state.clone();
        let l = match train_epoch(arch, &mut state, clips, config, target) {
            Ok(l) => l,
            Err(e) => {
                if let (true, Some(dir)) = (e.is_numeric(), out) {
                    save_checkpoint(&snapshot, &dir.join("last_good.ckpt"))?;
                }
                return Err(e);
            }
        };
        on_epoch(&l);
        losses.push(l);
        if let Some(dir) = out {
            write_atomic(&dir.join("loss.csv"), loss_log_csv(&losses).as_bytes())?;
            let e = state.epoch as usize;
            if config.checkpoint_every > 0 && e % config.checkpoint_every == 0 {
                save_checkpoint(&state, &dir.join(format!("epoch-{e:04}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&state, &dir.join("final.ckpt"))?;
    }
    Ok((state, losses))
}

/// Copies every non-head tensor of `base` and attaches a fresh single-output
/// fusion layer for trait `trait_index`. Optimizer moments and the epoch
/// counter start over.
pub fn finetune_start(base: &Checkpoint, base_arch: &Architecture, trait_index: usize, seed: u64) -> Result<(Checkpoint, Architecture)> {
    if trait_index >= TRAITS {
        return Err(Error::invalid(format!("trait index {trait_index} not in [0, {TRAITS})")));
    }
    base_arch.validate(&base.params)?;
    let arch = base_arch.with_outputs(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = crate::params::ParamSet::new();
    for entry in arch.manifest() {
        let t = if entry.name.starts_with("fusion.") {
            model::init_tensor(&entry, &mut rng)
        } else {
            base.params.get(&entry.name)?.clone()
        };
        params.insert(entry.name, t)?;
    }
    let adam = AdamState::new(&params, AdamConfig::default());
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(1);
    Ok((
        Checkpoint {
            epoch: 0,
            params,
            adam,
            rng: train_rng,
        },
        arch,
    ))
}

/// Fine-tunes a single-trait network warm-started from `base`.
pub fn finetune_per_trait(
    base: &Checkpoint,
    base_arch: &Architecture,
    trait_index: usize,
    clips: &[Clip],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLoss),
) -> Result<(Checkpoint, Architecture, Vec<EpochLoss>)> {
    let (start, arch) = finetune_start(base, base_arch, trait_index, config.seed)?;
    let (ck, losses) = train(&arch, clips, config, start, Target::Trait(trait_index), on_epoch)?;
    Ok((ck, arch, losses))
}
