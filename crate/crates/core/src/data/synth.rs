//! Synthetic clips whose trait labels are smooth functions of audio pitch,
//! frame color and stripe orientation, so both streams have something to
//! learn.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TraitVector;

use super::clip::{canonical_frame_count, save_clip, Clip, CANONICAL_HEIGHT, CANONICAL_WIDTH, SAMPLE_RATE};
use super::manifest::{Entry, Manifest, Split};

pub const MIN_FREQ: f64 = 220.0;
pub const MAX_FREQ: f64 = 1760.0;
const STRIPE_PERIOD: f64 = 16.0;
const STRIPE_AMPLITUDE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    /// The last `validation` clips go to the validation split.
    pub validation: usize,
    pub seed: u64,
    pub seconds: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 8,
            validation: 0,
            seed: 0,
            seconds: 0.2,
        }
    }
}

/// Hidden factors of one synthetic clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Factors {
    pub frequency: f64,
    pub rgb: [f64; 3],
    /// Stripe orientation in `[0, π)`.
    pub orientation: f64,
    pub phase: f64,
}

impl Factors {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            frequency: rng.gen_range(MIN_FREQ..MAX_FREQ),
            rgb: [
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.15..0.85),
            ],
            orientation: rng.gen_range(0.0..PI),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    /// Labels in `[0.05, 0.95]`: openness from pitch, agreeableness /
    /// conscientiousness / neuroticism from red / green / blue, extraversion
    /// from stripe orientation and pitch together.
    pub fn label(&self) -> TraitVector {
        let squash = |u: f64| (0.05 + 0.9 * u.clamp(0.0, 1.0)) as f32;
        let pitch = (self.frequency - MIN_FREQ) / (MAX_FREQ - MIN_FREQ);
        let color = |c: f64| (c - 0.15) / 0.7;
        let tilt = ((2.0 * self.orientation).cos() + 1.0) / 2.0;
        TraitVector([
            squash(pitch),
            squash(color(self.rgb[0])),
            squash(color(self.rgb[1])),
            squash(color(self.rgb[2])),
            squash(0.5 * tilt + 0.5 * pitch),
        ])
    }
}

/// Renders a canonical clip of `seconds` from `factors`; `rng` supplies the
/// audio noise.
pub fn render(factors: &Factors, seconds: f64, rng: &mut ChaCha8Rng) -> Result<Clip> {
    let samples = (seconds * SAMPLE_RATE as f64).round() as usize;
    if samples == 0 {
        return Err(Error::invalid("synthetic clips need a positive duration"));
    }
    let audio = (0..samples)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let w = 2.0 * PI * factors.frequency * t;
            let noise: f64 = rng.gen_range(-0.02..0.02);
            (0.6 * (w + factors.phase).sin() + 0.15 * (2.0 * w).sin() + noise) as f32
        })
        .collect();

    let t_count = canonical_frame_count(samples);
    let (h, w) = (CANONICAL_HEIGHT, CANONICAL_WIDTH);
    let (s, c) = factors.orientation.sin_cos();
    let mut frames = Vec::with_capacity(t_count * 3 * h * w);
    for t in 0..t_count {
        let drift = factors.phase + 0.3 * t as f64;
        let stripes: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                STRIPE_AMPLITUDE * (2.0 * PI * (x * c + y * s) / STRIPE_PERIOD + drift).sin()
            })
            .collect();
        for base in factors.rgb {
            frames.extend(stripes.iter().map(|v| ((base + v).clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    Ok(Clip::new(audio, frames, t_count, h, w)?.with_label(factors.label()))
}

pub struct SynthClip {
    pub id: String,
    pub split: Split,
    pub factors: Factors,
    pub clip: Clip,
}

/// Deterministic in `config.seed`.
pub fn synth_clips(config: &SynthConfig) -> Result<Vec<SynthClip>> {
    if config.count == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one clip"));
    }
    if config.validation > config.count {
        return Err(Error::invalid("validation count exceeds clip count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.count)
        .map(|i| {
            let factors = Factors::draw(&mut rng);
            let clip = render(&factors, config.seconds, &mut rng)?;
            let split = if i >= config.count - config.validation {
                Split::Validation
            } else {
                Split::Train
            };
            Ok(SynthClip {
                id: format!("clip{i:04}"),
                split,
                factors,
                clip,
            })
        })
        .collect()
}

/// Writes `clips/<id>.dic` and `manifest.csv` under `dir`; returns the
/// manifest path.
pub fn synth_dataset(config: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    let clips_dir = dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let mut entries = Vec::new();
    for s in synth_clips(config)? {
        let rel = PathBuf::from("clips").join(format!("{}.dic", s.id));
        save_clip(&s.clip, &dir.join(&rel))?;
        entries.push(Entry {
            clip_id: s.id,
            path: rel,
            label: s.factors.label(),
            split: s.split,
        });
    }
    let manifest = Manifest::new(dir, entries)?;
    let path = dir.join("manifest.csv");
    manifest.save(&path)?;
    Ok(path)
}
