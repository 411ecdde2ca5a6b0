//! Full-clip evaluation: accuracy is one minus the mean absolute error.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{crop_audio, crop_frame, Clip, Manifest, Split};
use crate::error::{Error, Result};
use crate::model::{self, Architecture, InferOptions, TRAIT_NAMES, TRAITS};
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::Target;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub clip_id: String,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `(trait name, accuracy)` in table order.
    pub accuracies: Vec<(&'static str, f64)>,
    pub average: f64,
    pub clips: usize,
    pub excluded: usize,
    pub predictions: Vec<Prediction>,
    /// `(clip_id, reason)` for every excluded clip.
    pub failures: Vec<(String, String)>,
}

/// Neumaier-compensated sum; exact to one rounding for short inputs.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

impl EvalReport {
    /// Report from per-trait accuracies; the average is their arithmetic mean.
    pub fn from_accuracies(accuracies: Vec<(&'static str, f64)>, clips: usize, excluded: usize) -> Self {
        let average = compensated_sum(accuracies.iter().map(|a| a.1)) / accuracies.len().max(1) as f64;
        Self {
            accuracies,
            average,
            clips,
            excluded,
            predictions: Vec::new(),
            failures: Vec::new(),
        }
    }

    /// Accuracies of `predictions` against `labels` (same order), summed in
    /// clip order.
    pub fn score(predictions: Vec<Prediction>, labels: &[[f32; TRAITS]], target: Target) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::invalid("no clips to evaluate"));
        }
        let traits: Vec<usize> = match target {
            Target::AllTraits => (0..TRAITS).collect(),
            Target::Trait(k) => vec![k],
        };
        let mut sums = vec![0f64; traits.len()];
        for (p, l) in predictions.iter().zip(labels) {
            if p.values.len() != traits.len() {
                return Err(Error::invalid(format!("{} has {} outputs", p.clip_id, p.values.len())));
            }
            for (j, &k) in traits.iter().enumerate() {
                sums[j] += (p.values[j] as f64 - l[k] as f64).abs();
            }
        }
        let n = predictions.len() as f64;
        let accuracies = traits.iter().zip(&sums).map(|(&k, s)| (TRAIT_NAMES[k], 1.0 - s / n)).collect();
        let mut r = Self::from_accuracies(accuracies, predictions.len(), 0);
        r.predictions = predictions;
        Ok(r)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("average");
        for (name, _) in &self.accuracies {
            s.push(',');
            s.push_str(name);
        }
        s.push_str(",clips,excluded\n");
        let _ = write!(s, "{:.6}", self.average);
        for (_, a) in &self.accuracies {
            let _ = write!(s, ",{a:.6}");
        }
        let _ = writeln!(s, ",{},{}", self.clips, self.excluded);
        s
    }
}

/// Evaluates in-memory labelled clips.
pub fn evaluate_clips(
    arch: &Architecture,
    params: &ParamSet<f32>,
    clips: &[(String, Clip)],
    target: Target,
    opts: InferOptions,
) -> Result<EvalReport> {
    let preds = clips
        .par_iter()
        .map(|(id, c)| {
            Ok(Prediction {
                clip_id: id.clone(),
                values: model::predict(arch, params, c, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = clips
        .iter()
        .map(|(id, c)| c.label.map(|l| l.0).ok_or_else(|| Error::invalid(format!("{id} has no label"))))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::score(preds, &labels, target)
}

/// Scores clips on training-size inputs instead of whole clips: `crops`
/// seeded random audio/frame crop pairs per clip, drawn as in training and
/// run in eval mode. Every crop counts as one prediction, so accuracy is
/// one minus the mean error over crops.
pub fn evaluate_crops(
    arch: &Architecture,
    params: &ParamSet<f32>,
    clips: &[(String, Clip)],
    target: Target,
    crops: usize,
    seed: u64,
) -> Result<EvalReport> {
    if crops == 0 {
        return Err(Error::invalid("need at least one crop per clip"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for (id, c) in clips {
        let label = c.label.ok_or_else(|| Error::invalid(format!("{id} has no label")))?;
        let mut audio = Vec::with_capacity(crops * arch.audio_crop);
        let mut frames = Vec::new();
        for _ in 0..crops {
            audio.extend(crop_audio(c.audio(), arch.audio_crop, &mut rng));
            frames.extend(crop_frame(c, arch.frame_crop, &mut rng)?);
        }
        let audio = Tensor::new(vec![crops, 1, arch.audio_crop], audio)?;
        let frames = Tensor::new(vec![crops, 3, arch.frame_crop, arch.frame_crop], frames)?;
        let out = model::forward_batch_eval(arch, params, &audio, &frames)?;
        for (j, row) in out.scores.data().chunks(arch.outputs).enumerate() {
            preds.push(Prediction {
                clip_id: format!("{id}#{j}"),
                values: row.to_vec(),
            });
            labels.push(label.0);
        }
    }
    EvalReport::score(preds, &labels, target)
}

/// Evaluates one split of a manifest. Clips that fail to load are excluded
/// and listed in the report; the remaining clips are scored in manifest order.
pub fn evaluate(
    arch: &Architecture,
    params: &ParamSet<f32>,
    manifest: &Manifest,
    split: Split,
    target: Target,
    opts: InferOptions,
) -> Result<EvalReport> {
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(Error::invalid(format!("split {split} is empty")));
    }
    let outcomes: Vec<std::result::Result<(Prediction, [f32; TRAITS]), String>> = entries
        .par_iter()
        .map(|e| {
            let clip = manifest.load_clip(e).map_err(|err| err.to_string())?;
            let values = model::predict(arch, params, &clip, opts).map_err(|err| err.to_string())?;
            Ok((
                Prediction {
                    clip_id: e.clip_id.clone(),
                    values,
                },
                e.label.0,
            ))
        })
        .collect();
    let (mut preds, mut labels, mut failures) = (Vec::new(), Vec::new(), Vec::new());
    for (e, o) in entries.iter().zip(outcomes) {
        match o {
            Ok((p, l)) => {
                preds.push(p);
                labels.push(l);
            }
            Err(reason) => failures.push((e.clip_id.clone(), reason)),
        }
    }
    if preds.is_empty() {
        return Err(Error::invalid(format!("no clip of split {split} could be evaluated")));
    }
    let mut report = EvalReport::score(preds, &labels, target)?;
    report.excluded = failures.len();
    report.failures = failures;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_epoch_900_average() {
        let values = [0.911983, 0.915466, 0.913077, 0.909705, 0.910429];
        let r = EvalReport::from_accuracies(TRAIT_NAMES.iter().copied().zip(values).collect(), 2000, 0);
        let want = 0.912132f64;
        assert!((r.average - want).abs() <= f64::EPSILON * want, "{}", r.average);
        assert!(r.to_csv().contains("0.912132,0.911983,0.915466,0.913077,0.909705,0.910429,2000,0"));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [[0.1, 0.2, 0.3, 0.4, 0.5], [0.9, 0.8, 0.7, 0.6, 0.5]];
        let preds = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Prediction {
                clip_id: i.to_string(),
                values: l.to_vec(),
            })
            .collect();
        let r = EvalReport::score(preds, &labels, Target::AllTraits).unwrap();
        assert!(r.accuracies.iter().all(|a| a.1 == 1.0));
        assert_eq!(r.average, 1.0);
        assert!(r.to_csv().ends_with("1.000000,1.000000,1.000000,1.000000,1.000000,1.000000,2,0\n"));
    }

    #[test]
    fn single_trait_report() {
        let labels = [[0.1, 0.2, 0.3, 0.4, 0.5]];
        let preds = vec![Prediction {
            clip_id: "a".into(),
            values: vec![0.5],
        }];
        let r = EvalReport::score(preds, &labels, Target::Trait(4)).unwrap();
        assert_eq!(r.accuracies, vec![("extraversion", 1.0)]);
        assert!(r.to_csv().starts_with("average,extraversion,clips,excluded\n"));
    }
}
