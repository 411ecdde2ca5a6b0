//! Training-time crops. Every draw comes from the caller's generator.

use rand::Rng;

use crate::error::{Error, Result};

use super::clip::Clip;

/// Random contiguous window of `len` samples. Audio shorter than `len` is
/// zero-padded at the end without consuming randomness.
pub fn crop_audio<R: Rng + ?Sized>(audio: &[f32], len: usize, rng: &mut R) -> Vec<f32> {
    if audio.len() <= len {
        let mut out = audio.to_vec();
        out.resize(len, 0.0);
        return out;
    }
    let start = rng.gen_range(0..=audio.len() - len);
    audio[start..start + len].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameCrop {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
    pub flip: bool,
}

/// Draws frame index, crop origin and flip, in that order.
pub fn draw_frame_crop<R: Rng + ?Sized>(clip: &Clip, size: usize, rng: &mut R) -> Result<FrameCrop> {
    if clip.height() < size || clip.width() < size {
        return Err(Error::InvalidShape {
            shape: vec![clip.height(), clip.width()],
            reason: format!("frame smaller than the {size}×{size} crop"),
        });
    }
    Ok(FrameCrop {
        frame: rng.gen_range(0..clip.frame_count()),
        row: rng.gen_range(0..=clip.height() - size),
        col: rng.gen_range(0..=clip.width() - size),
        flip: rng.gen_bool(0.5),
    })
}

/// The `(3, size, size)` crop described by `c`, values in `[0, 1]`.
pub fn apply_frame_crop(clip: &Clip, size: usize, c: FrameCrop) -> Result<Vec<f32>> {
    let (h, w) = (clip.height(), clip.width());
    if c.frame >= clip.frame_count() || c.row + size > h || c.col + size > w {
        return Err(Error::invalid(format!("crop {c:?} outside {h}×{w} frame")));
    }
    let px = clip.frame_pixels(c.frame);
    let mut out = Vec::with_capacity(3 * size * size);
    for ch in 0..3 {
        for r in 0..size {
            let row = &px[ch * h * w + (c.row + r) * w + c.col..][..size];
            if c.flip {
                out.extend(row.iter().rev().map(|&p| p as f32 / 255.0));
            } else {
                out.extend(row.iter().map(|&p| p as f32 / 255.0));
            }
        }
    }
    Ok(out)
}

/// Random `size × size` crop of a random frame, mirrored left/right with
/// probability 1/2.
pub fn crop_frame<R: Rng + ?Sized>(clip: &Clip, size: usize, rng: &mut R) -> Result<Vec<f32>> {
    let c = draw_frame_crop(clip, size, rng)?;
    apply_frame_crop(clip, size, c)
}
