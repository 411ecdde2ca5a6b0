//! Preprocessed clips and their on-disk container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DIClip1\0"  u32 samples  u32 frames  u16 height  u16 width
//! samples × f32 audio
//! frames × 3 × height × width × u8 pixels (frame-major, planar RGB, row-major)
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TraitVector;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: usize = 16000;
pub const FRAME_RATE: usize = 25;
pub const CANONICAL_HEIGHT: usize = 256;
pub const CANONICAL_WIDTH: usize = 456;

const MAGIC: &[u8; 8] = b"DIClip1\0";
const HEADER_LEN: usize = 8 + 4 + 4 + 2 + 2;

/// Mono 16 kHz audio plus an RGB frame sequence stored as 8-bit pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    audio: Vec<f32>,
    frames: Vec<u8>,
    frame_count: usize,
    height: usize,
    width: usize,
    pub label: Option<TraitVector>,
}

impl Clip {
    pub fn new(audio: Vec<f32>, frames: Vec<u8>, frame_count: usize, height: usize, width: usize) -> Result<Self> {
        if audio.is_empty() || frame_count == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape {
                shape: vec![audio.len(), frame_count, 3, height, width],
                reason: "clips need at least one sample and one non-empty frame".into(),
            });
        }
        if frames.len() != frame_count * 3 * height * width {
            return Err(Error::InvalidShape {
                shape: vec![frame_count, 3, height, width],
                reason: format!("pixel buffer holds {} values", frames.len()),
            });
        }
        Ok(Self {
            audio,
            frames,
            frame_count,
            height,
            width,
            label: None,
        })
    }

    pub fn with_label(mut self, label: TraitVector) -> Self {
        self.label = Some(label);
        self
    }

    pub fn audio(&self) -> &[f32] {
        &self.audio
    }

    pub fn sample_count(&self) -> usize {
        self.audio.len()
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seconds(&self) -> f64 {
        self.audio.len() as f64 / SAMPLE_RATE as f64
    }

    fn frame_len(&self) -> usize {
        3 * self.height * self.width
    }

    /// Raw pixels of frame `i`, planar RGB.
    pub fn frame_pixels(&self, i: usize) -> &[u8] {
        let n = self.frame_len();
        &self.frames[i * n..(i + 1) * n]
    }

    /// Frame `i` as a `(3, H, W)` tensor with values in `[0, 1]`.
    pub fn frame_tensor(&self, i: usize) -> Result<Tensor<f32>> {
        if i >= self.frame_count {
            return Err(Error::invalid(format!("frame {i} of {}", self.frame_count)));
        }
        let data = self.frame_pixels(i).iter().map(|&p| p as f32 / 255.0).collect();
        Tensor::new(vec![3, self.height, self.width], data)
    }

    /// Sub-clip of whole frames `[first, first + count)` and samples `[start, end)`.
    pub fn slice(&self, samples: std::ops::Range<usize>, frames: std::ops::Range<usize>) -> Result<Clip> {
        if samples.end > self.audio.len() || frames.end > self.frame_count {
            return Err(Error::invalid("slice outside the clip"));
        }
        let n = self.frame_len();
        Clip::new(
            self.audio[samples].to_vec(),
            self.frames[frames.start * n..frames.end * n].to_vec(),
            frames.len(),
            self.height,
            self.width,
        )
    }

    /// Checks the preprocessing contract: 456×256 frames at 25 fps
    /// alongside 16 kHz audio in `[-1, 1]`.
    pub fn check_canonical(&self) -> Result<()> {
        if self.height != CANONICAL_HEIGHT || self.width != CANONICAL_WIDTH {
            return Err(Error::NonCanonical(format!(
                "frames are {}×{} (W×H), expected {CANONICAL_WIDTH}×{CANONICAL_HEIGHT}",
                self.width, self.height
            )));
        }
        let expected = canonical_frame_count(self.audio.len());
        if self.frame_count != expected {
            return Err(Error::NonCanonical(format!(
                "{} samples imply {expected} frames at {FRAME_RATE} fps, found {}",
                self.audio.len(),
                self.frame_count
            )));
        }
        if let Some(s) = self.audio.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::NonCanonical(format!("audio sample {s} outside [-1, 1]")));
        }
        Ok(())
    }
}

/// `ceil(samples · 25 / 16000)`.
pub fn canonical_frame_count(samples: usize) -> usize {
    (samples * FRAME_RATE).div_ceil(SAMPLE_RATE)
}

/// Serializes a canonical clip. The label is not stored; it lives in the
/// dataset manifest.
pub fn encode_clip(clip: &Clip) -> Result<Vec<u8>> {
    clip.check_canonical()?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * clip.audio.len() + clip.frames.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(clip.audio.len() as u32).to_le_bytes());
    out.extend_from_slice(&(clip.frame_count as u32).to_le_bytes());
    out.extend_from_slice(&(clip.height as u16).to_le_bytes());
    out.extend_from_slice(&(clip.width as u16).to_le_bytes());
    for s in &clip.audio {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&clip.frames);
    Ok(out)
}

pub fn decode_clip(bytes: &[u8], path: &Path) -> Result<Clip> {
    let found = bytes.len() as u64;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN as u64,
            found,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as u64;
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap()) as u64;
    let (s, t, h, w) = (u32_at(8), u32_at(12), u16_at(16), u16_at(18));
    let expected = t
        .checked_mul(3 * h * w)
        .and_then(|px| s.checked_mul(4).and_then(|a| a.checked_add(px)))
        .and_then(|body| body.checked_add(HEADER_LEN as u64))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or_else(|| Error::ExtentOverflow { path: path.into() })?;
    if expected != found {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found,
        });
    }
    let audio_end = HEADER_LEN + 4 * s as usize;
    let audio = bytes[HEADER_LEN..audio_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Clip::new(audio, bytes[audio_end..].to_vec(), t as usize, h as usize, w as usize)
}

pub fn save_clip(clip: &Clip, path: &Path) -> Result<()> {
    write_atomic(path, &encode_clip(clip)?)
}

pub fn load_clip(path: &Path) -> Result<Clip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip(&bytes, path)
}

/// Writes to a sibling temporary file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
