//! Clips, dataset manifests, training crops and the synthetic generator.

pub mod augment;
pub mod clip;
pub mod manifest;
pub mod synth;

pub use augment::{apply_frame_crop, crop_audio, crop_frame, draw_frame_crop, FrameCrop};
pub use clip::{canonical_frame_count, load_clip, save_clip, write_atomic, Clip, SAMPLE_RATE};
pub use manifest::{Entry, Manifest, Split};
pub use synth::{synth_clips, synth_dataset, SynthConfig};
