//! Audiovisual residual networks for apparent personality trait regression.
//!
//! An auditory stream (1D residual network over raw 16 kHz audio) and a
//! visual stream (2D residual network over RGB frames) are pooled, fused by
//! a fully-connected layer and squashed into five trait scores in `[0, 1]`.

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod data;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod rnn_head;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Gradients, ParamSet};
pub use tensor::{Scalar, Tensor};
