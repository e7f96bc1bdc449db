//! A generative human-video codec.
//!
//! The encoder compresses the first picture of a sequence with a conventional
//! key-frame codec and represents every later frame by a compact motion
//! vector (a handful of scalars), predictively quantized and entropy-coded
//! with an adaptive binary arithmetic coder. The decoder modulates the key
//! frame's latent with those vectors to recover fine-grained motion fields,
//! estimates dense foreground/background motion from them, and synthesizes
//! each frame by warping-and-generating the key frame at any supported dyadic
//! resolution.
//!
//! Start with [`model::Model`] for the neural pipeline, [`eval`] for the
//! end-to-end `encode`/`decode` entry points, and the `examples/` directory
//! for one runnable program per capability.

pub mod autodiff;
pub mod bitstream;
pub mod error;
pub mod eval;
pub mod factorizer;
pub mod feature_codec;
pub mod generator;
pub mod model;
pub mod motion;
pub mod nn;
pub mod train;
pub mod video;

pub use error::{Error, FormatError, Result};
