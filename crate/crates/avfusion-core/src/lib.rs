//! Joint audio-visual idling-vehicle detection, desk scale.
//!
//! A self-contained pipeline that localizes vehicles in short video clips
//! and classifies each as moving, idling, or engine-off by fusing a 3D-conv
//! video encoder with a spectrogram-based audio encoder through a
//! bidirectional spatial attention block, followed by an anchor-based
//! detection head. Ships with a deterministic synthetic scene generator so
//! every mechanism is testable without field recordings.

pub mod attention;
pub mod boxes;
pub mod data;
pub mod detect;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fft;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod model;
pub mod ops;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod workers;

pub use error::{AvError, Result};
pub use tensor::{Dtype, Scalar, Tensor};

/// Crate version, recorded in every reproducibility stanza.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
