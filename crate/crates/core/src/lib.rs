//! Differentiable cochlea-to-cortex auditory frontend with small task backends.
//!
//! The pipeline turns 16 kHz audio into a 129-channel auditory spectrogram at
//! 200 frames/s, filters it with 40 learnable spectrotemporal modulation
//! kernels, and feeds the result to a frame classifier or a mask-based speech
//! enhancer. Everything runs on a small define-by-run autodiff tape so that the
//! 212 frontend parameters train jointly with the backend.

pub mod analysis;
pub mod autodiff;
pub mod backends;
pub mod cochlear;
pub mod cortical;
mod error;
pub mod fft;
pub mod model;
pub mod signal;
pub mod train;

pub use error::{Error, Result};

/// Sample rate accepted by every pipeline entry point.
pub const SAMPLE_RATE: u32 = 16_000;

/// Audio samples per auditory-spectrogram frame (200 frames/s at 16 kHz).
pub const HOP: usize = 80;
