//! Audio I/O, deterministic test stimuli, SNR mixing and the STFT pair.

mod stft;
mod synth;
mod wav;

pub use stft::{istft, stft, ComplexSpectrogram, StftPlan};
pub use synth::{
    gen_harmonic_complex, gen_moving_ripple, gen_pink_noise, mix_at_snr, power, snr_gain,
};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

/// Mono 16 kHz audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must contain at least one sample"));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// Number of samples in `seconds` of audio, rounded to the nearest sample.
pub fn samples_for(seconds: f64) -> usize {
    (seconds * SAMPLE_RATE as f64).round() as usize
}
