use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{samples_for, Waveform};
use crate::autodiff::Tensor;
use crate::cochlear::CHANNELS;
use crate::error::{Error, Result};
use crate::fft;
use crate::SAMPLE_RATE;

const STIMULUS_RMS: f64 = 0.1;

pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

fn normalize_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = power(&x).sqrt();
    if rms > 0.0 {
        let g = STIMULUS_RMS / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

fn sample_count(duration_s: f64) -> Result<usize> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    Ok(samples_for(duration_s).max(1))
}

/// Gaussian noise with a 1/f power spectrum, RMS 0.1.
pub fn gen_pink_noise(duration_s: f64, seed: u64) -> Result<Waveform> {
    let n = sample_count(duration_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (mut re, mut im) = fft::rfft_rows(&white, n);
    re[0] = 0.0;
    im[0] = 0.0;
    for k in 1..re.len() {
        let f = k as f64 * SAMPLE_RATE as f64 / n as f64;
        let g = 1.0 / f.sqrt();
        re[k] *= g;
        im[k] *= g;
    }
    Waveform::new(normalize_rms(fft::irfft_rows(&re, &im, n)))
}

/// Equal-phase harmonic series `sum_k w_k sin(2 pi k f0 t)`, RMS 0.1.
pub fn gen_harmonic_complex(
    f0: f64,
    n_harmonics: usize,
    duration_s: f64,
    weights: Option<&[f64]>,
) -> Result<Waveform> {
    if !(f0 > 0.0) || n_harmonics == 0 {
        return Err(Error::invalid(
            "harmonic complex needs f0 > 0 and at least one harmonic",
        ));
    }
    let top = f0 * n_harmonics as f64;
    if top >= SAMPLE_RATE as f64 / 2.0 {
        return Err(Error::invalid(format!(
            "harmonic {n_harmonics} of {f0} Hz is {top} Hz, at or above the 8000 Hz Nyquist limit"
        )));
    }
    if let Some(w) = weights {
        if w.len() != n_harmonics {
            return Err(Error::invalid(format!(
                "{} harmonic weights given for {n_harmonics} harmonics",
                w.len()
            )));
        }
    }
    let n = sample_count(duration_s)?;
    let sr = SAMPLE_RATE as f64;
    let x = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            (1..=n_harmonics)
                .map(|k| {
                    let w = weights.map_or(1.0, |w| w[k - 1]);
                    w * (2.0 * PI * k as f64 * f0 * t).sin()
                })
                .sum()
        })
        .collect();
    Waveform::new(normalize_rms(x))
}

/// Synthetic auditory spectrogram `1 + 0.9 cos(2 pi (w n / 200 + W k / 24))`
/// of shape `[129, frames]`, with `W` in cycles/octave and `w` in Hz.
pub fn gen_moving_ripple(spectral: f64, temporal: f64, frames: usize) -> Result<Tensor> {
    if !(0.0..12.0).contains(&spectral) || !(temporal.abs() < 100.0) {
        return Err(Error::invalid(format!(
            "ripple ({spectral} cyc/oct, {temporal} Hz) outside 0 <= W < 12, |w| < 100"
        )));
    }
    if frames == 0 {
        return Err(Error::invalid("ripple needs at least one frame"));
    }
    let mut data = Vec::with_capacity(CHANNELS * frames);
    for k in 0..CHANNELS {
        for n in 0..frames {
            let phase = temporal * n as f64 / 200.0 + spectral * k as f64 / 24.0;
            data.push(1.0 + 0.9 * (2.0 * PI * phase).cos());
        }
    }
    Tensor::new(vec![CHANNELS, frames], data)
}

/// Noise gain that places `noise` at `snr_db` below `speech`.
pub fn snr_gain(speech: &[f64], noise: &[f64], snr_db: f64) -> Result<f64> {
    let (ps, pn) = (power(speech), power(noise));
    if ps == 0.0 || pn == 0.0 {
        return Err(Error::invalid("mix_at_snr: zero-power input"));
    }
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

pub fn mix_at_snr(speech: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if speech.len() != noise.len() {
        return Err(Error::invalid(format!(
            "mix_at_snr: lengths differ ({} vs {})",
            speech.len(),
            noise.len()
        )));
    }
    let g = snr_gain(speech.samples(), noise.samples(), snr_db)?;
    let mixed = speech
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(s, n)| s + g * n)
        .collect();
    Waveform::new(mixed)
}
