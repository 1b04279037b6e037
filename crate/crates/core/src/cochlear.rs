//! Cochlear stage: frozen constant-Q roex filterbank, learnable power-law
//! compression, lateral inhibition across channels, leaky integration and
//! decimation to a 200 frames/s auditory spectrogram.
//!
//! Filtering is done by multiplying spectra; the filterbank is zero-phase and
//! the integrator is the first-order lowpass `1 / (1 + i 2 pi nu tau)`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::Waveform;
use crate::{fft, HOP, SAMPLE_RATE};

pub const CHANNELS: usize = 129;
pub const CHANNELS_PER_OCTAVE: f64 = 24.0;
pub const BASE_FREQUENCY: f64 = 180.0;
pub const ROEX_ALPHA: f64 = 0.3;
pub const ROEX_BETA: f64 = 8.0;
/// Distance in octaves between a channel's response peak and its upper edge.
pub const PEAK_OFFSET: f64 = ROEX_ALPHA / ROEX_BETA;

pub const ALPHA_FLOOR: f64 = 0.01;
pub const TAU_FLOOR_MS: f64 = 0.1;
pub const TAU_INIT_MS: f64 = 8.0;

pub fn center_frequency(k: usize) -> f64 {
    BASE_FREQUENCY * 2f64.powf(k as f64 / CHANNELS_PER_OCTAVE)
}

/// Upper passband edge of channel `k` on the log2-frequency axis (origin 1 Hz).
pub fn upper_edge(k: usize) -> f64 {
    center_frequency(k).log2() + PEAK_OFFSET
}

/// Roex magnitude `(x_h - x)^0.3 exp(-8 (x_h - x))` on `[0, x_h]`, zero elsewhere.
pub fn roex_response(x: f64, x_h: f64) -> f64 {
    let d = x_h - x;
    if x < 0.0 || d <= 0.0 {
        0.0
    } else {
        d.powf(ROEX_ALPHA) * (-ROEX_BETA * d).exp()
    }
}

/// Peak value of [`roex_response`], reached `PEAK_OFFSET` octaves below the edge.
pub fn roex_peak() -> f64 {
    PEAK_OFFSET.powf(ROEX_ALPHA) * (-ROEX_ALPHA).exp()
}

/// Peak-normalized response of channel `k` at `f_hz`.
pub fn channel_response(k: usize, f_hz: f64) -> f64 {
    if f_hz <= 0.0 {
        return 0.0;
    }
    roex_response(f_hz.log2(), upper_edge(k)) / roex_peak()
}

/// Frozen filterbank sampled at the rFFT bins of one signal length.
#[derive(Clone, Debug)]
pub struct RoexFilterbank {
    signal_len: usize,
    response: Arc<Tensor>,
}

impl RoexFilterbank {
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    /// Magnitude responses, `[129, n / 2 + 1]`.
    pub fn response(&self) -> &Tensor {
        &self.response
    }
}

/// Builds (or fetches from a process-wide cache) the filterbank for `n` samples.
pub fn build_filterbank(signal_len: usize) -> Result<RoexFilterbank> {
    if signal_len < HOP {
        return Err(Error::invalid(format!(
            "filterbank needs at least {HOP} samples, got {signal_len}"
        )));
    }
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Tensor>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
    let response = map
        .entry(signal_len)
        .or_insert_with(|| {
            let nb = fft::bins(signal_len);
            let mut data = Vec::with_capacity(CHANNELS * nb);
            for k in 0..CHANNELS {
                for b in 0..nb {
                    let f = b as f64 * SAMPLE_RATE as f64 / signal_len as f64;
                    data.push(channel_response(k, f));
                }
            }
            Arc::new(Tensor::new(vec![CHANNELS, nb], data).expect("filterbank shape"))
        })
        .clone();
    Ok(RoexFilterbank {
        signal_len,
        response,
    })
}

/// Leaky-integrator gain `1 / (1 + i 2 pi nu tau)` with `tau` in milliseconds.
pub fn integrator_response(tau_ms: f64, nu_hz: f64) -> Complex64 {
    Complex64::new(1.0, 2.0 * PI * nu_hz * tau_ms / 1000.0).inv()
}

/// Learnable cochlear parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CochlearParams {
    /// Compression exponents, one per channel.
    pub alpha: Tensor,
    /// Lateral-inhibition weights `[w0, w1]`.
    pub inhibition: Tensor,
    /// Integrator time constant in milliseconds, shape `[1]`.
    pub tau: Tensor,
}

impl Default for CochlearParams {
    fn default() -> Self {
        Self {
            alpha: Tensor::full(vec![CHANNELS], 1.0),
            inhibition: Tensor::vector(vec![1.0, -1.0]),
            tau: Tensor::vector(vec![TAU_INIT_MS]),
        }
    }
}

/// Tape handles of [`CochlearParams`].
#[derive(Clone, Copy, Debug)]
pub struct CochlearVars {
    pub alpha: Var,
    pub inhibition: Var,
    pub tau: Var,
}

impl CochlearParams {
    pub fn to_tape(&self, tape: &mut Tape, learnable: bool) -> CochlearVars {
        CochlearVars {
            alpha: tape.leaf(self.alpha.clone(), learnable),
            inhibition: tape.leaf(self.inhibition.clone(), learnable),
            tau: tape.leaf(self.tau.clone(), learnable),
        }
    }

    /// Auditory spectrogram of `w` without recording gradients.
    pub fn spectrogram(&self, w: &Waveform) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.to_tape(&mut tape, false);
        let x = tape.constant(Tensor::vector(w.samples().to_vec()));
        let s = cochlear_forward(&mut tape, x, &vars)?;
        Ok(tape.value(s).clone())
    }
}

/// Number of 200 Hz frames produced for `n` samples.
pub fn frame_count(n: usize) -> usize {
    n.div_ceil(HOP)
}

/// Waveform `[n]` to auditory spectrogram `[129, ceil(n / 80)]`.
pub fn cochlear_forward(tape: &mut Tape, wave: Var, p: &CochlearVars) -> Result<Var> {
    let t = tape.value(wave);
    if t.ndim() != 1 {
        return Err(Error::shape("cochlear_forward", t.shape(), &[0]));
    }
    let n = t.len();
    if n < HOP {
        return Err(Error::invalid(format!(
            "cochlear_forward: input has {n} samples, need at least {HOP}"
        )));
    }
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "cochlear_forward: non-finite sample at index {i}"
        )));
    }
    let fb = build_filterbank(n)?;
    let nb = fft::bins(n);

    // band-pass filtering
    let (re, im) = tape.rfft(wave)?;
    let resp = tape.constant((*fb.response).clone());
    let re = tape.tile(re, CHANNELS);
    let im = tape.tile(im, CHANNELS);
    let re = tape.mul(re, resp)?;
    let im = tape.mul(im, resp)?;
    let bands = tape.irfft(re, im, n)?;

    // rectification and compression
    let u = tape.relu(bands);
    let v = tape.pow(u, p.alpha)?;

    // lateral inhibition against the next-lower channel
    let w0 = tape.slice(p.inhibition, 0, 0, 1)?;
    let w1 = tape.slice(p.inhibition, 0, 1, 2)?;
    let zero_row = tape.constant(Tensor::zeros(vec![1, n]));
    let lower = tape.slice(v, 0, 0, CHANNELS - 1)?;
    let shifted = tape.concat(&[zero_row, lower], 0)?;
    let a = tape.scale(v, w0)?;
    let b = tape.scale(shifted, w1)?;
    let z = tape.add(a, b)?;
    let z = tape.relu(z);

    // leaky integration
    let (zr, zi) = tape.rfft(z)?;
    let omega = tape.constant(Tensor::vector(
        (0..nb)
            .map(|k| 2.0 * PI * k as f64 * SAMPLE_RATE as f64 / n as f64 / 1000.0)
            .collect(),
    ));
    let bt = tape.scale(omega, p.tau)?;
    let b2 = tape.mul(bt, bt)?;
    let denom = tape.add_const(b2, 1.0);
    let ones = tape.constant(Tensor::full(vec![nb], 1.0));
    let hr = tape.div(ones, denom)?;
    let hi = tape.div(bt, denom)?;
    let hi = tape.neg(hi);
    let hr = tape.tile(hr, CHANNELS);
    let hi = tape.tile(hi, CHANNELS);
    let rr = tape.mul(zr, hr)?;
    let ii = tape.mul(zi, hi)?;
    let ri = tape.mul(zr, hi)?;
    let ir = tape.mul(zi, hr)?;
    let yr = tape.sub(rr, ii)?;
    let yi = tape.add(ri, ir)?;
    let y = tape.irfft(yr, yi, n)?;

    // decimation to 200 frames/s; the final rectification only removes
    // rounding-level negatives left by the band-limited integrator
    let frames = frame_count(n);
    let index: Arc<[usize]> = (0..CHANNELS)
        .flat_map(|k| (0..frames).map(move |t| k * n + t * HOP))
        .collect();
    let s = tape.gather(y, index, &[CHANNELS, frames])?;
    Ok(tape.relu(s))
}

/// Applies the documented parameter floors in place.
pub fn clamp_params(p: &mut CochlearParams) {
    p.alpha
        .data_mut()
        .iter_mut()
        .for_each(|a| *a = a.max(ALPHA_FLOOR));
    p.tau
        .data_mut()
        .iter_mut()
        .for_each(|t| *t = t.max(TAU_FLOOR_MS));
}
