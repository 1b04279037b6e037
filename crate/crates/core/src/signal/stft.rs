use std::f64::consts::PI;
use std::sync::Arc;

use super::Waveform;
use crate::autodiff::{Tape, Tensor, Var, DROP};
use crate::error::{Error, Result};
use crate::fft;

/// Frame layout and windows for a fixed (window, hop, signal length) triple.
///
/// Frames are centred on multiples of `hop` with reflect padding, so a signal
/// of `n` samples yields `ceil(n / hop)` frames. Analysis and synthesis both
/// use a periodic Hann window; the inverse divides the overlap-added output by
/// the summed squared window, which makes `inverse(forward(x)) == x`.
#[derive(Clone, Debug)]
pub struct StftPlan {
    window_length: usize,
    hop: usize,
    signal_len: usize,
    frames: usize,
    windows: Tensor,
    frame_index: Arc<[usize]>,
    overlap_index: Arc<[usize]>,
    inv_norm: Tensor,
}

fn reflect(mut q: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let last = n as isize - 1;
    while q < 0 || q > last {
        q = if q < 0 { -q } else { 2 * last - q };
    }
    q as usize
}

impl StftPlan {
    pub fn new(window_length: usize, hop: usize, signal_len: usize) -> Result<Self> {
        if window_length == 0 || window_length % 2 != 0 {
            return Err(Error::invalid(format!(
                "stft: window length {window_length} must be even and positive"
            )));
        }
        if hop == 0 || hop > window_length {
            return Err(Error::invalid(format!(
                "stft: hop {hop} must be in 1..={window_length}"
            )));
        }
        if signal_len == 0 {
            return Err(Error::invalid("stft: empty signal"));
        }
        let frames = signal_len.div_ceil(hop);
        let half = (window_length / 2) as isize;
        let window: Vec<f64> = (0..window_length)
            .map(|j| 0.5 - 0.5 * (2.0 * PI * j as f64 / window_length as f64).cos())
            .collect();
        let mut frame_index = Vec::with_capacity(frames * window_length);
        let mut overlap_index = Vec::with_capacity(frames * window_length);
        let mut norm = vec![0.0; signal_len];
        for m in 0..frames {
            for (j, w) in window.iter().enumerate() {
                let q = (m * hop + j) as isize - half;
                frame_index.push(reflect(q, signal_len));
                if q >= 0 && (q as usize) < signal_len {
                    overlap_index.push(q as usize);
                    norm[q as usize] += w * w;
                } else {
                    overlap_index.push(DROP);
                }
            }
        }
        if let Some(p) = norm.iter().position(|&v| v < 1e-10) {
            return Err(Error::invalid(format!(
                "istft: window {window_length} with hop {hop} leaves sample {p} uncovered (not overlap-add invertible)"
            )));
        }
        let windows = window
            .iter()
            .copied()
            .cycle()
            .take(frames * window_length)
            .collect();
        Ok(Self {
            window_length,
            hop,
            signal_len,
            frames,
            windows: Tensor::new(vec![frames, window_length], windows)?,
            frame_index: frame_index.into(),
            overlap_index: overlap_index.into(),
            inv_norm: Tensor::vector(norm.iter().map(|v| 1.0 / v).collect()),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        fft::bins(self.window_length)
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    /// `x [n]` to `(re, im)`, each `[frames, bins]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        if tape.shape(x) != [self.signal_len] {
            return Err(Error::shape("stft", tape.shape(x), &[self.signal_len]));
        }
        let framed = tape.gather(
            x,
            self.frame_index.clone(),
            &[self.frames, self.window_length],
        )?;
        let w = tape.constant(self.windows.clone());
        let windowed = tape.mul(framed, w)?;
        tape.rfft(windowed)
    }

    /// `(re, im)` of shape `[frames, bins]` back to `[n]` samples.
    pub fn inverse(&self, tape: &mut Tape, re: Var, im: Var) -> Result<Var> {
        let expected = [self.frames, self.bins()];
        if tape.shape(re) != expected {
            return Err(Error::shape("istft", tape.shape(re), &expected));
        }
        let frames = tape.irfft(re, im, self.window_length)?;
        let w = tape.constant(self.windows.clone());
        let windowed = tape.mul(frames, w)?;
        let flat = tape.reshape(windowed, &[self.frames * self.window_length])?;
        let summed = tape.scatter_add(flat, self.overlap_index.clone(), &[self.signal_len])?;
        let norm = tape.constant(self.inv_norm.clone());
        tape.mul(summed, norm)
    }
}

/// Complex STFT stored as separate real and imaginary `[frames, bins]` arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub real: Tensor,
    pub imag: Tensor,
    pub window_length: usize,
    pub hop: usize,
    pub signal_len: usize,
}

pub fn stft(w: &Waveform, window_length: usize, hop: usize) -> Result<ComplexSpectrogram> {
    let plan = StftPlan::new(window_length, hop, w.len())?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(w.samples().to_vec()));
    let (re, im) = plan.forward(&mut tape, x)?;
    Ok(ComplexSpectrogram {
        real: tape.value(re).clone(),
        imag: tape.value(im).clone(),
        window_length,
        hop,
        signal_len: w.len(),
    })
}

pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    if s.real.shape() != s.imag.shape() {
        return Err(Error::shape("istft", s.real.shape(), s.imag.shape()));
    }
    let plan = StftPlan::new(s.window_length, s.hop, s.signal_len)?;
    let mut tape = Tape::new();
    let re = tape.constant(s.real.clone());
    let im = tape.constant(s.imag.clone());
    let y = plan.inverse(&mut tape, re, im)?;
    Waveform::new(tape.value(y).data().to_vec())
}
