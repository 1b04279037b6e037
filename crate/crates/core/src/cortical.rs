//! Cortical stage: 40 learnable spectrotemporal modulation filters correlated
//! with the auditory spectrogram.
//!
//! Filter `i` is a Gabor kernel on the (channel, frame) grid,
//!
//! ```text
//! K[dk, dn] = exp(-2 W^2 df^2 - 2 w^2 dt^2) cos(2 pi (W df + w dt)),
//! df = dk / 24 octaves, dt = dn / 200 s,
//! ```
//!
//! truncated at two standard deviations on each axis, mean-subtracted and
//! scaled to unit L2 norm. `W` (cycles/octave) and the signed `w` (Hz) are the
//! learnable values. Expanding the cosine writes the kernel as a sum of three
//! outer products, which the tape evaluates with a low-rank FFT correlation.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const FILTERS: usize = 40;
pub const SPECTRAL_MIN: f64 = 0.05;
pub const SPECTRAL_MAX: f64 = 12.0;
pub const TEMPORAL_MIN: f64 = 0.1;
pub const TEMPORAL_MAX: f64 = 100.0;
/// Upper bound of the uniform random initialization, for both axes.
pub const RANDOM_INIT_MAX: f64 = 9.0;

const CHANNELS_PER_OCTAVE: f64 = 24.0;
const FRAME_RATE: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorticalInit {
    #[serde(rename = "log")]
    LogSpaced,
    #[serde(rename = "random")]
    Random,
}

/// Learnable modulation-filter parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CorticalParams {
    /// Spectral modulation per filter, cycles/octave.
    pub spectral: Tensor,
    /// Signed temporal modulation per filter, Hz.
    pub temporal: Tensor,
}

/// Log-spaced grid values: spectral modulations and temporal rates.
pub const LOG_SPECTRAL: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const LOG_TEMPORAL: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

pub fn init_cortical(mode: CorticalInit, seed: u64) -> CorticalParams {
    let (spectral, temporal) = match mode {
        CorticalInit::LogSpaced => {
            let mut s = Vec::with_capacity(FILTERS);
            let mut t = Vec::with_capacity(FILTERS);
            for sign in [1.0, -1.0] {
                for &sp in &LOG_SPECTRAL {
                    for &tp in &LOG_TEMPORAL {
                        s.push(sp);
                        t.push(sign * tp);
                    }
                }
            }
            (s, t)
        }
        CorticalInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || RANDOM_INIT_MAX * (1.0 - rng.gen::<f64>());
            let mut s = Vec::with_capacity(FILTERS);
            let mut t = Vec::with_capacity(FILTERS);
            for _ in 0..FILTERS {
                let sp = draw();
                let tp = draw();
                s.push(sp);
                t.push(tp);
            }
            for v in t.iter_mut() {
                if rng.gen::<bool>() {
                    *v = -*v;
                }
            }
            (s, t)
        }
    };
    let mut p = CorticalParams {
        spectral: Tensor::vector(spectral),
        temporal: Tensor::vector(temporal),
    };
    clamp_params(&mut p);
    p
}

/// Clamps `W` into `[0.05, 12]` and `|w|` into `[0.1, 100]`, keeping the sign.
pub fn clamp_params(p: &mut CorticalParams) {
    for s in p.spectral.data_mut() {
        *s = s.clamp(SPECTRAL_MIN, SPECTRAL_MAX);
    }
    for t in p.temporal.data_mut() {
        let sign = if *t < 0.0 { -1.0 } else { 1.0 };
        *t = sign * t.abs().clamp(TEMPORAL_MIN, TEMPORAL_MAX);
    }
}

/// Relative slack on the clamp bounds, so finite-difference probes of a
/// clamped parameter stay evaluable.
const RANGE_SLACK: f64 = 1e-3;

fn check_range(spectral: f64, temporal: f64) -> Result<()> {
    let (lo, hi) = (1.0 - RANGE_SLACK, 1.0 + RANGE_SLACK);
    let ok_s = (SPECTRAL_MIN * lo..=SPECTRAL_MAX * hi).contains(&spectral);
    let ok_t = (TEMPORAL_MIN * lo..=TEMPORAL_MAX * hi).contains(&temporal.abs());
    if ok_s && ok_t {
        Ok(())
    } else {
        Err(Error::Domain {
            op: "strf_kernel",
            msg: format!(
                "({spectral} cyc/oct, {temporal} Hz) outside [{SPECTRAL_MIN}, {SPECTRAL_MAX}] x +-[{TEMPORAL_MIN}, {TEMPORAL_MAX}]"
            ),
        })
    }
}

/// Half-widths (channels, frames) of the kernel support: two standard
/// deviations, i.e. one modulation period, on each axis.
pub fn half_extents(spectral: f64, temporal: f64) -> (usize, usize) {
    (
        (CHANNELS_PER_OCTAVE / spectral).floor() as usize,
        (FRAME_RATE / temporal.abs()).floor() as usize,
    )
}

/// Dense kernel `[2 hf + 1, 2 ht + 1]` (rows: channel offsets, columns: frame offsets).
pub fn strf_kernel(spectral: f64, temporal: f64) -> Result<Tensor> {
    check_range(spectral, temporal)?;
    let (hf, ht) = half_extents(spectral, temporal);
    let sigma_f = 1.0 / (2.0 * spectral);
    let sigma_t = 1.0 / (2.0 * temporal.abs());
    let mut k = Vec::with_capacity((2 * hf + 1) * (2 * ht + 1));
    for a in -(hf as isize)..=hf as isize {
        let df = a as f64 / CHANNELS_PER_OCTAVE;
        for b in -(ht as isize)..=ht as isize {
            let dt = b as f64 / FRAME_RATE;
            let env =
                (-df * df / (2.0 * sigma_f * sigma_f) - dt * dt / (2.0 * sigma_t * sigma_t)).exp();
            k.push(env * (2.0 * PI * (spectral * df + temporal * dt)).cos());
        }
    }
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    k.iter_mut().for_each(|v| *v /= norm);
    Tensor::new(vec![2 * hf + 1, 2 * ht + 1], k)
}

/// Tape handles of [`CorticalParams`].
#[derive(Clone, Copy, Debug)]
pub struct CorticalVars {
    pub spectral: Var,
    pub temporal: Var,
}

impl CorticalParams {
    pub fn to_tape(&self, tape: &mut Tape, learnable: bool) -> CorticalVars {
        CorticalVars {
            spectral: tape.leaf(self.spectral.clone(), learnable),
            temporal: tape.leaf(self.temporal.clone(), learnable),
        }
    }

    pub fn extents(&self) -> Vec<(usize, usize)> {
        self.spectral
            .data()
            .iter()
            .zip(self.temporal.data())
            .map(|(&s, &t)| half_extents(s, t))
            .collect()
    }

    /// Cortical response of a spectrogram `[129, T]` without recording gradients.
    pub fn respond(&self, s: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.to_tape(&mut tape, false);
        let sv = tape.constant(s.clone());
        let r = cortical_forward(&mut tape, sv, &vars, None)?;
        Ok(tape.value(r).clone())
    }
}

/// Gaussian-weighted cosine and sine factors along one axis:
/// `g(x) cos(2 pi x)` and `g(x) sin(2 pi x)` with `x = rate * offset`.
fn axis_factors(tape: &mut Tape, rate: Var, half: usize, unit: f64) -> (Var, Var) {
    let offsets = tape.constant(Tensor::vector(
        (-(half as isize)..=half as isize)
            .map(|i| i as f64 / unit)
            .collect(),
    ));
    let x = tape.scale(offsets, rate).expect("scalar rate");
    let x2 = tape.mul(x, x).expect("same shape");
    let x2 = tape.mul_const(x2, -2.0);
    let g = tape.exp(x2);
    let phase = tape.mul_const(x, 2.0 * PI);
    let c = tape.cos(phase);
    let s = tape.sin(phase);
    (
        tape.mul(g, c).expect("same shape"),
        tape.mul(g, s).expect("same shape"),
    )
}

fn centre(tape: &mut Tape, x: Var, half: usize, keep: usize) -> Result<Var> {
    if keep >= half {
        Ok(x)
    } else {
        tape.slice(x, 0, half - keep, half + keep + 1)
    }
}

/// Correlates `s [129, T]` with every filter (zero "same" padding), giving
/// `[40, 129, T]`.
///
/// Kernel support is fixed per call: `extents` overrides the half-widths
/// derived from the current parameter values, which lets finite-difference
/// checks hold the support constant. Taps that fall outside the input on
/// every placement are dropped; they cannot contribute under zero padding.
pub fn cortical_forward(
    tape: &mut Tape,
    s: Var,
    p: &CorticalVars,
    extents: Option<&[(usize, usize)]>,
) -> Result<Var> {
    let shape = tape.shape(s).to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::invalid(format!(
            "cortical_forward: expected a non-empty [channels, frames] input, got {shape:?}"
        )));
    }
    if !tape.value(s).all_finite() {
        return Err(Error::invalid("cortical_forward: non-finite input"));
    }
    let (h, w) = (shape[0], shape[1]);
    let spectral = tape.value(p.spectral).data().to_vec();
    let temporal = tape.value(p.temporal).data().to_vec();
    if spectral.len() != temporal.len() {
        return Err(Error::shape(
            "cortical_forward",
            &[spectral.len()],
            &[temporal.len()],
        ));
    }
    for (&sp, &tp) in spectral.iter().zip(&temporal) {
        check_range(sp, tp)?;
    }
    let derived: Vec<(usize, usize)>;
    let extents = match extents {
        Some(e) if e.len() == spectral.len() => e,
        Some(e) => {
            return Err(Error::shape(
                "cortical_forward",
                &[e.len()],
                &[spectral.len()],
            ))
        }
        None => {
            derived = spectral
                .iter()
                .zip(&temporal)
                .map(|(&sp, &tp)| half_extents(sp, tp))
                .collect();
            &derived
        }
    };

    let mut filters = Vec::with_capacity(spectral.len());
    for (i, &(hf, ht)) in extents.iter().enumerate() {
        let sp = tape.slice(p.spectral, 0, i, i + 1)?;
        let tp = tape.slice(p.temporal, 0, i, i + 1)?;
        let (af, bf) = axis_factors(tape, sp, hf, CHANNELS_PER_OCTAVE);
        let (at, bt) = axis_factors(tape, tp, ht, FRAME_RATE);

        // mean and energy over the full support, from axis sums
        let sums = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
            let m = tape.mul(a, b)?;
            Ok(tape.sum(m))
        };
        let (saf, sbf, sat, sbt) = (tape.sum(af), tape.sum(bf), tape.sum(at), tape.sum(bt));
        let count = ((2 * hf + 1) * (2 * ht + 1)) as f64;
        let m1 = tape.mul(saf, sat)?;
        let m2 = tape.mul(sbf, sbt)?;
        let mean = tape.sub(m1, m2)?;
        let mean = tape.mul_const(mean, 1.0 / count);
        let (aaf, aat) = (sums(tape, af, af)?, sums(tape, at, at)?);
        let (abf, abt) = (sums(tape, af, bf)?, sums(tape, at, bt)?);
        let (bbf, bbt) = (sums(tape, bf, bf)?, sums(tape, bt, bt)?);
        let e1 = tape.mul(aaf, aat)?;
        let e2 = tape.mul(abf, abt)?;
        let e2 = tape.mul_const(e2, 2.0);
        let e3 = tape.mul(bbf, bbt)?;
        let m_sq = tape.mul(mean, mean)?;
        let m_sq = tape.mul_const(m_sq, count);
        let energy = tape.sub(e1, e2)?;
        let energy = tape.add(energy, e3)?;
        let energy = tape.sub(energy, m_sq)?;
        let norm = tape.sqrt(energy);
        let one = tape.constant(Tensor::scalar(1.0));
        let inv = tape.div(one, norm)?;

        let (kf, kt) = (hf.min(h - 1), ht.min(w - 1));
        let af = centre(tape, af, hf, kf)?;
        let bf = centre(tape, bf, hf, kf)?;
        let at = centre(tape, at, ht, kt)?;
        let bt = centre(tape, bt, ht, kt)?;
        let u1 = tape.scale(af, inv)?;
        let neg_inv = tape.neg(inv);
        let u2 = tape.scale(bf, neg_inv)?;
        let dc = tape.mul(mean, neg_inv)?;
        let ones_f = tape.constant(Tensor::full(vec![2 * kf + 1], 1.0));
        let ones_t = tape.constant(Tensor::full(vec![2 * kt + 1], 1.0));
        let u3 = tape.scale(ones_f, dc)?;
        filters.push(vec![(u1, at), (u2, bt), (u3, ones_t)]);
    }
    tape.low_rank_correlate(s, &filters)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_grid_layout() {
        let p = init_cortical(CorticalInit::LogSpaced, 0);
        assert_eq!(p.spectral.len(), FILTERS);
        let positive = p.temporal.data().iter().filter(|&&t| t > 0.0).count();
        assert_eq!(positive, 20);
    }

    #[test]
    fn random_init_range_and_determinism() {
        let a = init_cortical(CorticalInit::Random, 7);
        assert_eq!(a, init_cortical(CorticalInit::Random, 7));
        assert_ne!(a, init_cortical(CorticalInit::Random, 8));
        for (&s, &t) in a.spectral.data().iter().zip(a.temporal.data()) {
            assert!(s > 0.0 && s <= 9.0);
            assert!(t.abs() > 0.0 && t.abs() <= 9.0);
        }
    }

    #[test]
    fn kernel_symmetry_and_norm() {
        let k = strf_kernel(2.0, 4.0).unwrap();
        let d = k.data();
        let n = d.len();
        for i in 0..n {
            assert!((d[i] - d[n - 1 - i]).abs() < 1e-12);
        }
        let norm: f64 = d.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(d.iter().sum::<f64>().abs() < 1e-12);
        assert!(strf_kernel(13.0, 4.0).is_err());
        assert!(strf_kernel(1.0, 0.05).is_err());
    }
}
