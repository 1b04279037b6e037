//! Task heads on top of the cortical features, plus their losses and metrics.
//!
//! Both heads are stacks of 3x3 same-padded convolutions with GeLU after each
//! layer. The classifier averages its last feature map over frequency and maps
//! each frame to class logits; the enhancer maps its single-channel output to
//! a sigmoid mask over the 129 bins of a 256-sample STFT.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::cochlear::CHANNELS;
use crate::error::{Error, Result};
use crate::signal::StftPlan;
use crate::HOP;

pub const MASK_WINDOW: usize = 256;
pub const LOSS_WINDOWS: [usize; 3] = [256, 512, 1024];
pub const CLASSIFIER_CHANNELS: [usize; 3] = [10, 20, 40];
pub const ENHANCER_CHANNELS: [usize; 4] = [20, 40, 10, 1];
/// Label value for frames that carry no class.
pub const UNLABELED: i32 = -1;
pub const SI_SDR_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Frequency mean pool, then per-frame class logits.
    Classify,
    /// Per-frame sigmoid mask over STFT bins.
    Enhance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// LeCun-uniform weights (`+-sqrt(3 / fan_in)`) and zero bias.
fn lecun(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let limit = (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("init shape")
}

impl ConvLayer {
    pub fn init(rng: &mut impl Rng, cin: usize, cout: usize) -> Self {
        Self {
            weight: lecun(rng, vec![cout, cin, 3, 3], cin * 9),
            bias: Tensor::zeros(vec![cout]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendNet {
    pub kind: HeadKind,
    pub convs: Vec<ConvLayer>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct BackendVars {
    pub convs: Vec<(Var, Var)>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl BackendNet {
    pub fn classifier(rng: &mut impl Rng, in_channels: usize, n_classes: usize) -> Self {
        let mut cin = in_channels;
        let convs = CLASSIFIER_CHANNELS
            .iter()
            .map(|&c| {
                let l = ConvLayer::init(rng, cin, c);
                cin = c;
                l
            })
            .collect();
        Self {
            kind: HeadKind::Classify,
            convs,
            head_weight: lecun(rng, vec![n_classes, cin], cin),
            head_bias: Tensor::zeros(vec![n_classes]),
        }
    }

    pub fn enhancer(rng: &mut impl Rng, in_channels: usize) -> Self {
        let mut cin = in_channels;
        let convs = ENHANCER_CHANNELS
            .iter()
            .map(|&c| {
                let l = ConvLayer::init(rng, cin, c);
                cin = c;
                l
            })
            .collect();
        let bins = MASK_WINDOW / 2 + 1;
        Self {
            kind: HeadKind::Enhance,
            convs,
            head_weight: lecun(rng, vec![bins, CHANNELS], CHANNELS),
            head_bias: Tensor::zeros(vec![bins]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>()
            + self.head_weight.len()
            + self.head_bias.len()
    }

    pub fn to_tape(&self, tape: &mut Tape, learnable: bool) -> BackendVars {
        BackendVars {
            convs: self
                .convs
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone(), learnable),
                        tape.leaf(l.bias.clone(), learnable),
                    )
                })
                .collect(),
            head_weight: tape.leaf(self.head_weight.clone(), learnable),
            head_bias: tape.leaf(self.head_bias.clone(), learnable),
        }
    }

    /// Convolution stack then head: logits `[T, classes]` or mask `[T, 129]`.
    pub fn forward(&self, tape: &mut Tape, vars: &BackendVars, features: Var) -> Result<Var> {
        let mut x = features;
        for &(w, b) in &vars.convs {
            let y = tape.conv2d(x, w, b)?;
            x = tape.gelu(y);
        }
        self.head(tape, vars, x)
    }

    /// Head applied to the last convolution activation `[C, 129, T]`.
    pub fn head(&self, tape: &mut Tape, vars: &BackendVars, last: Var) -> Result<Var> {
        let shape = tape.shape(last).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("backend head", &shape, &[0, CHANNELS, 0]));
        }
        match self.kind {
            HeadKind::Classify => {
                let pooled = tape.sum_axis(last, 1)?;
                let pooled = tape.mul_const(pooled, 1.0 / shape[1] as f64);
                let frames = tape.transpose(pooled)?;
                tape.affine(frames, vars.head_weight, vars.head_bias)
            }
            HeadKind::Enhance => {
                let plane = tape.reshape(last, &[shape[0] * shape[1], shape[2]])?;
                let frames = tape.transpose(plane)?;
                let logits = tape.affine(frames, vars.head_weight, vars.head_bias)?;
                Ok(tape.sigmoid(logits))
            }
        }
    }
}

/// Scales a feature tensor to unit RMS (zero stays zero).
pub fn normalize_features(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let ms = tape.mean(sq);
    let ms = tape.add_const(ms, 1e-20);
    let rms = tape.sqrt(ms);
    let one = tape.constant(Tensor::scalar(1.0));
    let inv = tape.div(one, rms)?;
    tape.scale(x, inv)
}

/// Applies a real `[T, 129]` mask to the 256/80 STFT of `mix` and resynthesizes.
pub fn apply_mask(tape: &mut Tape, mix: Var, mask: Var) -> Result<Var> {
    let n = tape.shape(mix)[0];
    let plan = StftPlan::new(MASK_WINDOW, HOP, n)?;
    let (re, im) = plan.forward(tape, mix)?;
    if tape.shape(mask) != tape.shape(re) {
        return Err(Error::shape("apply_mask", tape.shape(mask), tape.shape(re)));
    }
    let re = tape.mul(re, mask)?;
    let im = tape.mul(im, mask)?;
    plan.inverse(tape, re, im)
}

/// Mean over labeled frames of `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[i32]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    let (frames, classes) = (shape[0], shape[1]);
    let mut picked = Vec::new();
    let mut rows = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        if l == UNLABELED {
            continue;
        }
        if l < 0 || l as usize >= classes {
            return Err(Error::invalid(format!(
                "cross_entropy: label {l} at frame {t} outside 0..{classes}"
            )));
        }
        picked.push(t * classes + l as usize);
        rows.push(t);
    }
    if rows.is_empty() {
        return Err(Error::invalid("cross_entropy: every frame is unlabeled"));
    }
    // shift each row by its maximum; softmax is invariant to it
    let v = tape.value(logits).data();
    let shift: Vec<f64> = (0..frames)
        .flat_map(|t| {
            let m = v[t * classes..(t + 1) * classes]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            std::iter::repeat(m).take(classes)
        })
        .collect();
    let shift = tape.constant(Tensor::new(vec![frames, classes], shift)?);
    let z = tape.sub(logits, shift)?;
    let e = tape.exp(z);
    let s = tape.sum_axis(e, 1)?;
    let lse = tape.log(s);
    let n = rows.len();
    let lse = tape.gather(lse, Arc::from(rows), &[n])?;
    let zl = tape.gather(z, Arc::from(picked), &[n])?;
    let nll = tape.sub(lse, zl)?;
    Ok(tape.mean(nll))
}

/// Fraction of labeled frames whose arg-max logit (lowest index on ties)
/// equals the label; 0 when no frame is labeled.
pub fn accuracy(logits: &Tensor, labels: &[i32]) -> f64 {
    let (correct, total) = accuracy_counts(logits, labels);
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

pub fn accuracy_counts(logits: &Tensor, labels: &[i32]) -> (usize, usize) {
    let classes = logits.shape().last().copied().unwrap_or(0);
    if classes == 0 {
        return (0, 0);
    }
    let mut correct = 0;
    let mut total = 0;
    for (row, &l) in logits.data().chunks(classes).zip(labels) {
        if l == UNLABELED {
            continue;
        }
        total += 1;
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best as i32 == l {
            correct += 1;
        }
    }
    (correct, total)
}

/// L1 on samples plus, per STFT window, the mean absolute difference over
/// real and imaginary parts (hop = window / 4).
pub fn enhancement_loss(tape: &mut Tape, estimate: Var, target: Var) -> Result<Var> {
    let (se, st) = (tape.shape(estimate).to_vec(), tape.shape(target).to_vec());
    if se != st || se.len() != 1 {
        return Err(Error::shape("enhancement_loss", &se, &st));
    }
    let mut loss = tape.l1(estimate, target)?;
    for &w in &LOSS_WINDOWS {
        let plan = StftPlan::new(w, w / 4, se[0])?;
        let (er, ei) = plan.forward(tape, estimate)?;
        let (tr, ti) = plan.forward(tape, target)?;
        let lr = tape.l1(er, tr)?;
        let li = tape.l1(ei, ti)?;
        let both = tape.add(lr, li)?;
        let both = tape.mul_const(both, 0.5);
        loss = tape.add(loss, both)?;
    }
    Ok(loss)
}

/// Scale-invariant SDR in dB, capped at +100 dB for a zero residual.
pub fn si_sdr(estimate: &[f64], target: &[f64]) -> Result<f64> {
    if estimate.len() != target.len() {
        return Err(Error::invalid(format!(
            "si_sdr: lengths differ ({} vs {})",
            estimate.len(),
            target.len()
        )));
    }
    let tt: f64 = target.iter().map(|v| v * v).sum();
    if tt == 0.0 {
        return Err(Error::invalid("si_sdr: zero target"));
    }
    let a = estimate.iter().zip(target).map(|(e, t)| e * t).sum::<f64>() / tt;
    let signal = a * a * tt;
    let residual: f64 = estimate
        .iter()
        .zip(target)
        .map(|(e, t)| (a * t - e).powi(2))
        .sum();
    if residual == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (signal / residual).log10()).min(SI_SDR_CAP_DB))
}

/// Metric report record; `ci95 = 1.96 * sd / sqrt(n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub n_items: usize,
    pub ci95: f64,
}

impl MetricRecord {
    /// Mean and 95% half-width of per-item values (sample standard deviation).
    pub fn from_values(metric: impl Into<String>, values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 {
            0.0
        } else {
            values.iter().sum::<f64>() / n as f64
        };
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        let ci95 = if n == 0 {
            0.0
        } else {
            1.96 * sd / (n as f64).sqrt()
        };
        Self {
            metric: metric.into(),
            value: mean,
            n_items: n,
            ci95,
        }
    }
}
