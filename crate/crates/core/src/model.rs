//! Full frontend + backend model, its named parameter set, ablation masks and
//! finite-difference gradient checks.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    check_components, conv2d_shifted, gelu, CheckStatus, ComponentCheck, Pins, Tape, Tensor, Var,
};
use crate::backends::{
    apply_mask, cross_entropy, enhancement_loss, normalize_features, BackendNet, ConvLayer,
    HeadKind,
};
use crate::cochlear::{self, cochlear_forward, CochlearParams, CHANNELS};
use crate::cortical::{
    self, cortical_forward, init_cortical, CorticalInit, CorticalParams, FILTERS,
};
use crate::error::{Error, Result};

pub type Task = HeadKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Every parameter learnable.
    Full,
    /// Only the cortical frontend parameters (and the backend) learn.
    Cortical,
    /// Frontend fixed at its initial values.
    Frozen,
    /// Cortical stage replaced by a 3x3 convolution with 40 output channels.
    Cnn,
}

macro_rules! name_enum {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::invalid(format!("unknown value `{s}`"))),
                }
            }
        }
    };
}

name_enum!(Ablation, Ablation::Full => "full", Ablation::Cortical => "cortical", Ablation::Frozen => "frozen", Ablation::Cnn => "cnn");
name_enum!(HeadKind, HeadKind::Classify => "classify", HeadKind::Enhance => "enhance");
name_enum!(CorticalInit, CorticalInit::LogSpaced => "log", CorticalInit::Random => "random");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub ablation: Ablation,
    pub cortical_init: CorticalInit,
    pub n_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(
        task: Task,
        ablation: Ablation,
        init: CorticalInit,
        n_classes: usize,
        seed: u64,
    ) -> Self {
        Self {
            task,
            ablation,
            cortical_init: init,
            n_classes,
            seed,
        }
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub enum Example {
    Classify { wave: Vec<f64>, labels: Vec<i32> },
    Enhance { mix: Vec<f64>, target: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub cochlear: CochlearParams,
    pub cortical: Option<CorticalParams>,
    pub replacement: Option<ConvLayer>,
    pub backend: BackendNet,
}

/// Parameter group used for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Cochlear,
    Cortical,
    Replacement,
    Backend,
}

impl Group {
    pub fn is_frontend(self) -> bool {
        matches!(self, Group::Cochlear | Group::Cortical)
    }
}

/// Everything recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// One variable per entry of [`Model::param_names`].
    pub params: Vec<Var>,
    pub spectrogram: Var,
    pub features: Var,
    /// Logits `[T, classes]` or mask `[T, 129]`.
    pub output: Var,
    /// Enhanced waveform (enhancement task only).
    pub estimate: Option<Var>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let init = config.cortical_init;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let (cortical, replacement) = if config.ablation == Ablation::Cnn {
            (None, Some(ConvLayer::init(&mut rng, 1, FILTERS)))
        } else {
            (Some(init_cortical(init, config.seed)), None)
        };
        if config.task == Task::Classify && config.n_classes < 2 {
            return Err(Error::invalid("classification needs at least two classes"));
        }
        let backend = match config.task {
            Task::Classify => BackendNet::classifier(&mut rng, FILTERS, config.n_classes),
            Task::Enhance => BackendNet::enhancer(&mut rng, FILTERS),
        };
        Ok(Self {
            config,
            cochlear: CochlearParams::default(),
            cortical,
            replacement,
            backend,
        })
    }

    /// `(name, group, value)` for every parameter tensor, in a fixed order.
    pub fn params(&self) -> Vec<(String, Group, &Tensor)> {
        let mut out = vec![
            (
                "cochlear.alpha".to_string(),
                Group::Cochlear,
                &self.cochlear.alpha,
            ),
            (
                "cochlear.inhibition".to_string(),
                Group::Cochlear,
                &self.cochlear.inhibition,
            ),
            (
                "cochlear.tau".to_string(),
                Group::Cochlear,
                &self.cochlear.tau,
            ),
        ];
        if let Some(c) = &self.cortical {
            out.push(("cortical.spectral".into(), Group::Cortical, &c.spectral));
            out.push(("cortical.temporal".into(), Group::Cortical, &c.temporal));
        }
        if let Some(r) = &self.replacement {
            out.push(("replacement.weight".into(), Group::Replacement, &r.weight));
            out.push(("replacement.bias".into(), Group::Replacement, &r.bias));
        }
        for (i, l) in self.backend.convs.iter().enumerate() {
            out.push((
                format!("backend.conv{}.weight", i + 1),
                Group::Backend,
                &l.weight,
            ));
            out.push((
                format!("backend.conv{}.bias", i + 1),
                Group::Backend,
                &l.bias,
            ));
        }
        out.push((
            "backend.head.weight".into(),
            Group::Backend,
            &self.backend.head_weight,
        ));
        out.push((
            "backend.head.bias".into(),
            Group::Backend,
            &self.backend.head_bias,
        ));
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _, _)| n).collect()
    }

    /// Mutable access in the same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.cochlear.alpha,
            &mut self.cochlear.inhibition,
            &mut self.cochlear.tau,
        ];
        if let Some(c) = &mut self.cortical {
            out.push(&mut c.spectral);
            out.push(&mut c.temporal);
        }
        if let Some(r) = &mut self.replacement {
            out.push(&mut r.weight);
            out.push(&mut r.bias);
        }
        for l in &mut self.backend.convs {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.backend.head_weight);
        out.push(&mut self.backend.head_bias);
        out
    }

    pub fn is_learnable(&self, group: Group) -> bool {
        match (self.config.ablation, group) {
            (_, Group::Backend) | (_, Group::Replacement) => true,
            (Ablation::Full, _) => true,
            (Ablation::Cortical, g) => g == Group::Cortical,
            (Ablation::Frozen, _) => false,
            (Ablation::Cnn, g) => g == Group::Cochlear,
        }
    }

    /// Learnable scalars in the cochlear and cortical stages.
    pub fn frontend_learnable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, g, _)| g.is_frontend() && self.is_learnable(*g))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// Re-applies the parameter floors and ranges.
    pub fn clamp(&mut self) {
        cochlear::clamp_params(&mut self.cochlear);
        if let Some(c) = &mut self.cortical {
            cortical::clamp_params(c);
        }
    }

    /// Current cortical kernel half-widths (empty in the cnn ablation).
    pub fn extents(&self) -> Vec<(usize, usize)> {
        self.cortical
            .as_ref()
            .map(|c| c.extents())
            .unwrap_or_default()
    }

    /// Records waveform -> output on `tape`. With `track` the learnable
    /// parameters require gradients; `extents` pins cortical kernel support.
    pub fn forward(
        &self,
        tape: &mut Tape,
        wave: &[f64],
        track: bool,
        extents: Option<&[(usize, usize)]>,
    ) -> Result<Forward> {
        let mut params = Vec::new();
        let coch = {
            let l = track && self.is_learnable(Group::Cochlear);
            let v = self.cochlear.to_tape(tape, l);
            params.extend([v.alpha, v.inhibition, v.tau]);
            v
        };
        let x = tape.constant(Tensor::vector(wave.to_vec()));
        let spectrogram = cochlear_forward(tape, x, &coch)?;
        let raw = if let Some(c) = &self.cortical {
            let v = c.to_tape(tape, track && self.is_learnable(Group::Cortical));
            params.extend([v.spectral, v.temporal]);
            cortical_forward(tape, spectrogram, &v, extents)?
        } else {
            let r = self
                .replacement
                .as_ref()
                .expect("cnn ablation has a replacement layer");
            let (w, b) = (
                tape.leaf(r.weight.clone(), track),
                tape.leaf(r.bias.clone(), track),
            );
            params.extend([w, b]);
            let t = tape.shape(spectrogram)[1];
            let s = tape.reshape(spectrogram, &[1, CHANNELS, t])?;
            tape.conv2d(s, w, b)?
        };
        let features = normalize_features(tape, raw)?;
        let vars = self.backend.to_tape(tape, track);
        for &(w, b) in &vars.convs {
            params.extend([w, b]);
        }
        params.extend([vars.head_weight, vars.head_bias]);
        let output = self.backend.forward(tape, &vars, features)?;
        let estimate = match self.config.task {
            Task::Classify => None,
            Task::Enhance => Some(apply_mask(tape, x, output)?),
        };
        Ok(Forward {
            params,
            spectrogram,
            features,
            output,
            estimate,
        })
    }

    fn example_input(ex: &Example) -> &[f64] {
        match ex {
            Example::Classify { wave, .. } => wave,
            Example::Enhance { mix, .. } => mix,
        }
    }

    /// Records the task loss for one example.
    pub fn loss(
        &self,
        tape: &mut Tape,
        ex: &Example,
        track: bool,
        extents: Option<&[(usize, usize)]>,
    ) -> Result<(Var, Forward)> {
        let fwd = self.forward(tape, Self::example_input(ex), track, extents)?;
        let loss = self.task_loss(tape, ex, &fwd)?;
        Ok((loss, fwd))
    }

    fn task_loss(&self, tape: &mut Tape, ex: &Example, fwd: &Forward) -> Result<Var> {
        match (ex, fwd.estimate) {
            (Example::Classify { labels, .. }, None) => cross_entropy(tape, fwd.output, labels),
            (Example::Enhance { target, .. }, Some(est)) => {
                let t = tape.constant(Tensor::vector(target.clone()));
                enhancement_loss(tape, est, t)
            }
            _ => Err(Error::invalid("example kind does not match the model task")),
        }
    }

    /// Loss value and gradients (zeros for frozen tensors) for one example.
    pub fn loss_and_grads(&self, ex: &Example) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let (loss, fwd) = self.loss(&mut tape, ex, true, None)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        let out = fwd
            .params
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.shape(v)))
            .collect();
        Ok((value, out))
    }

    /// Loss value without gradients, kernel support pinned to `extents`.
    pub fn loss_value(&self, ex: &Example, extents: Option<&[(usize, usize)]>) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.loss(&mut tape, ex, false, extents)?;
        tape.value(loss).item()
    }
}

/// Seeded random example for gradient checks: Gaussian noise input with RMS
/// 0.1, random frame labels or a second noise signal as target.
pub fn random_example(task: Task, n_classes: usize, seconds: f64, seed: u64) -> Result<Example> {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    let n = crate::signal::samples_for(seconds);
    if n < crate::HOP {
        return Err(Error::invalid(format!("{seconds} s is too short")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
            .collect()
    };
    Ok(match task {
        Task::Classify => {
            let wave = noise(&mut rng);
            let labels = (0..cochlear::frame_count(n))
                .map(|_| rng.gen_range(0..n_classes.max(1)) as i32)
                .collect();
            Example::Classify { wave, labels }
        }
        Task::Enhance => Example::Enhance {
            mix: noise(&mut rng),
            target: noise(&mut rng),
        },
    })
}

/// Result of [`gradient_check`].
pub struct GradCheckReport {
    pub rows: Vec<(Group, ComponentCheck)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|(_, c)| c.status == CheckStatus::Pass)
    }

    pub fn count(&self, pred: impl Fn(Group) -> bool) -> usize {
        self.rows.iter().filter(|(g, _)| pred(*g)).count()
    }
}

/// Which parameters [`gradient_check`] covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckScope {
    Frontend,
    Backend,
    All,
}

impl CheckScope {
    fn covers(self, g: Group) -> bool {
        match self {
            CheckScope::Frontend => g.is_frontend(),
            CheckScope::Backend => !g.is_frontend(),
            CheckScope::All => true,
        }
    }
}

/// Compares tape gradients of the example loss against central differences.
///
/// Every parameter is treated as learnable for the check regardless of the
/// ablation. Kernel support and ReLU/L1 branches stay at those of the base
/// point. Frontend components re-run the whole model; backend components
/// reuse cached activations and only recompute what a single weight affects.
pub fn gradient_check(
    model: &Model,
    ex: &Example,
    scope: CheckScope,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    gradient_check_where(model, ex, |_, g| scope.covers(g), step, tol)
}

/// [`gradient_check`] restricted to the parameter tensors `select` accepts.
pub fn gradient_check_where(
    model: &Model,
    ex: &Example,
    select: impl Fn(&str, Group) -> bool,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut full = model.clone();
    full.config.ablation = if model.cortical.is_some() {
        Ablation::Full
    } else {
        Ablation::Cnn
    };
    let extents = full.extents();
    let mut tape = Tape::recording_pins();
    let (loss, fwd) = full.loss(&mut tape, ex, true, Some(&extents))?;
    let grads = tape.backward(loss)?;
    let pins = tape.pins();
    let analytic: Vec<Tensor> = fwd
        .params
        .iter()
        .map(|&v| grads.get_or_zeros(v, tape.shape(v)))
        .collect();
    let features = tape.value(fwd.features).clone();
    drop(tape);

    let params = full.params();
    let n_backend_first = params
        .iter()
        .position(|(_, g, _)| *g == Group::Backend)
        .unwrap_or(params.len());
    let mut rows = Vec::new();
    for (p, (name, group, value)) in params.iter().enumerate() {
        if !select(name, *group) {
            continue;
        }
        let checks = if *group == Group::Backend {
            Vec::new()
        } else {
            let eval = |i: usize, v: f64| -> Result<f64> {
                let mut m = full.clone();
                m.params_mut()[p].data_mut()[i] = v;
                let mut tape = Tape::replaying(&pins);
                let (loss, _) = m.loss(&mut tape, ex, false, Some(&extents))?;
                tape.value(loss).item()
            };
            check_components(name, analytic[p].data(), value.data(), step, tol, eval)
        };
        rows.extend(checks.into_iter().map(|c| (*group, c)));
    }
    let backend = &params[n_backend_first..];
    if backend.iter().any(|(name, g, _)| select(name, *g)) {
        let staged = Staged::new(&full, ex, features)?;
        for (p, (name, group, value)) in params.iter().enumerate().skip(n_backend_first) {
            debug_assert_eq!(*group, Group::Backend);
            if !select(name, *group) {
                continue;
            }
            let slot = p - n_backend_first;
            let eval = |i: usize, v: f64| staged.eval(slot, i, v);
            let checks = check_components(name, analytic[p].data(), value.data(), step, tol, eval);
            rows.extend(checks.into_iter().map(|c| (Group::Backend, c)));
        }
    }
    Ok(GradCheckReport { rows })
}

/// Cached backend activations for cheap single-weight re-evaluation.
struct Staged<'a> {
    model: &'a Model,
    ex: &'a Example,
    /// Input of each convolution layer (features first).
    inputs: Vec<Tensor>,
    /// Pre-activation output of each convolution layer.
    pre: Vec<Tensor>,
    /// Activation output of the last convolution layer.
    last: Tensor,
    /// Branches of the loss head at the base point.
    pins: Pins,
}

impl<'a> Staged<'a> {
    fn new(model: &'a Model, ex: &'a Example, features: Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let mut x = tape.constant(features.clone());
        let mut inputs = vec![features];
        let mut pre = Vec::new();
        for l in &model.backend.convs {
            let w = tape.constant(l.weight.clone());
            let b = tape.constant(l.bias.clone());
            let y = tape.conv2d(x, w, b)?;
            pre.push(tape.value(y).clone());
            x = tape.gelu(y);
            inputs.push(tape.value(x).clone());
        }
        let last = inputs.pop().expect("at least one layer");
        let mut staged = Self {
            model,
            ex,
            inputs,
            pre,
            last,
            pins: Pins::default(),
        };
        let mut tape = Tape::recording_pins();
        let last = tape.constant(staged.last.clone());
        staged.finish(&mut tape, &model.backend, last)?;
        staged.pins = tape.pins();
        Ok(staged)
    }

    fn finish(&self, tape: &mut Tape, net: &BackendNet, last: Var) -> Result<f64> {
        let vars = net.to_tape(tape, false);
        let output = net.head(tape, &vars, last)?;
        let loss = match self.ex {
            Example::Classify { labels, .. } => cross_entropy(tape, output, labels)?,
            Example::Enhance { mix, target } => {
                let x = tape.constant(Tensor::vector(mix.clone()));
                let est = apply_mask(tape, x, output)?;
                let t = tape.constant(Tensor::vector(target.clone()));
                enhancement_loss(tape, est, t)?
            }
        };
        tape.value(loss).item()
    }

    /// Loss with component `i` of backend tensor `slot` set to `v`.
    fn eval(&self, slot: usize, i: usize, v: f64) -> Result<f64> {
        let layers = self.model.backend.convs.len();
        let mut tape = Tape::replaying(&self.pins);
        if slot >= 2 * layers {
            let mut net = self.model.backend.clone();
            let t = if slot == 2 * layers {
                &mut net.head_weight
            } else {
                &mut net.head_bias
            };
            t.data_mut()[i] = v;
            let last = tape.constant(self.last.clone());
            return self.finish(&mut tape, &net, last);
        }
        let layer = slot / 2;
        let conv = &self.model.backend.convs[layer];
        let (cin, h, w) = (
            conv.weight.shape()[1],
            self.pre[layer].shape()[1],
            self.pre[layer].shape()[2],
        );
        let hw = h * w;
        // a single weight (or bias) moves one pre-activation channel by
        // delta times a shifted input plane (or by delta everywhere)
        let (out_ch, pre_new) = if slot % 2 == 0 {
            let (o, c, tap) = (i / (cin * 9), (i / 9) % cin, i % 9);
            let delta = v - conv.weight.data()[i];
            let plane = &self.inputs[layer].data()[c * hw..(c + 1) * hw];
            let mut pre = self.pre[layer].data()[o * hw..(o + 1) * hw].to_vec();
            add_shifted(&mut pre, plane, h, w, tap / 3, tap % 3, delta);
            (o, pre)
        } else {
            let delta = v - conv.bias.data()[i];
            let pre: Vec<f64> = self.pre[layer].data()[i * hw..(i + 1) * hw]
                .iter()
                .map(|p| p + delta)
                .collect();
            (i, pre)
        };
        let a_new: Vec<f64> = pre_new.iter().map(|&p| gelu(p)).collect();
        let activation = if layer + 1 < layers {
            &self.inputs[layer + 1]
        } else {
            &self.last
        };
        let a_old = &activation.data()[out_ch * hw..(out_ch + 1) * hw];
        if layer + 1 == layers {
            let mut last = self.last.clone();
            last.data_mut()[out_ch * hw..(out_ch + 1) * hw].copy_from_slice(&a_new);
            let last = tape.constant(last);
            return self.finish(&mut tape, &self.model.backend, last);
        }
        // propagate the single-channel change through the next layer linearly
        let net = &self.model.backend;
        let next = &net.convs[layer + 1];
        let cout = next.weight.shape()[0];
        let diff: Vec<f64> = a_new.iter().zip(a_old).map(|(a, b)| a - b).collect();
        let mut pre = self.pre[layer + 1].clone();
        for o in 0..cout {
            let dst = &mut pre.data_mut()[o * hw..(o + 1) * hw];
            for tap in 0..9 {
                let k = next.weight.data()[(o * next.weight.shape()[1] + out_ch) * 9 + tap];
                add_shifted(dst, &diff, h, w, tap / 3, tap % 3, k);
            }
        }
        let mut x = pre.map(gelu_logistic);
        for l in &net.convs[layer + 2..] {
            x = conv2d_shifted(&x, &l.weight, &l.bias)?.map(gelu_logistic);
        }
        let x = tape.constant(x);
        self.finish(&mut tape, net, x)
    }
}

/// [`gelu`] written as `x * sigmoid(2u)`. Agrees to rounding and avoids `tanh`,
/// which dominates the cost of re-running whole layers.
fn gelu_logistic(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    x / (1.0 + (-2.0 * C * (x + 0.044715 * x * x * x)).exp())
}

/// `dst += k * shift(plane)`, where tap `(dy, dx)` of a 3x3 same-padded
/// correlation reads `plane[y + dy - 1, x + dx - 1]` (zero outside).
fn add_shifted(dst: &mut [f64], plane: &[f64], h: usize, w: usize, dy: usize, dx: usize, k: f64) {
    let (oy, ox) = (dy as isize - 1, dx as isize - 1);
    for y in 0..h {
        let sy = y as isize + oy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let (xlo, xhi) = (
            (-ox).max(0) as usize,
            (w as isize - ox).min(w as isize) as usize,
        );
        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
        for x in xlo..xhi {
            dst[y * w + x] += k * src[(x as isize + ox) as usize];
        }
    }
}
