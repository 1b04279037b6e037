//! Dataset manifests, deterministic batch sampling, the joint training loop,
//! evaluation protocols and checkpoints.

mod checkpoint;
mod eval;
mod manifest;
mod toy;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tensor};
use crate::backends::UNLABELED;
use crate::cortical::CorticalInit;
use crate::error::{Error, Result};
use crate::model::{Ablation, Example, Model, ModelConfig, Task};
use crate::signal::{gen_pink_noise, samples_for, snr_gain, Waveform};
use crate::HOP;

pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_VERSION};
pub use eval::{
    evaluate, evaluate_enhancement_with, ConditionReport, EvalOptions, EvalReport, Protocol,
};
pub use manifest::{read_labels, write_labels, Dataset, Item, Manifest, ManifestItem, Role};
pub use toy::{toy_classification, toy_enhancement};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub ablation: Ablation,
    pub cortical_init: CorticalInit,
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    /// Mixing SNR for enhancement examples.
    pub snr_db: f64,
    /// Pink-noise SNRs of the classification robustness protocol.
    pub eval_snrs: Vec<f64>,
    /// Length of each training crop.
    pub crop_seconds: f64,
    pub n_classes: usize,
    /// Steps between probe-batch metrics in the training log (0 disables).
    pub eval_every: u64,
    /// When set, classification crops are mixed with pink noise at this SNR.
    #[serde(default)]
    pub train_noise_snr_db: Option<f64>,
}

impl TrainConfig {
    pub fn new(
        task: Task,
        ablation: Ablation,
        cortical_init: CorticalInit,
        n_classes: usize,
        seed: u64,
    ) -> Self {
        Self {
            task,
            ablation,
            cortical_init,
            seed,
            lr: 0.001,
            batch: 4,
            steps: 2000,
            snr_db: 0.0,
            eval_snrs: vec![-3.0, 0.0, 3.0],
            crop_seconds: 1.0,
            n_classes,
            eval_every: 100,
            train_noise_snr_db: None,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(
            self.task,
            self.ablation,
            self.cortical_init,
            self.n_classes,
            self.seed,
        )
    }

    pub fn crop_len(&self) -> Result<usize> {
        let n = samples_for(self.crop_seconds);
        if !(self.crop_seconds > 0.0) || n < HOP {
            return Err(Error::invalid(format!(
                "crop of {} s is too short",
                self.crop_seconds
            )));
        }
        Ok(n)
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        self.crop_len().map(|_| ())
    }
}

/// Training data: the main manifest plus an optional separate noise manifest.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub main: &'a Dataset,
    pub noise: Option<&'a Dataset>,
}

impl<'a> TrainData<'a> {
    pub fn new(main: &'a Dataset, noise: Option<&'a Dataset>) -> Self {
        Self { main, noise }
    }

    fn targets(&self) -> Vec<&'a Item> {
        self.main.targets()
    }

    fn interferers(&self) -> Vec<&'a Item> {
        match self.noise {
            Some(n) => n.items.iter().collect(),
            None => self.main.interferers(),
        }
    }
}

/// Seed of the generator that draws the batch for `step`.
pub fn batch_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Frame-aligned random crop of `len` samples; short items are zero padded
/// at the end and their padding frames are unlabeled.
pub fn crop(item: &Item, len: usize, rng: &mut impl Rng) -> (Vec<f64>, Option<Vec<i32>>) {
    let src = item.wave.samples();
    let frames = len.div_ceil(HOP);
    let offset = if src.len() > len {
        HOP * rng.gen_range(0..=(src.len() - len) / HOP)
    } else {
        0
    };
    let mut wave = vec![0.0; len];
    let end = (offset + len).min(src.len());
    wave[..end - offset].copy_from_slice(&src[offset..end]);
    let labels = item.labels.as_ref().map(|l| {
        let first = offset / HOP;
        (0..frames)
            .map(|t| l.get(first + t).copied().unwrap_or(UNLABELED))
            .collect()
    });
    (wave, labels)
}

fn pick<'a>(items: &[&'a Item], rng: &mut impl Rng, what: &str) -> Result<&'a Item> {
    if items.is_empty() {
        return Err(Error::Manifest(format!("no {what} items available")));
    }
    Ok(items[rng.gen_range(0..items.len())])
}

/// Mixes `noise` into `clean` at `snr_db`.
fn mix(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    let g = snr_gain(clean, noise, snr_db)?;
    Ok(clean.iter().zip(noise).map(|(s, n)| s + g * n).collect())
}

/// Draws `cfg.batch` examples; the result depends only on `(cfg.seed, step)`.
pub fn sample_batch(data: &TrainData<'_>, cfg: &TrainConfig, step: u64) -> Result<Vec<Example>> {
    let len = cfg.crop_len()?;
    let bs = batch_seed(cfg.seed, step);
    let mut rng = ChaCha8Rng::seed_from_u64(bs);
    let targets = data.targets();
    let mut out = Vec::with_capacity(cfg.batch);
    for i in 0..cfg.batch {
        match cfg.task {
            Task::Classify => {
                let labeled: Vec<&Item> = targets
                    .iter()
                    .copied()
                    .filter(|t| t.labels.is_some())
                    .collect();
                let item = pick(&labeled, &mut rng, "labeled")?;
                let (mut wave, labels) = crop(item, len, &mut rng);
                if let Some(snr) = cfg.train_noise_snr_db {
                    let noise = gen_pink_noise(cfg.crop_seconds, bs.wrapping_add(i as u64))?;
                    wave = mix(&wave, &noise.samples()[..len], snr)?;
                }
                out.push(Example::Classify {
                    wave,
                    labels: labels.expect("filtered to labeled items"),
                });
            }
            Task::Enhance => {
                let interferers = data.interferers();
                let speech = pick(&targets, &mut rng, "speech")?;
                let noise = pick(&interferers, &mut rng, "noise")?;
                let (target, _) = crop(speech, len, &mut rng);
                let (n, _) = crop(noise, len, &mut rng);
                let mix = mix(&target, &n, cfg.snr_db)?;
                out.push(Example::Enhance { mix, target });
            }
        }
    }
    Ok(out)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    /// Probe-batch accuracy (classify) or SI-SDR in dB (enhance).
    pub metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self, metric_name: &str) -> String {
        let mut s = format!("step,loss,{metric_name}\n");
        for r in &self.rows {
            let m = r.metric.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", r.step, r.loss, m);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, metric_name: &str) -> Result<()> {
        std::fs::write(path, self.to_csv(metric_name))?;
        Ok(())
    }

    /// Mean loss over logged steps in `[from, to)`.
    pub fn mean_loss(&self, from: u64, to: u64) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.step >= from && r.step < to)
            .map(|r| r.loss)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Model, optimizer and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config())?;
        let adam = Self::fresh_adam(&model, config.lr);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
        })
    }

    fn fresh_adam(model: &Model, lr: f64) -> AdamState {
        let params = model.params();
        let shapes: Vec<&[usize]> = learnable_indices(model)
            .into_iter()
            .map(|i| params[i].2.shape())
            .collect();
        AdamState::new(&shapes, lr)
    }

    /// Names of the tensors updated by the optimizer, in moment-slot order.
    pub fn learnable_names(&self) -> Vec<String> {
        let names = self.model.param_names();
        learnable_indices(&self.model)
            .into_iter()
            .map(|i| names[i].clone())
            .collect()
    }

    /// Runs one optimizer step and returns the mean batch loss. On error the
    /// trainer is left unchanged.
    pub fn train_step(&mut self, data: &TrainData<'_>) -> Result<f64> {
        let batch = sample_batch(data, &self.config, self.step)?;
        let model = &self.model;
        let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
            .par_iter()
            .map(|ex| model.loss_and_grads(ex))
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut total: Option<Vec<Tensor>> = None;
        for r in results {
            let (l, grads) = r?;
            loss += l * scale;
            match &mut total {
                None => total = Some(grads.into_iter().map(|g| g.map(|v| v * scale)).collect()),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(a, g)| *a += g * scale);
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                batch_seed: batch_seed(self.config.seed, self.step),
            });
        }
        let total = total.expect("batch is non-empty");
        let idx = learnable_indices(&self.model);
        let names = self.learnable_names();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let grads: Vec<&Tensor> = idx.iter().map(|&i| &total[i]).collect();
        let mut adam = self.adam.clone();
        let mut model = self.model.clone();
        {
            let mut all = model.params_mut();
            let mut params: Vec<&mut Tensor> = Vec::with_capacity(idx.len());
            for (i, p) in all.drain(..).enumerate() {
                if idx.contains(&i) {
                    params.push(p);
                }
            }
            adam.step(&mut params, &grads, &names)?;
        }
        model.clamp();
        self.model = model;
        self.adam = adam;
        self.step += 1;
        Ok(loss)
    }

    /// Trains until `self.step == until`, appending to `log`.
    pub fn run(&mut self, data: &TrainData<'_>, until: u64, log: &mut TrainLog) -> Result<()> {
        while self.step < until {
            let step = self.step;
            let loss = self.train_step(data)?;
            let metric = if self.config.eval_every > 0 && (step + 1) % self.config.eval_every == 0 {
                Some(self.probe_metric(data)?)
            } else {
                None
            };
            log.rows.push(LogRow { step, loss, metric });
        }
        Ok(())
    }

    /// Metric on a fixed probe batch drawn from the training data.
    pub fn probe_metric(&self, data: &TrainData<'_>) -> Result<f64> {
        let batch = sample_batch(data, &self.config, u64::MAX)?;
        let values: Vec<Result<f64>> = batch
            .par_iter()
            .map(|ex| eval::example_metric(&self.model, ex))
            .collect();
        let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    }

    pub fn metric_name(&self) -> &'static str {
        match self.config.task {
            Task::Classify => "probe_accuracy",
            Task::Enhance => "probe_si_sdr_db",
        }
    }
}

fn learnable_indices(model: &Model) -> Vec<usize> {
    model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, (_, g, _))| model.is_learnable(*g))
        .map(|(i, _)| i)
        .collect()
}

/// Crops `w` or zero pads it to exactly `len` samples.
pub fn fit_length(w: &Waveform, len: usize) -> Vec<f64> {
    let mut v = w.samples().to_vec();
    v.resize(len, 0.0);
    v
}
