use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{crop, mix, pick, TrainData};
use crate::autodiff::Tape;
use crate::backends::{accuracy_counts, si_sdr, MetricRecord, UNLABELED};
use crate::error::{Error, Result};
use crate::model::{Example, Model, Task};
use crate::signal::{gen_pink_noise, samples_for};
use crate::HOP;

/// Evaluation protocol.
#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    /// Frame accuracy on unprocessed items.
    Clean,
    /// Frame accuracy clean and with pink noise at each listed SNR.
    Pink(Vec<f64>),
    /// SI-SDR of enhanced 0 dB mixtures.
    Enhance0db,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Clean => f.write_str("clean"),
            Protocol::Pink(s) => {
                let list: Vec<String> = s.iter().map(|v| v.to_string()).collect();
                write!(f, "pink[{}]", list.join(","))
            }
            Protocol::Enhance0db => f.write_str("enhance0db"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    /// `clean`, `pink` (= `pink[-3,0,3]`), `pink[a,b,...]` or `enhance0db`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => return Ok(Protocol::Clean),
            "pink" => return Ok(Protocol::Pink(vec![-3.0, 0.0, 3.0])),
            "enhance0db" => return Ok(Protocol::Enhance0db),
            _ => {}
        }
        let bad = || Error::invalid(format!("unknown protocol `{s}`"));
        let inner = s
            .strip_prefix("pink[")
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(bad)?;
        let snrs = inner
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<f64>>>()?;
        if snrs.is_empty() || snrs.iter().any(|v| !v.is_finite()) {
            return Err(bad());
        }
        Ok(Protocol::Pink(snrs))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Items (classification) or mixtures (enhancement) to score.
    pub n_items: usize,
    pub seed: u64,
    /// Segment / mixture length.
    pub crop_seconds: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_items: 100,
            seed: 0,
            crop_seconds: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    /// Mixing SNR; absent for the clean condition.
    pub snr_db: Option<f64>,
    pub metrics: Vec<MetricRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub task: Task,
    pub seed: u64,
    pub n_items: usize,
    pub conditions: Vec<ConditionReport>,
}

impl EvalReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.condition == name)
    }
}

impl ConditionReport {
    pub fn metric(&self, name: &str) -> Option<&MetricRecord> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

/// Frame accuracy (classify) or SI-SDR in dB (enhance) for one example.
pub(super) fn example_metric(model: &Model, ex: &Example) -> Result<f64> {
    let mut tape = Tape::new();
    match ex {
        Example::Classify { wave, labels } => {
            let fwd = model.forward(&mut tape, wave, false, None)?;
            let (c, n) = accuracy_counts(tape.value(fwd.output), labels);
            Ok(if n == 0 { 0.0 } else { c as f64 / n as f64 })
        }
        Example::Enhance { mix, target } => {
            let est = enhance(model, mix)?;
            si_sdr(&est, target)
        }
    }
}

/// Enhanced waveform for one mixture.
pub fn enhance(model: &Model, mix: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, mix, false, None)?;
    let est = fwd
        .estimate
        .ok_or_else(|| Error::invalid("model has no enhancement head"))?;
    Ok(tape.value(est).data().to_vec())
}

/// Runs `protocol` on `data`. Deterministic given `opts.seed`.
pub fn evaluate(
    model: &Model,
    data: &TrainData<'_>,
    protocol: &Protocol,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let conditions = match (protocol, model.config.task) {
        (Protocol::Clean, Task::Classify) => classify_conditions(model, data, &[], opts)?,
        (Protocol::Pink(snrs), Task::Classify) => classify_conditions(model, data, snrs, opts)?,
        (Protocol::Enhance0db, Task::Enhance) => {
            let est = |mix: &[f64]| enhance(model, mix);
            vec![evaluate_enhancement_with(data, opts, 0.0, est)?]
        }
        (p, t) => {
            return Err(Error::invalid(format!(
                "protocol `{p}` does not apply to a {t} checkpoint"
            )));
        }
    };
    let n_items = conditions
        .first()
        .and_then(|c| c.metrics.first())
        .map_or(0, |m| m.n_items);
    Ok(EvalReport {
        protocol: protocol.to_string(),
        task: model.config.task,
        seed: opts.seed,
        n_items,
        conditions,
    })
}

/// Splits labeled items into consecutive segments of `len` samples.
fn segments(data: &TrainData<'_>, len: usize, limit: usize) -> Result<Vec<(Vec<f64>, Vec<i32>)>> {
    let mut out = Vec::new();
    let frames = len / HOP;
    for item in data.main.items.iter() {
        let labels = item
            .labels
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("{}: missing frame labels", item.name)))?;
        let w = item.wave.samples();
        let mut start = 0;
        while start < w.len() && out.len() < limit {
            let mut seg = vec![0.0; len];
            let end = (start + len).min(w.len());
            seg[..end - start].copy_from_slice(&w[start..end]);
            let f0 = start / HOP;
            let lab = (0..frames)
                .map(|t| {
                    if start + t * HOP < w.len() {
                        labels.get(f0 + t).copied().unwrap_or(UNLABELED)
                    } else {
                        UNLABELED
                    }
                })
                .collect();
            out.push((seg, lab));
            start += len;
        }
    }
    Ok(out)
}

fn classify_conditions(
    model: &Model,
    data: &TrainData<'_>,
    snrs: &[f64],
    opts: &EvalOptions,
) -> Result<Vec<ConditionReport>> {
    let len = samples_for(opts.crop_seconds).div_ceil(HOP) * HOP;
    let segs = segments(data, len, opts.n_items)?;
    if segs.is_empty() {
        return Err(Error::Manifest("no evaluation segments".into()));
    }
    let mut conditions: Vec<(String, Option<f64>)> = vec![("clean".into(), None)];
    conditions.extend(snrs.iter().map(|&s| (format!("pink{s:+}dB"), Some(s))));
    let mut out = Vec::new();
    for (name, snr) in conditions {
        let scores: Vec<Result<Option<f64>>> = segs
            .par_iter()
            .enumerate()
            .map(|(i, (wave, labels))| {
                let input = match snr {
                    None => wave.clone(),
                    Some(s) => {
                        let noise = gen_pink_noise(
                            len as f64 / crate::SAMPLE_RATE as f64,
                            opts.seed.wrapping_add(i as u64),
                        )?;
                        mix(wave, &noise.samples()[..len], s)?
                    }
                };
                let mut tape = Tape::new();
                let fwd = model.forward(&mut tape, &input, false, None)?;
                let (c, n) = accuracy_counts(tape.value(fwd.output), labels);
                Ok((n > 0).then(|| c as f64 / n as f64))
            })
            .collect();
        let mut values = Vec::new();
        for s in scores {
            values.extend(s?);
        }
        out.push(ConditionReport {
            condition: name,
            snr_db: snr,
            metrics: vec![MetricRecord::from_values("frame_accuracy", &values)],
        });
    }
    Ok(out)
}

/// Scores an arbitrary mixture -> estimate map on `opts.n_items` mixtures at
/// `snr_db`. Reports SI-SDR of the estimate, of the unprocessed mixture, and
/// the per-item improvement.
pub fn evaluate_enhancement_with<F>(
    data: &TrainData<'_>,
    opts: &EvalOptions,
    snr_db: f64,
    estimator: F,
) -> Result<ConditionReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let len = samples_for(opts.crop_seconds);
    let targets = data.targets();
    let interferers = data.interferers();
    let rows: Vec<Result<(f64, f64)>> = (0..opts.n_items)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64 + 1);
            let speech = pick(&targets, &mut rng, "speech")?;
            let noise = pick(&interferers, &mut rng, "noise")?;
            let (target, _) = crop(speech, len, &mut rng);
            let (n, _) = crop(noise, len, &mut rng);
            let m = mix(&target, &n, snr_db)?;
            let est = estimator(&m)?;
            Ok((si_sdr(&est, &target)?, si_sdr(&m, &target)?))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let est: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let unproc: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let gain: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    Ok(ConditionReport {
        condition: format!("mix{snr_db:+}dB"),
        snr_db: Some(snr_db),
        metrics: vec![
            MetricRecord::from_values("si_sdr_db", &est),
            MetricRecord::from_values("si_sdr_mix_db", &unproc),
            MetricRecord::from_values("si_sdr_improvement_db", &gain),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_parsing() {
        assert_eq!("clean".parse::<Protocol>().unwrap(), Protocol::Clean);
        assert_eq!(
            "pink".parse::<Protocol>().unwrap(),
            Protocol::Pink(vec![-3.0, 0.0, 3.0])
        );
        assert_eq!(
            "pink[-3,0,3]".parse::<Protocol>().unwrap().to_string(),
            "pink[-3,0,3]"
        );
        assert_eq!(
            "pink[5]".parse::<Protocol>().unwrap(),
            Protocol::Pink(vec![5.0])
        );
        assert!("pink[]".parse::<Protocol>().is_err());
        assert!("noisy".parse::<Protocol>().is_err());
    }
}
