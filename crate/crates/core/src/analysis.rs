//! Parameter export and modulation-selectivity summaries.

use std::fmt::Write as _;

use crate::autodiff::Tensor;
use crate::cochlear::CochlearParams;
use crate::cortical::{CorticalInit, CorticalParams, FILTERS, LOG_SPECTRAL, LOG_TEMPORAL};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::signal::gen_moving_ripple;

/// Learned frontend values in reporting form.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub init: CorticalInit,
    /// `(spectral cyc/oct, temporal Hz)` per filter; `None` when the model has
    /// no cortical stage.
    pub filters: Option<Vec<(f64, f64)>>,
    pub alpha: Vec<f64>,
    pub inhibition: [f64; 2],
    pub tau_ms: f64,
}

pub fn export_params(model: &Model) -> ParamReport {
    let filters = model.cortical.as_ref().map(|c| {
        c.spectral
            .data()
            .iter()
            .copied()
            .zip(c.temporal.data().iter().copied())
            .collect()
    });
    let CochlearParams {
        alpha,
        inhibition,
        tau,
    } = &model.cochlear;
    ParamReport {
        init: model.config.cortical_init,
        filters,
        alpha: alpha.data().to_vec(),
        inhibition: [inhibition.data()[0], inhibition.data()[1]],
        tau_ms: tau.data()[0],
    }
}

impl ParamReport {
    /// Sectioned CSV. `#` lines name each section; values use shortest
    /// round-trip formatting, so parsing them back is exact.
    ///
    /// ```text
    /// # cortical
    /// index,omega_hz,capital_omega_cpo,sign,init
    /// # cochlear
    /// channel,alpha
    /// # scalars
    /// name,value
    /// ```
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        match &self.filters {
            Some(f) => {
                s.push_str("# cortical\nindex,omega_hz,capital_omega_cpo,sign,init\n");
                for (i, (sp, tp)) in f.iter().enumerate() {
                    let sign = if *tp < 0.0 { -1 } else { 1 };
                    let _ = writeln!(s, "{i},{tp},{sp},{sign},{}", self.init);
                }
            }
            None => {
                s.push_str("# cortical: not present (cortical stage replaced by a convolution)\n")
            }
        }
        s.push_str("# cochlear\nchannel,alpha\n");
        for (k, a) in self.alpha.iter().enumerate() {
            let _ = writeln!(s, "{k},{a}");
        }
        s.push_str("# scalars\nname,value\n");
        let _ = writeln!(s, "w0,{}", self.inhibition[0]);
        let _ = writeln!(s, "w1,{}", self.inhibition[1]);
        let _ = writeln!(s, "tau_ms,{}", self.tau_ms);
        s
    }
}

/// The 40 log-grid ripples `(spectral, temporal)` in filter order.
pub fn log_probe_grid() -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(FILTERS);
    for sign in [1.0, -1.0] {
        for &s in &LOG_SPECTRAL {
            for &t in &LOG_TEMPORAL {
                out.push((s, sign * t));
            }
        }
    }
    out
}

/// Response energy of every filter to every probe ripple, `[filters, probes]`.
/// Probes are unit-amplitude moving ripples of `frames` frames scaled by
/// `amplitude`.
pub fn modulation_profile(
    params: &CorticalParams,
    probes: &[(f64, f64)],
    frames: usize,
    amplitude: f64,
) -> Result<Tensor> {
    if probes.is_empty() {
        return Err(Error::invalid("modulation_profile: empty probe grid"));
    }
    let n = params.spectral.len();
    let mut out = vec![0.0; n * probes.len()];
    for (j, &(sp, tp)) in probes.iter().enumerate() {
        let ripple = gen_moving_ripple(sp, tp, frames)?.map(|v| v * amplitude);
        let r = params.respond(&ripple)?;
        let per = r.len() / n;
        for i in 0..n {
            out[i * probes.len() + j] =
                r.data()[i * per..(i + 1) * per].iter().map(|v| v * v).sum();
        }
    }
    Tensor::new(vec![n, probes.len()], out)
}

/// CSV with one row per filter and one column per probe.
pub fn profile_csv(energies: &Tensor, probes: &[(f64, f64)]) -> String {
    let mut s = String::from("filter");
    for (sp, tp) in probes {
        let _ = write!(s, ",W{sp}_w{tp}");
    }
    s.push('\n');
    let p = probes.len();
    for (i, row) in energies.data().chunks(p).enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}
