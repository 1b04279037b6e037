//! Central finite-difference verification of tape gradients.

use rayon::prelude::*;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The function was not finite (or failed) at a perturbed point.
    NonEvaluable,
}

#[derive(Clone, Debug)]
pub struct ComponentCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub status: CheckStatus,
}

/// Denominator floor of [`relative_error`]. Central differences with a 1e-5
/// step resolve an O(1) loss to roughly 1e-10 absolute, so components smaller
/// than this are judged by absolute error (`tol * GRAD_FLOOR`) instead.
pub const GRAD_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Compares `analytic[i]` against `(f(x_i + h) - f(x_i - h)) / 2h` for every
/// component, where `eval(i, v)` evaluates the function with component `i`
/// set to `v` and all others at `base`.
pub fn check_components<F>(
    param: &str,
    analytic: &[f64],
    base: &[f64],
    step: f64,
    tol: f64,
    eval: F,
) -> Vec<ComponentCheck>
where
    F: Fn(usize, f64) -> Result<f64> + Sync,
{
    (0..base.len())
        .into_par_iter()
        .map(|i| {
            let plus = eval(i, base[i] + step);
            let minus = eval(i, base[i] - step);
            let a = analytic[i];
            match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() && a.is_finite() => {
                    let n = (p - m) / (2.0 * step);
                    let rel_err = relative_error(a, n);
                    ComponentCheck {
                        param: param.to_string(),
                        index: i,
                        analytic: a,
                        numeric: n,
                        rel_err,
                        status: if rel_err < tol {
                            CheckStatus::Pass
                        } else {
                            CheckStatus::Fail
                        },
                    }
                }
                _ => ComponentCheck {
                    param: param.to_string(),
                    index: i,
                    analytic: a,
                    numeric: f64::NAN,
                    rel_err: f64::NAN,
                    status: CheckStatus::NonEvaluable,
                },
            }
        })
        .collect()
}

/// Checks the gradient of the scalar `f` with respect to every component of
/// every named parameter. `f` receives one tape variable per parameter.
///
/// Perturbed evaluations replay the ReLU/L1 branch pattern of the base point
/// (see [`Pins`](super::Pins)), so the differences measure the smooth piece the analytic
/// gradient belongs to.
pub fn grad_check<F>(
    f: F,
    params: &[(&str, Tensor)],
    step: f64,
    tol: f64,
) -> Result<Vec<ComponentCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check: step must be positive"));
    }
    let mut tape = Tape::recording_pins();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let pins = tape.pins();
    let mut report = Vec::new();
    for (p, ((name, value), &var)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(var, value.shape());
        let eval = |i: usize, v: f64| -> Result<f64> {
            let mut tape = Tape::replaying(&pins);
            let vars: Vec<Var> = params
                .iter()
                .enumerate()
                .map(|(q, (_, t))| {
                    let mut t = t.clone();
                    if q == p {
                        t.data_mut()[i] = v;
                    }
                    tape.constant(t)
                })
                .collect();
            let loss = f(&mut tape, &vars)?;
            tape.value(loss).item()
        };
        report.extend(check_components(
            name,
            analytic.data(),
            value.data(),
            step,
            tol,
            eval,
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_one() {
        let report = grad_check(
            |t, v| Ok(t.mul(v[0], v[0])?),
            &[("theta", Tensor::vector(vec![1.0]))],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].analytic, 2.0);
        assert!((report[0].numeric - 2.0).abs() < 1e-8);
        assert_eq!(report[0].status, CheckStatus::Pass);
    }

    #[test]
    fn non_finite_is_flagged() {
        let report = grad_check(
            |t, v| Ok(t.log(v[0])),
            &[("x", Tensor::vector(vec![0.0]))],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(report[0].status, CheckStatus::NonEvaluable);
    }

    #[test]
    fn wrong_gradient_fails() {
        let report = check_components("x", &[1.0], &[2.0], 1e-5, 1e-4, |_, v| Ok(v * v));
        assert_eq!(report[0].status, CheckStatus::Fail);
    }
}
