//! Bank of low-rank 2-D kernels cross-correlated with one input plane.
//!
//! Each kernel is a sum of outer products `u ⊗ v` (u along rows, v along
//! columns, both odd-length and centred). Correlation runs in the 2-D Fourier
//! domain; the transform of a separable kernel is the outer product of the 1-D
//! transforms of its factors, so kernels never need to be materialized.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::fft;

pub(crate) struct BankOp {
    input: Var,
    filters: Vec<Vec<(Var, Var)>>,
    plan: Plan2d,
    spectrum: Vec<Complex64>,
}

/// Zero-padded 2-D transform geometry: `rows x cols` data inside `lf x lt`.
/// Spectra are stored column-major: `nbt` columns of `lf` complex values.
#[derive(Clone, Copy)]
struct Plan2d {
    rows: usize,
    cols: usize,
    lf: usize,
    lt: usize,
}

impl Plan2d {
    fn nbt(&self) -> usize {
        fft::bins(self.lt)
    }

    fn forward(&self, data: &[f64]) -> Vec<Complex64> {
        let (lf, lt, nbt) = (self.lf, self.lt, self.nbt());
        let mut padded = vec![0.0; self.rows * lt];
        for r in 0..self.rows {
            padded[r * lt..r * lt + self.cols]
                .copy_from_slice(&data[r * self.cols..(r + 1) * self.cols]);
        }
        let (re, im) = fft::rfft_rows(&padded, lt);
        let mut spec = vec![Complex64::new(0.0, 0.0); nbt * lf];
        for r in 0..self.rows {
            for q in 0..nbt {
                spec[q * lf + r] = Complex64::new(re[r * nbt + q], im[r * nbt + q]);
            }
        }
        fft::cfft_rows(&mut spec, lf, false);
        spec
    }

    /// Inverse transform evaluated at the given wrapped row and column indices.
    fn inverse_at(&self, mut spec: Vec<Complex64>, rows: &[usize], cols: &[usize]) -> Vec<f64> {
        let (lf, lt, nbt) = (self.lf, self.lt, self.nbt());
        fft::cfft_rows(&mut spec, lf, true);
        let mut re = vec![0.0; rows.len() * nbt];
        let mut im = vec![0.0; rows.len() * nbt];
        for (i, &p) in rows.iter().enumerate() {
            for q in 0..nbt {
                let c = spec[q * lf + p];
                re[i * nbt + q] = c.re;
                im[i * nbt + q] = c.im;
            }
        }
        let time = fft::c2r_rows_unnormalized(&re, &im, lt);
        let scale = 1.0 / (lf * lt) as f64;
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in 0..rows.len() {
            out.extend(cols.iter().map(|&t| time[i * lt + t] * scale));
        }
        out
    }

    fn factor_row_spectrum(&self, u: &[f64]) -> Vec<Complex64> {
        let c = u.len() / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.lf];
        for (i, &val) in u.iter().enumerate() {
            buf[wrap(i as isize - c as isize, self.lf)] += val;
        }
        fft::cfft_rows(&mut buf, self.lf, false);
        buf
    }

    fn factor_col_spectrum(&self, v: &[f64]) -> Vec<Complex64> {
        let c = v.len() / 2;
        let mut buf = vec![0.0; self.lt];
        for (i, &val) in v.iter().enumerate() {
            buf[wrap(i as isize - c as isize, self.lt)] += val;
        }
        let (re, im) = fft::rfft_rows(&buf, self.lt);
        re.into_iter()
            .zip(im)
            .map(|(r, i)| Complex64::new(r, i))
            .collect()
    }

    /// Spectrum of `sum_r u_r ⊗ v_r`, column-major like the data spectra.
    fn kernel_spectrum(&self, factors: &[(&[f64], &[f64])]) -> Vec<Complex64> {
        let (lf, nbt) = (self.lf, self.nbt());
        let mut k = vec![Complex64::new(0.0, 0.0); nbt * lf];
        for (u, v) in factors {
            let us = self.factor_row_spectrum(u);
            let vs = self.factor_col_spectrum(v);
            for q in 0..nbt {
                let col = &mut k[q * lf..(q + 1) * lf];
                for (kp, up) in col.iter_mut().zip(&us) {
                    *kp += up * vs[q];
                }
            }
        }
        k
    }
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

impl Tape {
    /// Correlates the 2-D `input [h, w]` with every kernel of the bank, using
    /// zero "same" padding. `filters[i]` lists the rank-1 factors `(u, v)` of
    /// kernel `i`; kernel `i` at offset `(a, b)` from its centre equals
    /// `sum_r u_r[a] * v_r[b]`. Output shape is `[filters.len(), h, w]`.
    pub fn low_rank_correlate(&mut self, input: Var, filters: &[Vec<(Var, Var)>]) -> Result<Var> {
        let t = self.value(input);
        if t.ndim() != 2 {
            return Err(Error::shape("low_rank_correlate", t.shape(), &[0, 0]));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("low_rank_correlate: empty input"));
        }
        let (mut cu, mut cv) = (0, 0);
        let mut inputs = vec![input];
        for terms in filters {
            for &(u, v) in terms {
                let (su, sv) = (self.shape(u), self.shape(v));
                if su.len() != 1 || sv.len() != 1 || su[0] % 2 == 0 || sv[0] % 2 == 0 {
                    return Err(Error::shape("low_rank_correlate", su, sv));
                }
                if su[0] / 2 >= rows || sv[0] / 2 >= cols {
                    return Err(Error::invalid(format!(
                        "low_rank_correlate: factor half-widths ({}, {}) must be below input extent ({rows}, {cols})",
                        su[0] / 2,
                        sv[0] / 2
                    )));
                }
                cu = cu.max(su[0] / 2);
                cv = cv.max(sv[0] / 2);
                inputs.push(u);
                inputs.push(v);
            }
        }
        let plan = Plan2d {
            rows,
            cols,
            lf: fft::fast_len(rows + cu),
            lt: fft::fast_len(cols + cv),
        };
        let spectrum = plan.forward(t.data());
        let out_rows: Vec<usize> = (0..rows).collect();
        let out_cols: Vec<usize> = (0..cols).collect();
        let factor_data: Vec<Vec<(&[f64], &[f64])>> = filters
            .iter()
            .map(|terms| {
                terms
                    .iter()
                    .map(|&(u, v)| (self.value(u).data(), self.value(v).data()))
                    .collect()
            })
            .collect();
        let planes: Vec<Vec<f64>> = factor_data
            .par_iter()
            .map(|factors| {
                let k = plan.kernel_spectrum(factors);
                let prod = spectrum
                    .iter()
                    .zip(&k)
                    .map(|(s, kk)| s * kk.conj())
                    .collect();
                plan.inverse_at(prod, &out_rows, &out_cols)
            })
            .collect();
        let data = planes.concat();
        let op = BankOp {
            input,
            filters: filters.to_vec(),
            plan,
            spectrum,
        };
        Ok(self.push(
            Tensor::from_parts(vec![filters.len(), rows, cols], data),
            Op::Bank(Box::new(op)),
            &inputs,
        ))
    }
}

struct FilterGrads {
    input_part: Option<Vec<Complex64>>,
    factors: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)>,
}

impl BankOp {
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let plan = self.plan;
        let plane = plan.rows * plan.cols;
        let want_input = tape.requires_grad(self.input);
        let results: Vec<FilterGrads> = self
            .filters
            .par_iter()
            .enumerate()
            .map(|(i, terms)| {
                let gs = plan.forward(&g[i * plane..(i + 1) * plane]);
                let factors: Vec<(&[f64], &[f64])> = terms
                    .iter()
                    .map(|&(u, v)| (tape.value(u).data(), tape.value(v).data()))
                    .collect();
                let input_part = want_input.then(|| {
                    let k = plan.kernel_spectrum(&factors);
                    gs.iter().zip(&k).map(|(a, b)| a * b).collect()
                });
                let any_factor = terms
                    .iter()
                    .any(|&(u, v)| tape.requires_grad(u) || tape.requires_grad(v));
                let factors_grad = if any_factor {
                    // kernel gradient at lag (a, b): sum_k G[k] s[k + (a, b)]
                    let cu = factors.iter().map(|(u, _)| u.len() / 2).max().unwrap_or(0);
                    let cv = factors.iter().map(|(_, v)| v.len() / 2).max().unwrap_or(0);
                    let lag_rows: Vec<usize> = (-(cu as isize)..=cu as isize)
                        .map(|a| wrap(a, plan.lf))
                        .collect();
                    let lag_cols: Vec<usize> = (-(cv as isize)..=cv as isize)
                        .map(|b| wrap(b, plan.lt))
                        .collect();
                    let prod = self
                        .spectrum
                        .iter()
                        .zip(&gs)
                        .map(|(s, gg)| s * gg.conj())
                        .collect();
                    let gk = plan.inverse_at(prod, &lag_rows, &lag_cols);
                    let width = 2 * cv + 1;
                    terms
                        .iter()
                        .zip(&factors)
                        .map(|(&(u, v), (ud, vd))| {
                            let (ou, ov) = (cu - ud.len() / 2, cv - vd.len() / 2);
                            let gu = tape.requires_grad(u).then(|| {
                                (0..ud.len())
                                    .map(|a| {
                                        let row = &gk[(a + ou) * width + ov..];
                                        vd.iter().zip(row).map(|(x, y)| x * y).sum()
                                    })
                                    .collect()
                            });
                            let gv = tape.requires_grad(v).then(|| {
                                (0..vd.len())
                                    .map(|b| {
                                        ud.iter()
                                            .enumerate()
                                            .map(|(a, x)| x * gk[(a + ou) * width + ov + b])
                                            .sum()
                                    })
                                    .collect()
                            });
                            (gu, gv)
                        })
                        .collect()
                } else {
                    vec![(None, None); terms.len()]
                };
                FilterGrads {
                    input_part,
                    factors: factors_grad,
                }
            })
            .collect();

        let mut input_acc: Option<Vec<Complex64>> = None;
        for (terms, res) in self.filters.iter().zip(results) {
            if let Some(part) = res.input_part {
                match &mut input_acc {
                    Some(acc) => acc.iter_mut().zip(&part).for_each(|(a, b)| *a += b),
                    None => input_acc = Some(part),
                }
            }
            for (&(u, v), (gu, gv)) in terms.iter().zip(res.factors) {
                if let Some(gu) = gu {
                    tape.accumulate(grads, u, gu);
                }
                if let Some(gv) = gv {
                    tape.accumulate(grads, v, gv);
                }
            }
        }
        if let Some(acc) = input_acc {
            let rows: Vec<usize> = (0..plan.rows).collect();
            let cols: Vec<usize> = (0..plan.cols).collect();
            tape.accumulate(grads, self.input, plan.inverse_at(acc, &rows, &cols));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(input: &[f64], h: usize, w: usize, u: &[f64], v: &[f64]) -> Vec<f64> {
        let (cu, cv) = ((u.len() / 2) as isize, (v.len() / 2) as isize);
        let mut out = vec![0.0; h * w];
        for k in 0..h as isize {
            for n in 0..w as isize {
                let mut acc = 0.0;
                for a in -cu..=cu {
                    for b in -cv..=cv {
                        let (r, c) = (k + a, n + b);
                        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                            continue;
                        }
                        acc += u[(a + cu) as usize]
                            * v[(b + cv) as usize]
                            * input[r as usize * w + c as usize];
                    }
                }
                out[k as usize * w + n as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_direct_correlation() {
        let (h, w) = (9, 13);
        let input: Vec<f64> = (0..h * w)
            .map(|i| ((i * 31 % 17) as f64 - 8.0) / 4.0)
            .collect();
        let u = vec![0.3, -1.0, 2.0, 0.5, -0.7];
        let v = vec![1.0, 0.25, -0.5, 0.75, 0.1, -0.3, 0.9];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![h, w], input.clone()).unwrap());
        let vu = tape.constant(Tensor::vector(u.clone()));
        let vv = tape.constant(Tensor::vector(v.clone()));
        let y = tape.low_rank_correlate(x, &[vec![(vu, vv)]]).unwrap();
        let expected = direct(&input, h, w, &u, &v);
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn rejects_factors_wider_than_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3, 3]));
        let u = tape.constant(Tensor::zeros(vec![7]));
        let v = tape.constant(Tensor::zeros(vec![1]));
        assert!(tape.low_rank_correlate(x, &[vec![(u, v)]]).is_err());
    }
}
