//! Real FFT primitives along the last axis. Backward rules are the adjoint
//! transforms, evaluated with the same FFT kernels.

use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::fft;

impl Tape {
    /// Real FFT along the last axis. Returns `(re, im)`, each with the last
    /// extent replaced by `n / 2 + 1`.
    pub fn rfft(&mut self, x: Var) -> Result<(Var, Var)> {
        let t = self.value(x);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("rfft: scalar input"))?;
        if n == 0 {
            return Err(Error::invalid("rfft: empty last axis"));
        }
        let (re, im) = fft::rfft_rows(t.data(), n);
        let mut half = t.shape().to_vec();
        *half.last_mut().unwrap() = fft::bins(n);
        let mut packed_shape = vec![2];
        packed_shape.extend_from_slice(&half);
        let offset = re.len();
        let mut packed = re;
        packed.extend(im);
        let p = self.push(
            Tensor::from_parts(packed_shape, packed),
            Op::Rfft { x, n },
            &[x],
        );
        let re = self.part(p, 0, &half);
        let im = self.part(p, offset, &half);
        Ok((re, im))
    }

    /// Inverse real FFT along the last axis producing `n` samples per row.
    /// Imaginary parts of the DC and Nyquist bins do not influence the output.
    pub fn irfft(&mut self, re: Var, im: Var, n: usize) -> Result<Var> {
        let (tr, ti) = (self.value(re), self.value(im));
        if tr.shape() != ti.shape() {
            return Err(Error::shape("irfft", tr.shape(), ti.shape()));
        }
        let nb = *tr
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("irfft: scalar input"))?;
        if n == 0 || fft::bins(n) != nb {
            return Err(Error::shape("irfft", tr.shape(), &[fft::bins(n)]));
        }
        let out = fft::irfft_rows(tr.data(), ti.data(), n);
        let mut shape = tr.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Irfft { re, im, n },
            &[re, im],
        ))
    }
}

pub(crate) fn rfft_backward(
    tape: &Tape,
    x: Var,
    n: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    if !tape.requires_grad(x) {
        return;
    }
    let nb = fft::bins(n);
    let half = g.len() / 2;
    let (gre, gim) = g.split_at(half);
    let mut hre = gre.to_vec();
    let mut him = gim.to_vec();
    for (i, (r, m)) in hre.iter_mut().zip(him.iter_mut()).enumerate() {
        let w = fft::bin_weight(i % nb, n);
        *r /= w;
        *m /= w;
    }
    tape.accumulate(grads, x, fft::c2r_rows_unnormalized(&hre, &him, n));
}

pub(crate) fn irfft_backward(
    tape: &Tape,
    re: Var,
    im: Var,
    n: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let nb = fft::bins(n);
    let (mut gre, mut gim) = fft::rfft_rows(g, n);
    for (i, (r, m)) in gre.iter_mut().zip(gim.iter_mut()).enumerate() {
        let bw = fft::bin_weight(i % nb, n);
        *r *= bw / n as f64;
        // imaginary parts of DC and Nyquist are discarded by the forward transform
        *m = if bw == 1.0 { 0.0 } else { *m * bw / n as f64 };
    }
    tape.accumulate(grads, re, gre);
    tape.accumulate(grads, im, gim);
}
