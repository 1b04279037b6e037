//! Row-wise real and complex FFT helpers with per-thread plan caches.
//!
//! All transforms operate on the last axis of a row-major buffer. Spectra are
//! carried as split real/imaginary arrays of `n / 2 + 1` bins per row.

use std::cell::RefCell;

use realfft::RealFftPlanner;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static REAL: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
    static COMPLEX: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub fn bins(n: usize) -> usize {
    n / 2 + 1
}

/// Multiplicity of bin `k` in the Hermitian extension of a length-`n` real spectrum.
pub fn bin_weight(k: usize, n: usize) -> f64 {
    if k == 0 || (n % 2 == 0 && k == n / 2) {
        1.0
    } else {
        2.0
    }
}

/// Forward real FFT of every length-`n` row of `data` (unnormalized).
pub fn rfft_rows(data: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0 && data.len() % n == 0);
    let rows = data.len() / n;
    let nb = bins(n);
    let plan = REAL.with(|p| p.borrow_mut().plan_fft_forward(n));
    let mut input = plan.make_input_vec();
    let mut output = plan.make_output_vec();
    let mut scratch = plan.make_scratch_vec();
    let mut re = vec![0.0; rows * nb];
    let mut im = vec![0.0; rows * nb];
    for r in 0..rows {
        input.copy_from_slice(&data[r * n..(r + 1) * n]);
        plan.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("rfft buffer sizes");
        for (k, c) in output.iter().enumerate() {
            re[r * nb + k] = c.re;
            im[r * nb + k] = c.im;
        }
    }
    (re, im)
}

/// Unnormalized complex-to-real transform of every row. Imaginary parts of the
/// DC and Nyquist bins are ignored.
pub fn c2r_rows_unnormalized(re: &[f64], im: &[f64], n: usize) -> Vec<f64> {
    let nb = bins(n);
    assert_eq!(re.len(), im.len());
    assert!(re.len() % nb == 0);
    let rows = re.len() / nb;
    let plan = REAL.with(|p| p.borrow_mut().plan_fft_inverse(n));
    let mut input = plan.make_input_vec();
    let mut output = plan.make_output_vec();
    let mut scratch = plan.make_scratch_vec();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for k in 0..nb {
            input[k] = Complex64::new(re[r * nb + k], im[r * nb + k]);
        }
        input[0].im = 0.0;
        if n % 2 == 0 {
            input[nb - 1].im = 0.0;
        }
        plan.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("irfft buffer sizes");
        out[r * n..(r + 1) * n].copy_from_slice(&output);
    }
    out
}

/// Inverse real FFT of every row, normalized so that `irfft(rfft(x)) == x`.
pub fn irfft_rows(re: &[f64], im: &[f64], n: usize) -> Vec<f64> {
    let mut out = c2r_rows_unnormalized(re, im, n);
    let scale = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// In-place complex FFT over `buf.len() / n` contiguous rows of length `n`.
pub fn cfft_rows(buf: &mut [Complex64], n: usize, inverse: bool) {
    if buf.is_empty() {
        return;
    }
    let plan = COMPLEX.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    plan.process(buf);
}

/// Smallest `m >= n` whose only prime factors are 2, 3 and 5.
pub fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}
