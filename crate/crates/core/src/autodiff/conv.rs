//! Dense affine maps and same-padded 2-D cross-correlation, both lowered to GEMM.

use super::tape::{Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `c = a * b + beta * c` with explicit row/column strides for `a` and `b`.
/// `c` is dense row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every element the kernel reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-padded cross-correlation without im2col, for repeated evaluation.
///
/// Each tap is one GEMM over the flattened planes, reading the input at a
/// fixed flat offset. Reads that wrapped across a row edge are subtracted
/// afterwards. Same layout and result as [`Tape::conv2d`] up to rounding.
pub(crate) fn conv2d_shifted(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 || weight.ndim() != 4 || weight.shape()[1] != x.shape()[0] {
        return Err(Error::shape("conv2d", x.shape(), weight.shape()));
    }
    let geo = ConvGeometry::new(x.shape(), weight.shape())?;
    let (cin, cout, h, w, kh, kw) = (geo.cin, geo.cout, geo.h, geo.w, geo.kh, geo.kw);
    let hw = h * w;
    let taps = kh * kw;
    let xd = x.data();
    let wd = weight.data();
    let mut out = Vec::with_capacity(cout * hw);
    for &bv in bias.data() {
        out.extend(std::iter::repeat(bv).take(hw));
    }
    for dy in 0..kh {
        let oy = dy as isize - (kh / 2) as isize;
        for dx in 0..kw {
            let ox = dx as isize - (kw / 2) as isize;
            let tap = dy * kw + dx;
            let s = oy * w as isize + ox;
            let lo = (-s).max(0) as usize;
            let hi = (hw as isize - s.max(0)).max(lo as isize) as usize;
            if hi == lo || cin == 0 {
                continue;
            }
            let src = (lo as isize + s) as usize;
            assert!((cout - 1) * cin * taps + (cin - 1) * taps + tap < wd.len());
            assert!((cin - 1) * hw + src + (hi - lo) <= xd.len());
            // SAFETY: the asserts bound every read of `weight` and `x`; the
            // `out` window is rows of `hw` starting at `lo` and ending before `hi`.
            unsafe {
                matrixmultiply::dgemm(
                    cout,
                    cin,
                    hi - lo,
                    1.0,
                    wd.as_ptr().add(tap),
                    (cin * taps) as isize,
                    taps as isize,
                    xd.as_ptr().add(src),
                    hw as isize,
                    1,
                    1.0,
                    out.as_mut_ptr().add(lo),
                    hw as isize,
                    1,
                );
            }
            if ox == 0 {
                continue;
            }
            for y in 0..h {
                for col in 0..w {
                    let sx = col as isize + ox;
                    let p = y * w + col;
                    if (0..w as isize).contains(&sx) || p < lo || p >= hi {
                        continue;
                    }
                    let q = (p as isize + s) as usize;
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            acc += wd[(o * cin + c) * taps + tap] * xd[c * hw + q];
                        }
                        out[o * hw + p] -= acc;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![cout, h, w], out))
}

impl Tape {
    /// Matrix product of 2-D tensors `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, 0.0);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    /// Row-wise affine map: `x [rows, in]`, `w [out, in]`, `b [out]` -> `[rows, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.ndim() != 2 || tw.ndim() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(Error::shape("affine", tx.shape(), tw.shape()));
        }
        let (rows, inp, out_dim) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        if tb.shape() != [out_dim] {
            return Err(Error::shape("affine", tw.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(rows * out_dim);
        for _ in 0..rows {
            out.extend_from_slice(tb.data());
        }
        gemm(
            rows,
            inp,
            out_dim,
            tx.data(),
            (inp, 1),
            tw.data(),
            (1, inp),
            &mut out,
            1.0,
        );
        Ok(self.push(
            Tensor::from_parts(vec![rows, out_dim], out),
            Op::Affine { x, w, b },
            &[x, w, b],
        ))
    }

    /// Multi-channel 2-D cross-correlation with zero "same" padding and stride 1.
    ///
    /// `x [cin, h, w]`, `weight [cout, cin, kh, kw]` (odd `kh`, `kw`), `bias [cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        if tx.ndim() != 3 || tw.ndim() != 4 || tw.shape()[1] != tx.shape()[0] {
            return Err(Error::shape("conv2d", tx.shape(), tw.shape()));
        }
        let geo = ConvGeometry::new(tx.shape(), tw.shape())?;
        if tb.shape() != [geo.cout] {
            return Err(Error::shape("conv2d", tw.shape(), tb.shape()));
        }
        let hw = geo.h * geo.w;
        let cols = geo.im2col(tx.data());
        let mut out = Vec::with_capacity(geo.cout * hw);
        for &bv in tb.data() {
            out.extend(std::iter::repeat(bv).take(hw));
        }
        let kk = geo.patch();
        gemm(
            geo.cout,
            kk,
            hw,
            tw.data(),
            (kk, 1),
            &cols,
            (hw, 1),
            &mut out,
            1.0,
        );
        Ok(self.push(
            Tensor::from_parts(vec![geo.cout, geo.h, geo.w], out),
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
            },
            &[x, weight, bias],
        ))
    }
}

struct ConvGeometry {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize]) -> Result<Self> {
        let (kh, kw) = (ws[2], ws[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d: kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        Ok(ConvGeometry {
            cin: xs[0],
            cout: ws[0],
            h: xs[1],
            w: xs[2],
            kh,
            kw,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Valid output range `[lo, hi)` along an axis of length `n` for tap offset `d`.
    fn valid(n: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (n as isize - d).clamp(0, n as isize) as usize;
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let hw = h * w;
        let mut cols = vec![0.0; self.patch() * hw];
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for ci in 0..self.cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for dy in 0..self.kh {
                let oy = dy as isize - ph;
                let (ylo, yhi) = Self::valid(h, oy);
                for dx in 0..self.kw {
                    let ox = dx as isize - pw;
                    let (xlo, xhi) = Self::valid(w, ox);
                    let row = (ci * self.kh + dy) * self.kw + dx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for y in ylo..yhi {
                        let sy = (y as isize + oy) as usize;
                        let sx0 = (xlo as isize + ox) as usize;
                        dst[y * w + xlo..y * w + xhi]
                            .copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (xhi - xlo)]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let hw = h * w;
        let mut x = vec![0.0; self.cin * hw];
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for ci in 0..self.cin {
            let plane = &mut x[ci * hw..(ci + 1) * hw];
            for dy in 0..self.kh {
                let oy = dy as isize - ph;
                let (ylo, yhi) = Self::valid(h, oy);
                for dx in 0..self.kw {
                    let ox = dx as isize - pw;
                    let (xlo, xhi) = Self::valid(w, ox);
                    let row = (ci * self.kh + dy) * self.kw + dx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for y in ylo..yhi {
                        let sy = (y as isize + oy) as usize;
                        let sx0 = (xlo as isize + ox) as usize;
                        let d = &mut plane[sy * w + sx0..sy * w + sx0 + (xhi - xlo)];
                        d.iter_mut()
                            .zip(&src[y * w + xlo..y * w + xhi])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        x
    }
}

pub(crate) fn matmul_backward(
    tape: &Tape,
    a: Var,
    b: Var,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (ta, tb) = (tape.value(a), tape.value(b));
    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
    if tape.requires_grad(a) {
        let mut ga = vec![0.0; m * k];
        gemm(m, n, k, g, (n, 1), tb.data(), (1, n), &mut ga, 0.0);
        tape.accumulate(grads, a, ga);
    }
    if tape.requires_grad(b) {
        let mut gb = vec![0.0; k * n];
        gemm(k, m, n, ta.data(), (1, k), g, (n, 1), &mut gb, 0.0);
        tape.accumulate(grads, b, gb);
    }
}

pub(crate) fn affine_backward(
    tape: &Tape,
    x: Var,
    w: Var,
    b: Var,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (tx, tw) = (tape.value(x), tape.value(w));
    let (rows, inp, out_dim) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
    if tape.requires_grad(x) {
        let mut gx = vec![0.0; rows * inp];
        gemm(
            rows,
            out_dim,
            inp,
            g,
            (out_dim, 1),
            tw.data(),
            (inp, 1),
            &mut gx,
            0.0,
        );
        tape.accumulate(grads, x, gx);
    }
    if tape.requires_grad(w) {
        let mut gw = vec![0.0; out_dim * inp];
        gemm(
            out_dim,
            rows,
            inp,
            g,
            (1, out_dim),
            tx.data(),
            (inp, 1),
            &mut gw,
            0.0,
        );
        tape.accumulate(grads, w, gw);
    }
    if tape.requires_grad(b) {
        let mut gb = vec![0.0; out_dim];
        for row in g.chunks(out_dim) {
            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        tape.accumulate(grads, b, gb);
    }
}

pub(crate) fn conv2d_backward(
    tape: &Tape,
    x: Var,
    w: Var,
    b: Var,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (tx, tw) = (tape.value(x), tape.value(w));
    let geo = ConvGeometry::new(tx.shape(), tw.shape()).expect("validated in forward");
    let hw = geo.h * geo.w;
    let kk = geo.patch();
    if tape.requires_grad(w) {
        let cols = geo.im2col(tx.data());
        let mut gw = vec![0.0; geo.cout * kk];
        gemm(geo.cout, hw, kk, g, (hw, 1), &cols, (1, hw), &mut gw, 0.0);
        tape.accumulate(grads, w, gw);
    }
    if tape.requires_grad(b) {
        let gb = g.chunks(hw).map(|c| c.iter().sum()).collect();
        tape.accumulate(grads, b, gb);
    }
    if tape.requires_grad(x) {
        let mut gcols = vec![0.0; kk * hw];
        gemm(
            kk,
            geo.cout,
            hw,
            tw.data(),
            (1, kk),
            g,
            (hw, 1),
            &mut gcols,
            0.0,
        );
        tape.accumulate(grads, x, geo.col2im(&gcols));
    }
}
