//! Every primitive's backward rule against central finite differences.
//!
//! Each case reduces the primitive output to a scalar with fixed random
//! weights, so the check covers a full vector-Jacobian product.

use std::sync::Arc;

use audfront::autodiff::{grad_check, CheckStatus, Tape, Tensor, Var};
use audfront::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Random away from zero so ReLU-like kinks are never crossed.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.2..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn assert_passes<F>(f: F, params: &[(&str, Tensor)], tol: f64)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let report = grad_check(f, params, 1e-5, tol).unwrap();
    assert!(!report.is_empty());
    for c in &report {
        assert_eq!(
            c.status,
            CheckStatus::Pass,
            "{}[{}]: analytic {} numeric {} rel {}",
            c.param,
            c.index,
            c.analytic,
            c.numeric,
            c.rel_err
        );
    }
}

#[test]
fn elementwise_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4], -2.0, 2.0);
    let b = random(&mut rng, &[3, 4], 0.5, 2.0);
    let params = [("a", a), ("b", b)];
    assert_passes(
        |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 2)
        },
        &params,
        1e-6,
    );
    assert_passes(
        |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 3)
        },
        &params,
        1e-6,
    );
    assert_passes(
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 4)
        },
        &params,
        1e-6,
    );
    assert_passes(
        |t, v| {
            let y = t.div(v[0], v[1])?;
            weighted_sum(t, y, 5)
        },
        &params,
        1e-6,
    );
}

#[test]
fn elementwise_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = off_zero(&mut rng, &[2, 5]);
    let pos = random(&mut rng, &[2, 5], 0.3, 3.0);
    type Unary = fn(&mut Tape, Var) -> Var;
    let ops: [(&str, Unary); 7] = [
        ("neg", |t, x| t.neg(x)),
        ("exp", |t, x| t.exp(x)),
        ("sin", |t, x| t.sin(x)),
        ("cos", |t, x| t.cos(x)),
        ("relu", |t, x| t.relu(x)),
        ("gelu", |t, x| t.gelu(x)),
        ("sigmoid", |t, x| t.sigmoid(x)),
    ];
    for (i, (_, op)) in ops.iter().enumerate() {
        assert_passes(
            |t, v| {
                let y = op(t, v[0]);
                weighted_sum(t, y, 10 + i as u64)
            },
            &[("x", x.clone())],
            1e-6,
        );
    }
    assert_passes(
        |t, v| {
            let y = t.log(v[0]);
            weighted_sum(t, y, 20)
        },
        &[("x", pos.clone())],
        1e-6,
    );
    assert_passes(
        |t, v| {
            let y = t.sqrt(v[0]);
            weighted_sum(t, y, 21)
        },
        &[("x", pos.clone())],
        1e-6,
    );
    assert_passes(
        |t, v| {
            let y = t.add_const(v[0], 0.7);
            let y = t.mul_const(y, -1.3);
            weighted_sum(t, y, 22)
        },
        &[("x", x.clone())],
        1e-6,
    );
}

#[test]
fn scale_and_pow() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = random(&mut rng, &[3, 6], 0.1, 2.0);
    let s = Tensor::vector(vec![0.8]);
    let a = random(&mut rng, &[3], 0.3, 1.7);
    assert_passes(
        |t, v| {
            let y = t.scale(v[0], v[1])?;
            weighted_sum(t, y, 31)
        },
        &[("x", x.clone()), ("s", s)],
        1e-6,
    );
    assert_passes(
        |t, v| {
            let y = t.pow(v[0], v[1])?;
            weighted_sum(t, y, 32)
        },
        &[("x", x), ("a", a)],
        1e-6,
    );
}

#[test]
fn compression_exponent_gradient_is_closed_form() {
    // d/da sum(x^a) = sum(x^a ln x)
    let x = Tensor::vector(vec![0.2, 0.9, 1.7, 3.0]);
    let a = 0.6;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let av = tape.param(Tensor::scalar(a));
    let y = tape.pow(xv, av).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    let expected: f64 = x.data().iter().map(|v| v.powf(a) * v.ln()).sum();
    assert!((g.get(av).unwrap().data()[0] - expected).abs() < 1e-12);
}

#[test]
fn reductions_and_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let y = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    for axis in 0..3 {
        assert_passes(
            |t, v| {
                let s = t.sum_axis(v[0], axis)?;
                weighted_sum(t, s, 41 + axis as u64)
            },
            &[("x", x.clone())],
            1e-6,
        );
    }
    assert_passes(|t, v| Ok(t.mean(v[0])), &[("x", x.clone())], 1e-6);
    assert_passes(|t, v| t.l1(v[0], v[1]), &[("x", x), ("y", y)], 1e-6);
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let x = random(&mut rng, &[3, 5], -1.0, 1.0);
    let z = random(&mut rng, &[3, 2], -1.0, 1.0);
    let params = [("x", x), ("z", z)];
    assert_passes(
        |t, v| {
            let y = t.slice(v[0], 1, 1, 4)?;
            weighted_sum(t, y, 51)
        },
        &params,
        1e-6,
    );
    assert_passes(
        |t, v| {
            let y = t.concat(&[v[1], v[0], v[1]], 1)?;
            weighted_sum(t, y, 52)
        },
        &params,
        1e-6,
    );
    assert_passes(
        |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, 53)
        },
        &params,
        1e-6,
    );
    assert_passes(
        |t, v| {
            let y = t.reshape(v[0], &[5, 3])?;
            weighted_sum(t, y, 54)
        },
        &params,
        1e-6,
    );
    assert_passes(
        |t, v| {
            let y = t.tile(v[0], 3);
            weighted_sum(t, y, 55)
        },
        &params,
        1e-6,
    );
    let index: Arc<[usize]> = vec![4, 0, 0, 14, 7, 7, 7].into();
    assert_passes(
        |t, v| {
            let y = t.gather(v[0], index.clone(), &[7])?;
            weighted_sum(t, y, 56)
        },
        &params,
        1e-6,
    );
    let targets: Arc<[usize]> = (0..15)
        .map(|i| {
            if i % 4 == 3 {
                audfront::autodiff::DROP
            } else {
                i % 6
            }
        })
        .collect();
    assert_passes(
        |t, v| {
            let y = t.scatter_add(v[0], targets.clone(), &[2, 3])?;
            weighted_sum(t, y, 57)
        },
        &params,
        1e-6,
    );
}

#[test]
fn dense_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let a = random(&mut rng, &[4, 3], -1.0, 1.0);
    let b = random(&mut rng, &[3, 5], -1.0, 1.0);
    assert_passes(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 61)
        },
        &[("a", a.clone()), ("b", b)],
        1e-6,
    );
    let w = random(&mut rng, &[2, 3], -1.0, 1.0);
    let bias = random(&mut rng, &[2], -1.0, 1.0);
    assert_passes(
        |t, v| {
            let y = t.affine(v[0], v[1], v[2])?;
            weighted_sum(t, y, 62)
        },
        &[("x", a), ("w", w), ("b", bias)],
        1e-6,
    );
}

#[test]
fn conv2d_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let x = random(&mut rng, &[2, 5, 6], -1.0, 1.0);
    let w = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[3], -1.0, 1.0);
    assert_passes(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            weighted_sum(t, y, 71)
        },
        &[("x", x), ("w", w), ("b", b)],
        1e-6,
    );
}

#[test]
fn fft_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    for n in [8usize, 9] {
        let x = random(&mut rng, &[2, n], -1.0, 1.0);
        assert_passes(
            |t, v| {
                let (re, im) = t.rfft(v[0])?;
                let a = weighted_sum(t, re, 81)?;
                let b = weighted_sum(t, im, 82)?;
                t.add(a, b)
            },
            &[("x", x)],
            1e-6,
        );
        let nb = n / 2 + 1;
        let re = random(&mut rng, &[2, nb], -1.0, 1.0);
        let im = random(&mut rng, &[2, nb], -1.0, 1.0);
        assert_passes(
            |t, v| {
                let y = t.irfft(v[0], v[1], n)?;
                weighted_sum(t, y, 83)
            },
            &[("re", re), ("im", im)],
            1e-6,
        );
    }
}

#[test]
fn low_rank_bank() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let s = random(&mut rng, &[7, 9], -1.0, 1.0);
    let u0 = random(&mut rng, &[5], -1.0, 1.0);
    let v0 = random(&mut rng, &[3], -1.0, 1.0);
    let u1 = random(&mut rng, &[1], -1.0, 1.0);
    let v1 = random(&mut rng, &[7], -1.0, 1.0);
    let u2 = random(&mut rng, &[13], -1.0, 1.0);
    let v2 = random(&mut rng, &[17], -1.0, 1.0);
    assert_passes(
        |t, v| {
            let filters = vec![vec![(v[1], v[2]), (v[3], v[4])], vec![(v[5], v[6])]];
            let y = t.low_rank_correlate(v[0], &filters)?;
            weighted_sum(t, y, 91)
        },
        &[
            ("s", s),
            ("u0", u0),
            ("v0", v0),
            ("u1", u1),
            ("v1", v1),
            ("u2", u2),
            ("v2", v2),
        ],
        1e-6,
    );
}

#[test]
fn taping_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let s = random(&mut rng, &[6, 8], -1.0, 1.0);
        let u = random(&mut rng, &[3], -1.0, 1.0);
        let v = random(&mut rng, &[5], -1.0, 1.0);
        let mut tape = Tape::new();
        let (sv, uv, vv) = (tape.param(s), tape.param(u), tape.param(v));
        let y = tape
            .low_rank_correlate(sv, &[vec![(uv, vv)], vec![(uv, vv)]])
            .unwrap();
        let loss = weighted_sum(&mut tape, y, 101).unwrap();
        let g = tape.backward(loss).unwrap();
        (
            tape.value(loss).clone(),
            g.get(sv).unwrap().clone(),
            g.get(uv).unwrap().clone(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rfft_round_trip_is_identity(log_n in 1u32..=16, seed in any::<u64>()) {
        let n = 1usize << log_n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[n], -1.0, 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let (re, im) = tape.rfft(v).unwrap();
        let y = tape.irfft(re, im, n).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn matmul_jvp_matches_finite_difference(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k], -1.0, 1.0);
        let b = random(&mut rng, &[k, n], -1.0, 1.0);
        let report = grad_check(
            |t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, seed) },
            &[("a", a), ("b", b)],
            1e-5,
            1e-6,
        ).unwrap();
        prop_assert!(report.iter().all(|c| c.status == CheckStatus::Pass));
    }

    #[test]
    fn gelu_sigmoid_jvp(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = off_zero(&mut rng, &[6]);
        let report = grad_check(
            |t, v| { let g = t.gelu(v[0]); let y = t.sigmoid(g); weighted_sum(t, y, seed) },
            &[("x", x)],
            1e-5,
            1e-6,
        ).unwrap();
        prop_assert!(report.iter().all(|c| c.status == CheckStatus::Pass));
    }
}
