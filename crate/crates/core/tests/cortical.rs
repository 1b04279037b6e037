use audfront::analysis::{log_probe_grid, modulation_profile};
use audfront::autodiff::{grad_check, CheckStatus, Tape, Tensor, Var};
use audfront::cortical::*;
use audfront::signal::gen_moving_ripple;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRAMES: usize = 400;

fn random_spec(t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![129, t],
        (0..129 * t).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn params(pairs: &[(f64, f64)]) -> CorticalParams {
    CorticalParams {
        spectral: Tensor::vector(pairs.iter().map(|p| p.0).collect()),
        temporal: Tensor::vector(pairs.iter().map(|p| p.1).collect()),
    }
}

/// Direct "same" correlation with the dense kernel, zero padding.
fn direct(s: &Tensor, spectral: f64, temporal: f64) -> Vec<f64> {
    let k = strf_kernel(spectral, temporal).unwrap();
    let (kh, kw) = (k.shape()[0], k.shape()[1]);
    let (hf, ht) = (kh as isize / 2, kw as isize / 2);
    let (h, w) = (s.shape()[0] as isize, s.shape()[1] as isize);
    let mut out = vec![0.0; (h * w) as usize];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for a in (-hf).max(-i)..=hf.min(h - 1 - i) {
                for b in (-ht).max(-j)..=ht.min(w - 1 - j) {
                    acc += k.data()[((a + hf) * kw as isize + b + ht) as usize]
                        * s.data()[((i + a) * w + j + b) as usize];
                }
            }
            out[(i * w + j) as usize] = acc;
        }
    }
    out
}

#[test]
fn factored_response_matches_dense_kernel() {
    let pairs = [
        (1.0, 2.0),
        (4.0, -16.0),
        (0.5, 1.0),
        (7.3, 0.4),
        (2.0, -4.0),
        (11.9, 95.0),
    ];
    let p = params(&pairs);
    let s = random_spec(37, 1);
    let r = p.respond(&s).unwrap();
    assert_eq!(r.shape(), &[6, 129, 37]);
    for (i, &(sp, tp)) in pairs.iter().enumerate() {
        let want = direct(&s, sp, tp);
        let got = &r.data()[i * 129 * 37..(i + 1) * 129 * 37];
        let err = want
            .iter()
            .zip(got)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "filter ({sp},{tp}): {err}");
    }
}

#[test]
fn shapes_zero_input_and_single_frame() {
    let p = init_cortical(CorticalInit::LogSpaced, 0);
    for t in [1, 2, 200] {
        let r = p.respond(&Tensor::zeros(vec![129, t])).unwrap();
        assert_eq!(r.shape(), &[40, 129, t]);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }
    assert!(p.respond(&Tensor::zeros(vec![129, 0])).is_err());
}

fn energy(p: &CorticalParams, i: usize, ripple: (f64, f64)) -> f64 {
    let e = modulation_profile(p, &[ripple], FRAMES, 1.0).unwrap();
    e.data()[i]
}

#[test]
fn matched_ripple_beats_distant_ripple() {
    let p = params(&[(1.0, 2.0)]);
    let db = 10.0 * (energy(&p, 0, (1.0, 2.0)) / energy(&p, 0, (4.0, 8.0))).log10();
    assert!(db > 6.0, "{db}");
}

#[test]
fn direction_selectivity_for_every_log_filter() {
    let p = init_cortical(CorticalInit::LogSpaced, 0);
    let grid = log_probe_grid();
    let flipped: Vec<(f64, f64)> = grid.iter().map(|&(s, t)| (s, -t)).collect();
    let m = modulation_profile(&p, &grid, FRAMES, 1.0).unwrap();
    let f = modulation_profile(&p, &flipped, FRAMES, 1.0).unwrap();
    for i in 0..40 {
        let db = 10.0 * (m.data()[i * 40 + i] / f.data()[i * 40 + i]).log10();
        assert!(db >= 6.0, "filter {i}: {db} dB");
    }
    let q = params(&[(2.0, 4.0)]);
    assert!(10.0 * (energy(&q, 0, (2.0, 4.0)) / energy(&q, 0, (2.0, -4.0))).log10() > 6.0);
}

#[test]
fn spectral_tuning_peaks_near_the_matched_ripple() {
    for &(sp, tp) in &[(1.0, 4.0), (2.0, 8.0)] {
        let ripple = (sp, tp);
        // sweep the filter's spectral modulation around the ripple's
        let sweep: Vec<f64> = (0..41).map(|i| sp * (0.7 + 0.015 * i as f64)).collect();
        let best = sweep
            .iter()
            .copied()
            .max_by(|&a, &b| {
                energy(&params(&[(a, tp)]), 0, ripple).total_cmp(&energy(
                    &params(&[(b, tp)]),
                    0,
                    ripple,
                ))
            })
            .unwrap();
        assert!((best / sp - 1.0).abs() <= 0.1, "best {best} for {sp}");
    }

    // the tape derivative of the matched energy agrees with finite differences
    let ripple = gen_moving_ripple(1.0, 4.0, FRAMES).unwrap();
    let ext = vec![half_extents(1.0, 4.0)];
    let f = |tape: &mut Tape, v: &[Var]| {
        let s = tape.constant(ripple.clone());
        let vars = CorticalVars {
            spectral: v[0],
            temporal: v[1],
        };
        let r = cortical_forward(tape, s, &vars, Some(&ext))?;
        let r2 = tape.mul(r, r)?;
        Ok(tape.sum(r2))
    };
    let report = grad_check(
        f,
        &[
            ("spectral", Tensor::vector(vec![1.0])),
            ("temporal", Tensor::vector(vec![4.0])),
        ],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(
        report.iter().all(|c| c.status == CheckStatus::Pass),
        "{report:?}"
    );
}

#[test]
fn gradients_with_fixed_support() {
    let p = init_cortical(CorticalInit::Random, 3);
    let s = random_spec(50, 4);
    let ext = p.extents();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = Tensor::new(
        vec![40, 129, 50],
        (0..40 * 129 * 50)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let f = |tape: &mut Tape, v: &[Var]| {
        let sv = tape.constant(s.clone());
        let vars = CorticalVars {
            spectral: v[0],
            temporal: v[1],
        };
        let r = cortical_forward(tape, sv, &vars, Some(&ext))?;
        let wv = tape.constant(w.clone());
        let y = tape.mul(r, wv)?;
        Ok(tape.sum(y))
    };
    let report = grad_check(
        f,
        &[
            ("spectral", p.spectral.clone()),
            ("temporal", p.temporal.clone()),
        ],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert_eq!(report.len(), 80);
    let bad: Vec<_> = report
        .iter()
        .filter(|c| c.status != CheckStatus::Pass)
        .collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn clamp_keeps_direction() {
    let mut p = params(&[(20.0, -500.0), (0.0, 0.01)]);
    clamp_params(&mut p);
    assert_eq!(p.spectral.data(), &[SPECTRAL_MAX, SPECTRAL_MIN]);
    assert_eq!(p.temporal.data(), &[-TEMPORAL_MAX, TEMPORAL_MIN]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn response_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, t in 1usize..40) {
        let p = init_cortical(CorticalInit::Random, seed);
        let s = random_spec(t, seed);
        let r1 = p.respond(&s).unwrap();
        let r2 = p.respond(&s.map(|v| a * v)).unwrap();
        let scale = r1.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for (x, y) in r1.data().iter().zip(r2.data()) {
            prop_assert!((a * x - y).abs() <= 1e-10 * scale * a.abs().max(1.0));
        }
    }

    #[test]
    fn kernels_are_zero_mean_unit_norm(sp in 0.05f64..12.0, tp in 0.1f64..100.0, neg in any::<bool>()) {
        let tp = if neg { -tp } else { tp };
        let k = strf_kernel(sp, tp).unwrap();
        prop_assert!(k.data().iter().sum::<f64>().abs() < 1e-9);
        prop_assert!((k.data().iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
