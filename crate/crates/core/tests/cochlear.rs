use audfront::autodiff::{grad_check, CheckStatus, Tape, Tensor};
use audfront::cochlear::*;
use audfront::signal::{gen_harmonic_complex, Waveform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect()
}

#[test]
fn roex_peak_by_grid_search() {
    let xh = 9.0;
    let (mut best, mut arg) = (0.0, 0.0);
    for i in 0..200_000 {
        let x = xh - 0.5 + i as f64 * 0.5 / 200_000.0;
        let v = roex_response(x, xh);
        if v > best {
            best = v;
            arg = x;
        }
    }
    assert!((xh - arg - 0.0375).abs() < 1e-5, "{}", xh - arg);
    assert!((best - 0.0375f64.powf(0.3) * (-0.3f64).exp()).abs() < 1e-9);
    assert!((roex_peak() - best).abs() < 1e-9);
}

/// Lower and upper -3 dB points (in octaves) found by bisection.
fn bandwidth_octaves(k: usize) -> (f64, f64) {
    let fc = center_frequency(k).log2();
    let target = 10f64.powf(-3.0 / 20.0);
    let h = |x: f64| channel_response(k, 2f64.powf(x)) - target;
    let bisect = |mut a: f64, mut b: f64| {
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if (h(a) > 0.0) == (h(m) > 0.0) {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    let lo = bisect(fc - 2.0, fc);
    let hi = bisect(fc, upper_edge(k));
    (lo, hi)
}

#[test]
fn channels_are_constant_q() {
    let (l0, h0) = bandwidth_octaves(0);
    let bw0 = h0 - l0;
    let q0 = (2f64.powf(h0) - 2f64.powf(l0)) / center_frequency(0);
    for k in 0..CHANNELS {
        let (l, h) = bandwidth_octaves(k);
        assert!(((h - l) - bw0).abs() < 1e-6, "channel {k}");
        let q = (2f64.powf(h) - 2f64.powf(l)) / center_frequency(k);
        assert!((q / q0 - 1.0).abs() < 0.05, "channel {k}");
        assert_eq!(channel_response(k, 2f64.powf(upper_edge(k)) * 1.001), 0.0);
    }
}

#[test]
fn filterbank_samples_each_channel() {
    let fb = build_filterbank(16_000).unwrap();
    assert_eq!(fb.response().shape(), &[129, 8001]);
    // 1 Hz bins: bin 360 is channel 24's centre
    assert!((fb.response().data()[24 * 8001 + 360] - 1.0).abs() < 1e-12);
    assert!(build_filterbank(79).is_err());
}

#[test]
fn output_geometry_and_silence() {
    let p = CochlearParams::default();
    let s = p
        .spectrogram(&Waveform::new(noise(16_000, 1)).unwrap())
        .unwrap();
    assert_eq!(s.shape(), &[129, 200]);
    for n in [80, 81, 16_000] {
        let s = p
            .spectrogram(&Waveform::new(vec![0.0; n]).unwrap())
            .unwrap();
        assert_eq!(s.shape(), &[129, n.div_ceil(80)]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn pure_tone_lands_in_its_channel() {
    let f = center_frequency(60);
    let tone = gen_harmonic_complex(f, 1, 1.0, None).unwrap();
    let s = CochlearParams::default().spectrogram(&tone).unwrap();
    let t = s.shape()[1];
    let avg: Vec<f64> = (0..CHANNELS)
        .map(|k| s.data()[k * t..(k + 1) * t].iter().sum::<f64>())
        .collect();
    let best = (0..CHANNELS)
        .max_by(|&a, &b| avg[a].total_cmp(&avg[b]))
        .unwrap();
    assert!(best.abs_diff(60) <= 1, "argmax {best}");
}

#[test]
fn one_hop_delay_shifts_one_frame() {
    // all filtering is circular, so the delay is an exact shift when the
    // samples pushed off the end are silent
    let mut x = noise(16_000, 3);
    x[15_200..].iter_mut().for_each(|v| *v = 0.0);
    let mut y = vec![0.0; 80];
    y.extend_from_slice(&x[..16_000 - 80]);
    let p = CochlearParams::default();
    let a = p.spectrogram(&Waveform::new(x).unwrap()).unwrap();
    let b = p.spectrogram(&Waveform::new(y).unwrap()).unwrap();
    let max = a.data().iter().cloned().fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for k in 0..CHANNELS {
        for t in 0..199 {
            worst = worst.max((a.data()[k * 200 + t] - b.data()[k * 200 + t + 1]).abs());
        }
    }
    assert!(worst / max < 1e-6, "{}", worst / max);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let x = noise(4000, 11);
    let p = CochlearParams::default();
    let f = |tape: &mut Tape, v: &[audfront::autodiff::Var]| {
        let vars = CochlearVars {
            alpha: v[0],
            inhibition: v[1],
            tau: v[2],
        };
        let w = tape.constant(Tensor::vector(x.clone()));
        let s = cochlear_forward(tape, w, &vars)?;
        Ok(tape.sum(s))
    };
    let report = grad_check(
        f,
        &[
            ("alpha", p.alpha.clone()),
            ("inhibition", p.inhibition.clone()),
            ("tau", p.tau.clone()),
        ],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert_eq!(report.len(), 132);
    let bad: Vec<_> = report
        .iter()
        .filter(|c| c.status != CheckStatus::Pass)
        .collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn clamps_apply_floors() {
    let mut p = CochlearParams::default();
    p.alpha.data_mut()[3] = -1.0;
    p.tau.data_mut()[0] = 0.0;
    clamp_params(&mut p);
    assert_eq!(p.alpha.data()[3], ALPHA_FLOOR);
    assert_eq!(p.tau.data()[0], TAU_FLOOR_MS);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn output_is_nonnegative_at_init(seed in any::<u64>(), n in 80usize..2000) {
        let s = CochlearParams::default().spectrogram(&Waveform::new(noise(n, seed)).unwrap()).unwrap();
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn compression_is_monotone_in_the_exponent(seed in any::<u64>(), a in 0.2f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small: Vec<f64> = (0..50).map(|_| rng.gen_range(0.01..0.99)).collect();
        let large: Vec<f64> = small.iter().map(|v| 1.0 + 5.0 * v).collect();
        let energy = |x: &[f64], e: f64| {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::vector(x.to_vec()));
            let ev = tape.constant(Tensor::scalar(e));
            let y = tape.pow(xv, ev).unwrap();
            let y2 = tape.mul(y, y).unwrap();
            let s = tape.sum(y2);
            tape.value(s).item().unwrap()
        };
        prop_assert!(energy(&small, a + 0.1) < energy(&small, a));
        prop_assert!(energy(&large, a + 0.1) > energy(&large, a));
    }
}
