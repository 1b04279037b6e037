use audfront::autodiff::{grad_check, CheckStatus, Tape, Tensor};
use audfront::fft;
use audfront::signal::*;
use audfront::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_wave(n: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
}

#[test]
fn wav_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.wav");
    let w = random_wave(1234, 1);
    write_wav(&p, &w).unwrap();
    let back = read_wav(&p).unwrap();
    assert_eq!(back.len(), 1234);
    let err = w
        .samples()
        .iter()
        .zip(back.samples())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 2f64.powi(-15), "{err}");

    let zeros = Waveform::new(vec![0.0; 100]).unwrap();
    write_wav(&p, &zeros).unwrap();
    assert!(read_wav(&p).unwrap().samples().iter().all(|&v| v == 0.0));
}

#[test]
fn wav_rejects_other_rates_with_message() {
    let mut bytes = encode_wav(&random_wave(10, 2)).unwrap();
    bytes[24..28].copy_from_slice(&44_100u32.to_le_bytes());
    let err = decode_wav(&bytes).unwrap_err();
    assert!(matches!(
        err,
        Error::SampleRate {
            found: 44_100,
            expected: 16_000
        }
    ));
    assert_eq!(err.to_string(), "sample rate 44100, expected 16000");
}

/// Mean power of an octave band from a Welch-style average of Hann-windowed
/// 1024-point periodograms (direct DFT via the crate's FFT).
fn band_power(x: &[f64], lo: f64, hi: f64) -> f64 {
    let n = 1024;
    let win: Vec<f64> = (0..n)
        .map(|j| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * j as f64 / n as f64).cos())
        .collect();
    let mut acc = vec![0.0; n / 2 + 1];
    let mut segs = 0;
    let mut start = 0;
    while start + n <= x.len() {
        let seg: Vec<f64> = x[start..start + n]
            .iter()
            .zip(&win)
            .map(|(a, w)| a * w)
            .collect();
        let (re, im) = fft::rfft_rows(&seg, n);
        for k in 0..acc.len() {
            acc[k] += re[k] * re[k] + im[k] * im[k];
        }
        segs += 1;
        start += n / 2;
    }
    let df = 16_000.0 / n as f64;
    let bins: Vec<usize> = (0..acc.len())
        .filter(|&k| (k as f64 * df) >= lo && (k as f64 * df) < hi)
        .collect();
    bins.iter().map(|&k| acc[k]).sum::<f64>() / segs as f64
}

#[test]
fn pink_noise_has_equal_power_per_octave() {
    let w = gen_pink_noise(10.0, 7).unwrap();
    let low = band_power(w.samples(), 200.0, 400.0);
    let high = band_power(w.samples(), 1600.0, 3200.0);
    let db = 10.0 * (low / high).log10();
    assert!(db.abs() < 1.5, "{db} dB");
    assert_eq!(w.samples(), gen_pink_noise(10.0, 7).unwrap().samples());
    let (re, im) = fft::rfft_rows(w.samples(), w.len());
    assert!(re[0].abs() < 1e-9 && im[0] == 0.0);
}

#[test]
fn harmonic_complex_peaks_at_multiples() {
    let w = gen_harmonic_complex(200.0, 10, 1.0, None).unwrap();
    let (re, im) = fft::rfft_rows(w.samples(), w.len());
    let mag: Vec<f64> = re.iter().zip(&im).map(|(a, b)| a.hypot(*b)).collect();
    let mut order: Vec<usize> = (0..mag.len()).collect();
    order.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]));
    let mut top: Vec<usize> = order[..10].to_vec();
    top.sort();
    // 1 Hz bins over one second
    assert_eq!(top, (1..=10).map(|h| 200 * h).collect::<Vec<_>>());

    let tone = gen_harmonic_complex(440.0, 1, 1.0, None).unwrap();
    let (re, im) = fft::rfft_rows(tone.samples(), tone.len());
    let peak = (0..re.len())
        .max_by(|&a, &b| re[a].hypot(im[a]).total_cmp(&re[b].hypot(im[b])))
        .unwrap();
    assert_eq!(peak, 440);
    assert!(gen_harmonic_complex(3000.0, 4, 1.0, None).is_err());
}

#[test]
fn ripple_geometry() {
    let flat = gen_moving_ripple(0.0, 0.0, 20).unwrap();
    assert!(flat.data().iter().all(|&v| (v - 1.9).abs() < 1e-12));

    let r = gen_moving_ripple(2.0, 4.0, 200).unwrap();
    let frames = 200;
    for k in [0, 64, 128] {
        let row = &r.data()[k * frames..(k + 1) * frames];
        for t in 0..150 {
            assert!((row[t] - row[t + 50]).abs() < 1e-9);
        }
    }

    // 2-D modulation spectrum (direct DFT over the mean-removed stimulus)
    let (sp, tp) = (2.0, 4.0);
    let mean = r.data().iter().sum::<f64>() / r.len() as f64;
    let power_at = |cyc_per_chan: f64, hz: f64| {
        let (mut re, mut im) = (0.0, 0.0);
        for k in 0..129 {
            for t in 0..frames {
                let ph =
                    2.0 * std::f64::consts::PI * (cyc_per_chan * k as f64 + hz * t as f64 / 200.0);
                let v = r.data()[k * frames + t] - mean;
                re += v * ph.cos();
                im -= v * ph.sin();
            }
        }
        re * re + im * im
    };
    let matched = power_at(sp / 24.0, tp).max(power_at(sp / 24.0, -tp));
    for (s2, t2) in [(1.0, 4.0), (4.0, 4.0), (2.0, 8.0), (2.0, 2.0), (0.5, 1.0)] {
        let other = power_at(s2 / 24.0, t2).max(power_at(s2 / 24.0, -t2));
        assert!(matched > 10.0 * other, "({s2},{t2})");
    }
}

#[test]
fn mixing_gains() {
    let a = random_wave(4000, 1);
    let b = random_wave(4000, 2);
    let g3 = snr_gain(a.samples(), a.samples(), 3.0).unwrap();
    assert!((g3 - 10f64.powf(-3.0 / 20.0)).abs() < 1e-12);
    assert!((g3 - 0.70795).abs() < 1e-5);
    let m = mix_at_snr(&a, &b, 60.0).unwrap();
    let resid: Vec<f64> = m
        .samples()
        .iter()
        .zip(a.samples())
        .map(|(x, s)| x - s)
        .collect();
    assert!((power(&resid) / power(a.samples()) - 1e-6).abs() < 1e-12);
}

#[test]
fn stft_counts_and_tone_bin() {
    let tone = gen_harmonic_complex(1000.0, 1, 1.0, None).unwrap();
    let s = stft(&tone, 256, 80).unwrap();
    assert_eq!(s.real.shape(), &[200, 129]);
    let mid = 100 * 129;
    let mag = |k: usize| s.real.data()[mid + k].hypot(s.imag.data()[mid + k]);
    let peak = (0..129).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
    assert_eq!(peak, 16);

    let z = stft(&Waveform::new(vec![0.0; 1000]).unwrap(), 256, 80).unwrap();
    assert!(z.real.data().iter().chain(z.imag.data()).all(|&v| v == 0.0));
    assert!(istft(&z).unwrap().samples().iter().all(|&v| v == 0.0));
}

#[test]
fn stft_round_trip_all_loss_windows() {
    let w = random_wave(16_000, 9);
    for win in [256, 512, 1024] {
        let back = istft(&stft(&w, win, win / 4).unwrap()).unwrap();
        let err = w
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "window {win}: {err}");
    }
}

#[test]
fn istft_is_linear() {
    let w = random_wave(3000, 4);
    let s = stft(&w, 256, 80).unwrap();
    let mut s2 = s.clone();
    s2.real = s.real.map(|v| 2.5 * v);
    s2.imag = s.imag.map(|v| 2.5 * v);
    let (a, b) = (istft(&s).unwrap(), istft(&s2).unwrap());
    for (x, y) in a.samples().iter().zip(b.samples()) {
        assert!((2.5 * x - y).abs() < 1e-12);
    }
}

#[test]
fn masked_resynthesis_gradient() {
    let n = 800;
    let plan = StftPlan::new(256, 80, n).unwrap();
    let x = random_wave(n, 3).into_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mask = Tensor::new(
        vec![plan.frames(), plan.bins()],
        (0..plan.frames() * plan.bins())
            .map(|_| rng.gen_range(0.1..1.0))
            .collect(),
    )
    .unwrap();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = |tape: &mut Tape, p: &[audfront::autodiff::Var]| {
        let (re, im) = plan.forward(tape, p[0])?;
        let re = tape.mul(re, p[1])?;
        let im = tape.mul(im, p[1])?;
        let y = plan.inverse(tape, re, im)?;
        let wv = tape.constant(Tensor::vector(w.clone()));
        let y = tape.mul(y, wv)?;
        Ok(tape.sum(y))
    };
    // f is linear in every single component, so central differences carry no
    // truncation error and a wide step keeps rounding noise small
    let report = grad_check(f, &[("x", Tensor::vector(x)), ("mask", mask)], 1e-2, 1e-5).unwrap();
    let bad: Vec<_> = report
        .iter()
        .filter(|c| c.status != CheckStatus::Pass)
        .collect();
    assert!(
        bad.is_empty(),
        "{} of {}: {:?}",
        bad.len(),
        report.len(),
        &bad[..bad.len().min(5)]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn remeasured_snr_is_exact(seed in any::<u64>(), snr in -20.0f64..20.0) {
        let s = random_wave(2000, seed);
        let n = random_wave(2000, seed.wrapping_add(1));
        let m = mix_at_snr(&s, &n, snr).unwrap();
        let noise: Vec<f64> = m.samples().iter().zip(s.samples()).map(|(x, y)| x - y).collect();
        let measured = 10.0 * (power(s.samples()) / power(&noise)).log10();
        prop_assert!((measured - snr).abs() < 1e-9);
    }

    #[test]
    fn generators_are_pure(seed in any::<u64>()) {
        prop_assert_eq!(gen_pink_noise(0.1, seed).unwrap(), gen_pink_noise(0.1, seed).unwrap());
    }

    #[test]
    fn stft_round_trip_random_lengths(n in 80usize..3000, seed in any::<u64>()) {
        let w = random_wave(n, seed);
        let back = istft(&stft(&w, 256, 80).unwrap()).unwrap();
        for (a, b) in w.samples().iter().zip(back.samples()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
