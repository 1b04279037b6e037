//! Synthetic datasets for smoke-scale training runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{Dataset, Item, Role};
use crate::error::Result;
use crate::signal::{gen_harmonic_complex, gen_pink_noise, Waveform};
use crate::HOP;

/// Classification harmonics are kept below this frequency.
const HARMONIC_CEILING_HZ: f64 = 7900.0;

/// Harmonics per enhancement target.
const TARGET_HARMONICS: usize = 10;

fn harmonic(f0: f64, n: usize, seconds: f64, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    gen_harmonic_complex(f0, n, seconds, Some(&weights))
}

fn labeled(name: String, wave: Waveform, class: i32) -> Item {
    let frames = wave.len().div_ceil(HOP);
    Item {
        name,
        wave,
        labels: Some(vec![class; frames]),
        role: None,
    }
}

/// Three classes: harmonic complexes at f0 = 150 Hz and 300 Hz (random
/// harmonic weights per item) and pink noise. Every frame of an item carries
/// its class.
pub fn toy_classification(seed: u64, per_class: usize, seconds: f64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(3 * per_class);
    for i in 0..per_class {
        for (class, f0) in [(0, 150.0), (1, 300.0)] {
            items.push(labeled(
                format!("f0_{f0}_{i}"),
                harmonic(f0, (HARMONIC_CEILING_HZ / f0) as usize, seconds, &mut rng)?,
                class,
            ));
        }
        let noise = gen_pink_noise(seconds, rng.gen())?;
        items.push(labeled(format!("pink_{i}"), noise, 2));
    }
    Ok(Dataset {
        classes: vec!["f0_150".into(), "f0_300".into(), "pink".into()],
        items,
    })
}

/// `pairs` harmonic-complex targets (f0 uniform in 120..300 Hz, ten harmonics
/// with random weights) and as many pink-noise interferers.
pub fn toy_enhancement(seed: u64, pairs: usize, seconds: f64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(2 * pairs);
    for i in 0..pairs {
        let f0 = rng.gen_range(120.0..300.0);
        items.push(Item {
            name: format!("target_{i}"),
            wave: harmonic(f0, TARGET_HARMONICS, seconds, &mut rng)?,
            labels: None,
            role: Some(Role::Speech),
        });
        items.push(Item {
            name: format!("noise_{i}"),
            wave: gen_pink_noise(seconds, rng.gen())?,
            labels: None,
            role: Some(Role::Noise),
        });
    }
    Ok(Dataset {
        classes: Vec::new(),
        items,
    })
}
