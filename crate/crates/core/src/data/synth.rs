use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{LabeledWindowSet, SetMetadata};
use crate::error::{Error, Result};

pub const MAX_SYNTH_CLASSES: usize = 8;
pub const SYNTH_NOISE_STD: f64 = 0.1;
pub const SYNTH_SAMPLE_RATE_HZ: f64 = 50.0;

/// Base frequency of class `k`, in cycles per window.
pub fn synth_cycles(class: usize) -> usize {
    8 * (class + 1)
}

/// Class-separable sinusoid windows. Class `k` oscillates at
/// `8(k+1)` cycles per window with amplitude `1 + 0.5k` and a half-amplitude
/// second harmonic when it stays below Nyquist; every channel gets its own
/// random phase and `0.1`-scaled gaussian noise. Window `i` has label `i % K`.
pub fn synth_generate(
    n_per_class: usize,
    channels: usize,
    length: usize,
    classes: usize,
    seed: u64,
) -> Result<LabeledWindowSet> {
    if classes == 0 || classes > MAX_SYNTH_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "synthetic classes must be in 1..={MAX_SYNTH_CLASSES}, got {classes}"
        )));
    }
    if n_per_class == 0 || channels == 0 || length == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * classes;
    let mut windows = Vec::with_capacity(n * channels * length);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let cycles = synth_cycles(k) as f64;
        let amp = 1.0 + 0.5 * k as f64;
        let harmonic = 2 * synth_cycles(k) < length.div_ceil(2);
        for _ in 0..channels {
            let phase: f64 = rng.random_range(0.0..TAU);
            for t in 0..length {
                let arg = TAU * cycles * t as f64 / length as f64 + phase;
                let mut v = arg.sin();
                if harmonic {
                    v += 0.5 * (2.0 * arg).sin();
                }
                let noise: f64 = rng.sample(StandardNormal);
                windows.push((amp * v + SYNTH_NOISE_STD * noise) as f32);
            }
        }
        labels.push(k);
    }
    let meta = SetMetadata {
        channel_names: (0..channels).map(|c| format!("ch{c}")).collect(),
        class_names: (0..classes).map(|k| format!("class{k}")).collect(),
        sample_rate_hz: SYNTH_SAMPLE_RATE_HZ,
    };
    LabeledWindowSet::new(windows, labels, channels, length, meta)
}
