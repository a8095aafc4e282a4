use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LabeledWindowSet;
use crate::error::{Error, Result};

/// Evaluation-time corruption of a window set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    Noise { snr_db: f64 },
    MaskFixed { ratio: f64 },
    MaskRandom { ratio: f64 },
}

impl Perturbation {
    pub fn kind(&self) -> &'static str {
        match self {
            Perturbation::Noise { .. } => "noise",
            Perturbation::MaskFixed { .. } => "mask_fixed",
            Perturbation::MaskRandom { .. } => "mask_random",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            Perturbation::Noise { snr_db } => snr_db,
            Perturbation::MaskFixed { ratio } | Perturbation::MaskRandom { ratio } => ratio,
        }
    }
}

/// A perturbation together with its seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    #[serde(flatten)]
    pub perturbation: Perturbation,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn apply(&self, set: &LabeledWindowSet) -> Result<LabeledWindowSet> {
        self.apply_grouped(set, &SensorGroups::channels(set.channels()))
    }

    pub fn apply_grouped(&self, set: &LabeledWindowSet, groups: &SensorGroups) -> Result<LabeledWindowSet> {
        match self.perturbation {
            Perturbation::Noise { snr_db } => add_noise(set, snr_db, self.seed),
            Perturbation::MaskFixed { ratio } => mask_groups_fixed(set, groups, ratio, self.seed).map(|(s, _)| s),
            Perturbation::MaskRandom { ratio } => mask_groups_random(set, groups, ratio, self.seed),
        }
    }
}

/// Seed of the sub-stream `index` of `seed`, independent of processing order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Adds gaussian noise to every window so that its SNR is exactly `snr_db`,
/// with powers taken as the mean square over the window's samples.
pub fn add_noise(set: &LabeledWindowSet, snr_db: f64, seed: u64) -> Result<LabeledWindowSet> {
    let (noisy, _) = add_noise_with_buffer(set, snr_db, seed)?;
    Ok(noisy)
}

/// [`add_noise`] that also returns the injected noise, `N × C × T` like the set.
pub fn add_noise_with_buffer(set: &LabeledWindowSet, snr_db: f64, seed: u64) -> Result<(LabeledWindowSet, Vec<f64>)> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db {snr_db} is not finite")));
    }
    let per = set.channels() * set.length();
    let mut out = set.clone();
    let mut buffer = Vec::with_capacity(set.samples().len());
    let target = 10f64.powf(-snr_db / 10.0);
    for (w, chunk) in out.samples_mut().chunks_mut(per).enumerate() {
        let signal_power = chunk.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / per as f64;
        if signal_power == 0.0 {
            return Err(Error::SilentWindow(w));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, w as u64));
        let raw: Vec<f64> = (0..per).map(|_| rng.sample(StandardNormal)).collect();
        let raw_power = raw.iter().map(|v| v * v).sum::<f64>() / per as f64;
        let scale = if raw_power > 0.0 { (signal_power * target / raw_power).sqrt() } else { 0.0 };
        for (v, z) in chunk.iter_mut().zip(&raw) {
            let noise = scale * z;
            *v = (*v as f64 + noise) as f32;
            buffer.push(noise);
        }
    }
    Ok((out, buffer))
}

/// Partition of channels into sensors that are masked together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorGroups {
    groups: Vec<Vec<usize>>,
}

impl SensorGroups {
    /// Every channel is its own sensor.
    pub fn channels(count: usize) -> Self {
        Self { groups: (0..count).map(|c| vec![c]).collect() }
    }

    /// Channels sharing the part of their name before `separator` form one sensor.
    /// Names without the separator stand alone.
    pub fn by_prefix(names: &[String], separator: char) -> Self {
        let mut keys: Vec<&str> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (c, name) in names.iter().enumerate() {
            let key = name.split_once(separator).map_or(name.as_str(), |(p, _)| p);
            match keys.iter().position(|k| *k == key) {
                Some(g) => groups[g].push(c),
                None => {
                    keys.push(key);
                    groups.push(vec![c]);
                }
            }
        }
        Self { groups }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    fn channel_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// `round(ratio · groups)`, at least one when `ratio > 0`.
pub fn masked_count(ratio: f64, groups: usize) -> usize {
    if ratio <= 0.0 {
        return 0;
    }
    ((ratio * groups as f64).round() as usize).clamp(1, groups)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

fn check_groups(set: &LabeledWindowSet, groups: &SensorGroups) -> Result<()> {
    if groups.channel_count() != set.channels() || groups.groups.iter().flatten().any(|&c| c >= set.channels()) {
        return Err(Error::Shape(format!("sensor groups do not cover the {} channels", set.channels())));
    }
    Ok(())
}

fn zero_channels(window: &mut [f32], length: usize, channels: &[usize]) {
    for &c in channels {
        window[c * length..(c + 1) * length].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Zeroes the same `round(ratio · C)` channels in every window and returns
/// their sorted indices.
pub fn mask_sensors_fixed(set: &LabeledWindowSet, ratio: f64, seed: u64) -> Result<(LabeledWindowSet, Vec<usize>)> {
    mask_groups_fixed(set, &SensorGroups::channels(set.channels()), ratio, seed)
}

/// Zeroes an independent choice of `round(ratio · C)` channels per window.
pub fn mask_sensors_random(set: &LabeledWindowSet, ratio: f64, seed: u64) -> Result<LabeledWindowSet> {
    mask_groups_random(set, &SensorGroups::channels(set.channels()), ratio, seed)
}

pub fn mask_groups_fixed(
    set: &LabeledWindowSet,
    groups: &SensorGroups,
    ratio: f64,
    seed: u64,
) -> Result<(LabeledWindowSet, Vec<usize>)> {
    check_ratio(ratio)?;
    check_groups(set, groups)?;
    let m = masked_count(ratio, groups.len());
    let mut out = set.clone();
    if m == 0 {
        return Ok((out, Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked: Vec<usize> =
        sample(&mut rng, groups.len(), m).into_iter().flat_map(|g| groups.groups[g].iter().copied()).collect();
    masked.sort_unstable();
    let (per, t) = (set.channels() * set.length(), set.length());
    for window in out.samples_mut().chunks_mut(per) {
        zero_channels(window, t, &masked);
    }
    Ok((out, masked))
}

pub fn mask_groups_random(
    set: &LabeledWindowSet,
    groups: &SensorGroups,
    ratio: f64,
    seed: u64,
) -> Result<LabeledWindowSet> {
    check_ratio(ratio)?;
    check_groups(set, groups)?;
    let m = masked_count(ratio, groups.len());
    let mut out = set.clone();
    if m == 0 {
        return Ok(out);
    }
    let (per, t) = (set.channels() * set.length(), set.length());
    for (w, window) in out.samples_mut().chunks_mut(per).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, w as u64));
        let chosen: Vec<usize> =
            sample(&mut rng, groups.len(), m).into_iter().flat_map(|g| groups.groups[g].iter().copied()).collect();
        zero_channels(window, t, &chosen);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn zeroed_channels(set: &LabeledWindowSet, w: usize) -> Vec<usize> {
        let t = set.length();
        (0..set.channels()).filter(|&c| set.window(w)[c * t..(c + 1) * t].iter().all(|&v| v == 0.0)).collect()
    }

    #[test]
    fn snr_is_exact_per_window() {
        let set = synth_generate(4, 3, 600, 2, 1).unwrap();
        for snr in [-20.0, -10.0, 0.0, 20.0] {
            let (_, noise) = add_noise_with_buffer(&set, snr, 5).unwrap();
            let per = 3 * 600;
            for w in 0..set.len() {
                let ps = set.window(w).iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / per as f64;
                let pn = noise[w * per..(w + 1) * per].iter().map(|v| v * v).sum::<f64>() / per as f64;
                assert!((10.0 * (ps / pn).log10() - snr).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn high_snr_is_nearly_identity() {
        let set = synth_generate(2, 2, 64, 2, 1).unwrap();
        let noisy = add_noise(&set, 60.0, 3).unwrap();
        let num: f64 = set.samples().iter().zip(noisy.samples()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        let den: f64 = set.samples().iter().map(|&a| (a as f64).powi(2)).sum();
        assert!((num / den).sqrt() < 1e-2);
    }

    #[test]
    fn noise_reproducible_per_seed() {
        let set = synth_generate(2, 2, 32, 2, 1).unwrap();
        assert_eq!(add_noise(&set, 0.0, 7).unwrap(), add_noise(&set, 0.0, 7).unwrap());
        assert_ne!(add_noise(&set, 0.0, 7).unwrap(), add_noise(&set, 0.0, 8).unwrap());
    }

    #[test]
    fn silent_window_is_an_error() {
        let mut set = synth_generate(1, 1, 8, 2, 1).unwrap();
        set.samples_mut()[8..].iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(add_noise(&set, 0.0, 1), Err(Error::SilentWindow(1))));
    }

    #[test]
    fn fixed_mask_counts() {
        let set = synth_generate(2, 17, 16, 2, 1).unwrap();
        let (out, ids) = mask_sensors_fixed(&set, 0.3, 4).unwrap();
        assert_eq!(ids.len(), 5);
        for w in 0..out.len() {
            assert_eq!(zeroed_channels(&out, w), ids);
        }
        let (same, none) = mask_sensors_fixed(&set, 0.0, 4).unwrap();
        assert!(none.is_empty());
        assert_eq!(same, set);
        let (all, _) = mask_sensors_fixed(&set, 1.0, 4).unwrap();
        assert!(all.samples().iter().all(|&v| v == 0.0));
        assert_eq!(masked_count(0.01, 17), 1);
    }

    #[test]
    fn random_mask_varies_per_window() {
        let set = synth_generate(50, 17, 16, 2, 1).unwrap();
        let out = mask_sensors_random(&set, 0.3, 4).unwrap();
        let first = zeroed_channels(&out, 0);
        let mut differs = false;
        for w in 0..out.len() {
            let z = zeroed_channels(&out, w);
            assert_eq!(z.len(), 5);
            differs |= z != first;
        }
        assert!(differs);
        assert_eq!(mask_sensors_random(&set, 0.0, 4).unwrap(), set);
    }

    #[test]
    fn prefix_groups_mask_whole_sensors() {
        let mut set = synth_generate(3, 6, 8, 2, 1).unwrap();
        set.channel_names = ["acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "hr"].map(String::from).to_vec();
        let groups = SensorGroups::by_prefix(&set.channel_names, '_');
        assert_eq!(groups.groups(), &[vec![0, 1, 2], vec![3, 4], vec![5]]);
        let (out, ids) = mask_groups_fixed(&set, &groups, 0.3, 2).unwrap();
        assert!(ids == [0, 1, 2] || ids == [3, 4] || ids == [5]);
        assert_eq!(zeroed_channels(&out, 0), ids);
    }

    #[test]
    fn perturbation_round_trips_through_json() {
        let spec = PerturbationSpec { perturbation: Perturbation::MaskFixed { ratio: 0.2 }, seed: 3 };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(text, r#"{"kind":"mask_fixed","ratio":0.2,"seed":3}"#);
        assert_eq!(serde_json::from_str::<PerturbationSpec>(&text).unwrap(), spec);
    }
}
