//! Labeled window sets: ingestion, segmentation, standardization, synthetic
//! generation and the evaluation-time perturbations.

pub mod io;
pub mod perturb;
pub mod synth;
pub mod window;

pub use io::{load_binary, load_csv, read_binary, save_binary, write_binary, CsvFormat, CsvSchema, WINDOW_SET_MAGIC};
pub use perturb::{
    add_noise, add_noise_with_buffer, derive_seed, mask_groups_fixed, mask_groups_random, mask_sensors_fixed,
    mask_sensors_random, masked_count, Perturbation, PerturbationSpec, SensorGroups,
};
pub use synth::{synth_cycles, synth_generate};
pub use window::sliding_window;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `N` windows of `C × T` samples with integer labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindowSet {
    windows: Vec<f32>,
    labels: Vec<usize>,
    channels: usize,
    length: usize,
    pub channel_names: Vec<String>,
    pub class_names: Vec<String>,
    pub sample_rate_hz: f64,
}

/// Descriptive fields stored alongside the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetMetadata {
    pub channel_names: Vec<String>,
    pub class_names: Vec<String>,
    pub sample_rate_hz: f64,
}

impl LabeledWindowSet {
    /// Validates and assembles a set. `windows` is `N × C × T` row-major.
    pub fn new(
        windows: Vec<f32>,
        labels: Vec<usize>,
        channels: usize,
        length: usize,
        meta: SetMetadata,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if channels == 0 || length == 0 || windows.len() != n * channels * length {
            return Err(Error::Shape(format!(
                "{} samples do not form {n} windows of {channels}x{length}",
                windows.len()
            )));
        }
        if meta.channel_names.len() != channels {
            return Err(Error::Shape(format!("{} channel names for {channels} channels", meta.channel_names.len())));
        }
        let k = meta.class_names.len();
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::InvalidArgument(format!("window {i}: label {l} out of range for {k} classes")));
        }
        if let Some(pos) = windows.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("window {}: non-finite sample", pos / (channels * length))));
        }
        if !(meta.sample_rate_hz > 0.0 && meta.sample_rate_hz.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample rate {} must be positive", meta.sample_rate_hz)));
        }
        Ok(Self {
            windows,
            labels,
            channels,
            length,
            channel_names: meta.channel_names,
            class_names: meta.class_names,
            sample_rate_hz: meta.sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn samples(&self) -> &[f32] {
        &self.windows
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [f32] {
        &mut self.windows
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let per = self.channels * self.length;
        &self.windows[i * per..(i + 1) * per]
    }

    pub fn metadata(&self) -> SetMetadata {
        SetMetadata {
            channel_names: self.channel_names.clone(),
            class_names: self.class_names.clone(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Windows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut windows = Vec::with_capacity(indices.len() * self.channels * self.length);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("window index {i} out of range")));
            }
            windows.extend_from_slice(self.window(i));
            labels.push(self.labels[i]);
        }
        Self::new(windows, labels, self.channels, self.length, self.metadata())
    }

    /// `B × C × T` tensor of the windows at `indices`.
    pub fn batch_tensor<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.length);
        for &i in indices {
            data.extend(self.window(i).iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(&[indices.len(), self.channels, self.length], data)
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch_tensor(&all)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Stratified split into train/validation/test. Each class contributes
    /// `round(n_c · train)` and `round(n_c · val)` windows to the first two
    /// parts and the rest to the test part.
    pub fn split(&self, train: f64, val: f64, seed: u64) -> Result<(Self, Self, Self)> {
        if !(train > 0.0 && val >= 0.0 && train + val <= 1.0) {
            return Err(Error::InvalidArgument(format!("split fractions {train}/{val} are invalid")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
        for class in 0..self.classes() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let n = idx.len() as f64;
            let n_tr = (n * train).round() as usize;
            let n_va = ((n * val).round() as usize).min(idx.len() - n_tr.min(idx.len()));
            let n_tr = n_tr.min(idx.len());
            tr.extend_from_slice(&idx[..n_tr]);
            va.extend_from_slice(&idx[n_tr..n_tr + n_va]);
            te.extend_from_slice(&idx[n_tr + n_va..]);
        }
        tr.sort_unstable();
        va.sort_unstable();
        te.sort_unstable();
        if tr.is_empty() || va.is_empty() || te.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "split of {} windows leaves an empty part ({} / {} / {})",
                self.len(),
                tr.len(),
                va.len(),
                te.len()
            )));
        }
        Ok((self.subset(&tr)?, self.subset(&va)?, self.subset(&te)?))
    }
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const MIN_STD: f64 = 1e-8;

impl Standardizer {
    /// Statistics over every window and time step of `train`.
    pub fn fit(train: &LabeledWindowSet) -> Self {
        let (c, t) = (train.channels(), train.length());
        let count = (train.len() * t) as f64;
        let mut mean = vec![0.0; c];
        for w in 0..train.len() {
            for (ch, row) in train.window(w).chunks(t).enumerate() {
                mean[ch] += row.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for w in 0..train.len() {
            for (ch, row) in train.window(w).chunks(t).enumerate() {
                var[ch] += row.iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(MIN_STD)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, set: &LabeledWindowSet) -> Result<LabeledWindowSet> {
        if self.mean.len() != set.channels() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} channels, set has {}",
                self.mean.len(),
                set.channels()
            )));
        }
        let mut out = set.clone();
        let t = set.length();
        let c = set.channels();
        for (i, v) in out.samples_mut().iter_mut().enumerate() {
            let ch = (i / t) % c;
            *v = ((*v as f64 - self.mean[ch]) / self.std[ch]) as f32;
        }
        Ok(out)
    }
}

/// Fits on `train` and applies the same statistics to `train` and `others`.
pub fn standardize(
    train: &LabeledWindowSet,
    others: &[&LabeledWindowSet],
) -> Result<(LabeledWindowSet, Vec<LabeledWindowSet>, Standardizer)> {
    let stats = Standardizer::fit(train);
    let train_out = stats.apply(train)?;
    let rest = others.iter().map(|s| stats.apply(s)).collect::<Result<Vec<_>>>()?;
    Ok((train_out, rest, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn meta(c: usize, k: usize) -> SetMetadata {
        SetMetadata {
            channel_names: (0..c).map(|i| format!("ch{i}")).collect(),
            class_names: (0..k).map(|i| format!("class{i}")).collect(),
            sample_rate_hz: 50.0,
        }
    }

    fn set_with_offset(n: usize, offset: f32) -> LabeledWindowSet {
        let windows =
            (0..n * 2 * 5).map(|i| offset + ((i * 37) % 11) as f32 * if i % 10 < 5 { 1.0 } else { 3.0 }).collect();
        LabeledWindowSet::new(windows, (0..n).map(|i| i % 2).collect(), 2, 5, meta(2, 2)).unwrap()
    }

    #[test]
    fn rejects_invalid_contents() {
        assert!(LabeledWindowSet::new(vec![0.0; 4], vec![0, 2], 1, 2, meta(1, 2)).is_err());
        assert!(LabeledWindowSet::new(vec![0.0, f32::NAN, 0.0, 0.0], vec![0, 1], 1, 2, meta(1, 2)).is_err());
        assert!(LabeledWindowSet::new(vec![], vec![], 1, 2, meta(1, 2)).is_err());
        assert!(LabeledWindowSet::new(vec![0.0; 3], vec![0], 1, 2, meta(1, 2)).is_err());
    }

    #[test]
    fn standardized_train_set_is_zero_mean_unit_std() {
        let train = set_with_offset(20, 2.0);
        let (out, _, stats) = standardize(&train, &[]).unwrap();
        let refit = Standardizer::fit(&out);
        for ch in 0..2 {
            assert!(refit.mean[ch].abs() < 1e-6);
            assert!((refit.std[ch] - 1.0).abs() < 1e-6);
        }
        assert_eq!(stats.mean.len(), 2);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let set = LabeledWindowSet::new(vec![4.0; 10], vec![0, 1], 1, 5, meta(1, 2)).unwrap();
        let (out, _, stats) = standardize(&set, &[]).unwrap();
        assert_eq!(stats.std[0], MIN_STD);
        assert!(out.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn other_sets_use_train_statistics() {
        let train = set_with_offset(20, 0.0);
        let test = set_with_offset(20, 10.0);
        let (_, rest, stats) = standardize(&train, &[&test]).unwrap();
        let own = Standardizer::fit(&rest[0]);
        // the test set is shifted by 10 raw units, i.e. 10/std standardized units
        for ch in 0..2 {
            assert!((own.mean[ch] - 10.0 / stats.std[ch]).abs() < 1e-5);
        }
    }

    #[test]
    fn stratified_split_partitions_every_class() {
        let set = set_with_offset(40, 0.0);
        let (tr, va, te) = set.split(0.7, 0.15, 3).unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), 40);
        assert_eq!(tr.class_counts(), vec![14, 14]);
        assert_eq!(va.class_counts(), vec![3, 3]);
        assert_eq!(te.class_counts(), vec![3, 3]);
        let (tr2, _, _) = set.split(0.7, 0.15, 3).unwrap();
        assert_eq!(tr, tr2);
    }
}
