//! Training with early stopping, evaluation under perturbations, experiment
//! sweeps and the JSON configuration shared by the command line.

pub mod sweep;
pub mod train;

pub use sweep::{
    sweep_ablation, sweep_missing, sweep_noise, sweep_sensitivity, write_sweep_csv, MaskKind, SweepKind, SweepRow,
    SweepSpec,
};
pub use train::{
    check_shape, eval_loss_accuracy, prepare_data, train, EpochRecord, History, PreparedData, TrainConfig, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::data::{LabeledWindowSet, PerturbationSpec};
use crate::error::Result;
use crate::metrics::{confusion, MetricsReport};
use crate::model::{LastLevelMode, MhnnConfig, Model, Variant};
use crate::tensor::Real;

/// Metrics of one evaluation plus the coordinates it was run at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub samples: usize,
    pub variant: Variant,
    pub levels: usize,
    pub last_level_mode: LastLevelMode,
    pub perturbation: Option<PerturbationSpec>,
}

/// Eval-mode metrics of `model` on `set`, after applying `perturbation` to a copy.
pub fn evaluate<T: Real>(
    model: &mut Model<T>,
    set: &LabeledWindowSet,
    perturbation: Option<&PerturbationSpec>,
    batch_size: usize,
) -> Result<EvaluationReport> {
    check_shape(model.config(), set)?;
    let perturbed;
    let input = match perturbation {
        Some(p) => {
            perturbed = p.apply(set)?;
            &perturbed
        }
        None => set,
    };
    let preds = model.predict(&input.to_tensor::<T>()?, batch_size)?;
    let cm = confusion(&preds, input.labels(), model.config().classes)?;
    let config = model.config();
    Ok(EvaluationReport {
        metrics: MetricsReport::from_confusion(&cm, false)?,
        samples: set.len(),
        variant: config.variant,
        levels: config.levels,
        last_level_mode: config.last_level_mode,
        perturbation: perturbation.copied(),
    })
}

fn default_levels() -> usize {
    3
}
fn default_filters() -> usize {
    128
}
fn default_agg_kernels() -> Vec<usize> {
    vec![7, 5, 3]
}
fn default_dropout() -> f64 {
    0.2
}
fn default_leaky_slope() -> f64 {
    0.01
}
fn default_bn_momentum() -> f64 {
    0.1
}

/// Architecture settings whose data dimensions may be left to the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    #[serde(default)]
    pub channels: Option<usize>,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub last_level_mode: LastLevelMode,
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default = "default_agg_kernels")]
    pub agg_kernels: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub common_length: Option<usize>,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl ModelSettings {
    /// Full configuration for `set`; explicit dimensions must agree with it.
    pub fn resolve(&self, set: &LabeledWindowSet) -> Result<MhnnConfig> {
        let pick = |given: Option<usize>, actual: usize, what: &str| match given {
            Some(v) if v != actual => {
                Err(crate::Error::InvalidConfig(format!("{what} is {v} in the config but {actual} in the data")))
            }
            _ => Ok(actual),
        };
        let config = MhnnConfig {
            channels: pick(self.channels, set.channels(), "channels")?,
            window: pick(self.window, set.length(), "window")?,
            classes: pick(self.classes, set.classes(), "classes")?,
            levels: self.levels,
            variant: self.variant,
            last_level_mode: self.last_level_mode,
            filters: self.filters,
            agg_kernels: self.agg_kernels.clone(),
            dropout: self.dropout,
            leaky_slope: self.leaky_slope,
            common_length: self.common_length,
            bn_momentum: self.bn_momentum,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.train.validate()?;
        config.sweep.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Perturbation};
    use rand::SeedableRng;

    fn tiny_model(set: &LabeledWindowSet) -> Model<f32> {
        let mut settings = ModelSettings { levels: 2, filters: 4, ..Default::default() };
        settings.dropout = 0.0;
        let cfg = settings.resolve(set).unwrap();
        Model::build(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn mask_ratio_zero_matches_clean() {
        let set = synth_generate(4, 3, 16, 2, 1).unwrap();
        let mut model = tiny_model(&set);
        let clean = evaluate(&mut model, &set, None, 8).unwrap();
        let spec = PerturbationSpec { perturbation: Perturbation::MaskFixed { ratio: 0.0 }, seed: 3 };
        let masked = evaluate(&mut model, &set, Some(&spec), 8).unwrap();
        assert_eq!(clean.metrics, masked.metrics);
    }

    #[test]
    fn evaluation_leaves_the_set_untouched() {
        let set = synth_generate(4, 3, 16, 2, 1).unwrap();
        let before = set.clone();
        let mut model = tiny_model(&set);
        let spec = PerturbationSpec { perturbation: Perturbation::Noise { snr_db: 0.0 }, seed: 3 };
        evaluate(&mut model, &set, Some(&spec), 8).unwrap();
        assert_eq!(set, before);
    }

    #[test]
    fn config_file_defaults_and_unknown_keys() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.model.filters, 128);
        assert_eq!(c.sweep.snr_levels, vec![-20.0, -10.0, -5.0, 0.0, 5.0, 10.0, 20.0]);
        assert!(ExperimentConfig::from_json(r#"{"train":{"batchsize":3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"extra":1}"#).is_err());
    }

    #[test]
    fn explicit_dimensions_must_match_data() {
        let set = synth_generate(2, 3, 16, 2, 1).unwrap();
        let settings = ModelSettings { channels: Some(4), ..Default::default() };
        assert!(settings.resolve(&set).is_err());
    }
}
