use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, EvaluationReport, PreparedData, TrainConfig};
use crate::data::{derive_seed, LabeledWindowSet, Perturbation, PerturbationSpec};
use crate::error::{Error, Result};
use crate::model::{LastLevelMode, MhnnConfig, Model, Variant};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Fixed,
    Random,
}

impl MaskKind {
    pub fn perturbation(self, ratio: f64) -> Perturbation {
        match self {
            MaskKind::Fixed => Perturbation::MaskFixed { ratio },
            MaskKind::Random => Perturbation::MaskRandom { ratio },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Noise,
    Missing,
    Ablation,
    Sensitivity,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(SweepKind::Noise),
            "missing" => Ok(SweepKind::Missing),
            "ablation" => Ok(SweepKind::Ablation),
            "sensitivity" => Ok(SweepKind::Sensitivity),
            _ => Err(Error::InvalidArgument(format!("unknown sweep kind {s:?}"))),
        }
    }
}

fn default_snr_levels() -> Vec<f64> {
    vec![-20.0, -10.0, -5.0, 0.0, 5.0, 10.0, 20.0]
}
fn default_mask_ratios() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5]
}
fn default_mask_kinds() -> Vec<MaskKind> {
    vec![MaskKind::Fixed, MaskKind::Random]
}
fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn default_sensitivity_levels() -> Vec<usize> {
    vec![2, 3, 4]
}
fn default_sensitivity_modes() -> Vec<LastLevelMode> {
    LastLevelMode::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_snr_levels")]
    pub snr_levels: Vec<f64>,
    #[serde(default = "default_mask_ratios")]
    pub mask_ratios: Vec<f64>,
    #[serde(default = "default_mask_kinds")]
    pub mask_kinds: Vec<MaskKind>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_sensitivity_levels")]
    pub sensitivity_levels: Vec<usize>,
    #[serde(default = "default_sensitivity_modes")]
    pub sensitivity_modes: Vec<LastLevelMode>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            snr_levels: default_snr_levels(),
            mask_ratios: default_mask_ratios(),
            mask_kinds: default_mask_kinds(),
            variants: default_variants(),
            sensitivity_levels: default_sensitivity_levels(),
            sensitivity_modes: default_sensitivity_modes(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.snr_levels.is_empty()
            || self.mask_ratios.is_empty()
            || self.mask_kinds.is_empty()
            || self.variants.is_empty()
            || self.sensitivity_levels.is_empty()
            || self.sensitivity_modes.is_empty()
        {
            return fail("sweep lists must be nonempty");
        }
        if self.snr_levels.iter().any(|s| !s.is_finite()) {
            return fail("snr levels must be finite");
        }
        if self.mask_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return fail("mask ratios must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One line of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub variant: Variant,
    pub levels: usize,
    pub last_level_mode: LastLevelMode,
    pub perturb_kind: String,
    pub param: Option<f64>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub seed: u64,
    pub accuracy_pct: f64,
    pub precision_pct: f64,
    pub recall_pct: f64,
    pub f1_pct: f64,
}

impl SweepRow {
    pub fn new(cell: usize, report: &EvaluationReport, seed: u64) -> Self {
        let m = &report.metrics;
        let pct = |v: f64| (v * 1e4).round() / 100.0;
        Self {
            cell,
            variant: report.variant,
            levels: report.levels,
            last_level_mode: report.last_level_mode,
            perturb_kind: report.perturbation.map_or("none", |p| p.perturbation.kind()).to_string(),
            param: report.perturbation.map(|p| p.perturbation.param()),
            accuracy: m.accuracy,
            precision: m.macro_precision,
            recall: m.macro_recall,
            f1: m.macro_f1,
            seed,
            accuracy_pct: pct(m.accuracy),
            precision_pct: pct(m.macro_precision),
            recall_pct: pct(m.macro_recall),
            f1_pct: pct(m.macro_f1),
        }
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn perturbation_sweep<T: Real>(
    model: &mut Model<T>,
    test: &LabeledWindowSet,
    cells: &[Perturbation],
    seed: u64,
    batch_size: usize,
) -> Result<Vec<SweepRow>> {
    cells
        .iter()
        .enumerate()
        .map(|(cell, &perturbation)| {
            let spec = PerturbationSpec { perturbation, seed: derive_seed(seed, cell as u64) };
            let report = evaluate(model, test, Some(&spec), batch_size)?;
            Ok(SweepRow::new(cell, &report, seed))
        })
        .collect()
}

/// One row per SNR level, all evaluated with the same trained model.
pub fn sweep_noise<T: Real>(
    model: &mut Model<T>,
    test: &LabeledWindowSet,
    spec: &SweepSpec,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<SweepRow>> {
    let cells: Vec<Perturbation> = spec.snr_levels.iter().map(|&snr_db| Perturbation::Noise { snr_db }).collect();
    perturbation_sweep(model, test, &cells, seed, batch_size)
}

/// One row per mask kind and ratio, kinds outermost.
pub fn sweep_missing<T: Real>(
    model: &mut Model<T>,
    test: &LabeledWindowSet,
    spec: &SweepSpec,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<SweepRow>> {
    let cells: Vec<Perturbation> =
        spec.mask_kinds.iter().flat_map(|kind| spec.mask_ratios.iter().map(move |&r| kind.perturbation(r))).collect();
    perturbation_sweep(model, test, &cells, seed, batch_size)
}

/// Trains `config` on the prepared training part and reports on its test part.
pub fn train_and_test(
    config: &MhnnConfig,
    data: &PreparedData,
    train_config: &TrainConfig,
) -> Result<EvaluationReport> {
    fn run<T: Real>(config: &MhnnConfig, data: &PreparedData, tc: &TrainConfig) -> Result<EvaluationReport> {
        let mut outcome = train::<T>(config, &data.train, data.monitor(tc), tc)?;
        evaluate(&mut outcome.model, &data.test, None, tc.batch_size)
    }
    match train_config.precision {
        64 => run::<f64>(config, data, train_config),
        _ => run::<f32>(config, data, train_config),
    }
}

fn training_sweep(configs: &[MhnnConfig], data: &PreparedData, train_config: &TrainConfig) -> Result<Vec<SweepRow>> {
    configs
        .iter()
        .enumerate()
        .map(|(cell, config)| Ok(SweepRow::new(cell, &train_and_test(config, data, train_config)?, train_config.seed)))
        .collect()
}

/// One trained model per variant, all sharing the training seed.
pub fn sweep_ablation(
    base: &MhnnConfig,
    data: &PreparedData,
    spec: &SweepSpec,
    train_config: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let configs: Vec<MhnnConfig> =
        spec.variants.iter().map(|&variant| MhnnConfig { variant, ..base.clone() }).collect();
    training_sweep(&configs, data, train_config)
}

/// One trained model per decomposition depth and last-level mode.
pub fn sweep_sensitivity(
    base: &MhnnConfig,
    data: &PreparedData,
    spec: &SweepSpec,
    train_config: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let mut configs = Vec::new();
    for &levels in &spec.sensitivity_levels {
        for &last_level_mode in &spec.sensitivity_modes {
            let config = MhnnConfig { levels, last_level_mode, common_length: None, ..base.clone() };
            config.validate()?;
            configs.push(config);
        }
    }
    training_sweep(&configs, data, train_config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::harness::prepare_data;
    use rand::SeedableRng;

    #[test]
    fn missing_grid_has_ten_rows_and_fixed_header() {
        let set = synth_generate(4, 3, 16, 2, 1).unwrap();
        let mut cfg = MhnnConfig::new(3, 16, 2);
        cfg.levels = 2;
        cfg.filters = 4;
        let mut model = Model::<f32>::build(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let rows = sweep_missing(&mut model, &set, &SweepSpec::default(), 7, 16).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[0].perturb_kind, "mask_fixed");
        assert_eq!(rows[9].perturb_kind, "mask_random");
        let mut out = Vec::new();
        write_sweep_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with(
            "cell,variant,levels,last_level_mode,perturb_kind,param,accuracy,precision,recall,f1,seed,accuracy_pct,"
        ));
        assert_eq!(text.lines().count(), 11);
        assert_eq!(sweep_noise(&mut model, &set, &SweepSpec::default(), 7, 16).unwrap().len(), 7);
    }

    #[test]
    fn ablation_rows_follow_variants() {
        let set = synth_generate(10, 2, 16, 2, 1).unwrap();
        let tc = TrainConfig { max_epochs: 1, batch_size: 8, ..Default::default() };
        let data = prepare_data(&set, &tc).unwrap();
        let mut cfg = MhnnConfig::new(2, 16, 2);
        cfg.levels = 2;
        cfg.filters = 4;
        let rows = sweep_ablation(&cfg, &data, &SweepSpec::default(), &tc).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.variant.name()).collect();
        assert_eq!(names, ["Full", "NoMSE", "NoHFL", "NoCA"]);
        assert!(rows.iter().all(|r| r.perturb_kind == "none" && r.param.is_none()));
    }

    #[test]
    fn empty_lists_are_rejected() {
        let spec = SweepSpec { mask_ratios: vec![], ..Default::default() };
        assert!(spec.validate().is_err());
    }
}
