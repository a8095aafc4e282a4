//! The `mhnn` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_binary, load_csv, save_binary, synth_generate, CsvFormat, CsvSchema, LabeledWindowSet, Perturbation,
    PerturbationSpec, Standardizer,
};
use crate::error::{at_path, Error, Result};
use crate::harness::{
    evaluate, prepare_data, sweep_ablation, sweep_missing, sweep_noise, sweep_sensitivity, train, write_sweep_csv,
    EvaluationReport, ExperimentConfig, History, SweepRow, TrainConfig,
};
use crate::model::Model;
use crate::nn::Checkpoint;
use crate::tensor::Real;
use crate::wavelet::{haar_filters, mdwd, Matrix};

#[derive(Debug, Parser)]
#[command(name = "mhnn", version, about = "Wavelet multi-branch networks for sensor activity recognition")]
struct Cli {
    /// Seed for every random choice (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with `model`, `train` and `sweep` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Arithmetic width, 32 or 64 (overrides the config file).
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<u32>,
    /// Monitor the test part for early stopping instead of the validation part.
    #[arg(long, global = true)]
    paper_protocol: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a class-separable synthetic window set.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n_per_class: usize,
        #[arg(long, default_value_t = 6)]
        channels: usize,
        #[arg(long, default_value_t = 64)]
        window: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Convert a CSV recording into a window-set file.
    Import {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Wide)]
        format: FormatArg,
        /// Window width in steps (long format).
        #[arg(long)]
        window: Option<usize>,
        /// Overlap fraction between consecutive windows (long format).
        #[arg(long, default_value_t = 0.0)]
        overlap: f64,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 50.0)]
        sample_rate: f64,
    },
    /// Write the wavelet components of one window as CSV files, one row per channel.
    Decompose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Train a model; writes the checkpoint and a history JSON.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// History path; `history.json` next to the checkpoint by default.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, optionally under a perturbation such as
    /// `noise:-10`, `mask_fixed:0.3` or `mask_random:0.3`.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, allow_hyphen_values = true, value_parser = parse_perturbation)]
        perturb: Option<Perturbation>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment grid and write one CSV row per cell.
    Sweep {
        #[arg(value_enum)]
        kind: SweepArg,
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint (noise and missing sweeps).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a sweep CSV or an evaluation JSON as a Markdown table.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Wide,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepArg {
    Noise,
    Missing,
    Ablation,
    Sensitivity,
}

fn parse_precision(s: &str) -> std::result::Result<u32, String> {
    match s {
        "32" => Ok(32),
        "64" => Ok(64),
        _ => Err(format!("precision must be 32 or 64, got {s}")),
    }
}

fn parse_perturbation(s: &str) -> std::result::Result<Perturbation, String> {
    let (kind, value) = s.split_once(':').ok_or_else(|| format!("expected <kind>:<value>, got {s:?}"))?;
    let v: f64 = value.parse().map_err(|_| format!("{value:?} is not a number"))?;
    match kind {
        "noise" => Ok(Perturbation::Noise { snr_db: v }),
        "mask_fixed" => Ok(Perturbation::MaskFixed { ratio: v }),
        "mask_random" => Ok(Perturbation::MaskRandom { ratio: v }),
        _ => Err(format!("unknown perturbation kind {kind:?}")),
    }
}

/// Training context stored in the checkpoint so evaluation can rebuild the split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub train: TrainConfig,
    pub standardizer: Standardizer,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

struct Context {
    experiment: ExperimentConfig,
    seed: u64,
}

impl Context {
    fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.experiment.train.clone() }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut experiment = match &cli.config {
        Some(path) => ExperimentConfig::from_json(&fs::read_to_string(path).map_err(at_path(path))?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = cli.precision {
        experiment.train.precision = p;
    }
    if cli.paper_protocol {
        experiment.train.paper_protocol = true;
    }
    let seed = cli.seed.unwrap_or(experiment.train.seed);
    let ctx = Context { experiment, seed };
    match cli.command {
        Command::Synth { out, n_per_class, channels, window, classes } => {
            save_binary(&synth_generate(n_per_class, channels, window, classes, ctx.seed)?, out)
        }
        Command::Import { input, out, format, window, overlap, classes, sample_rate } => {
            let schema = CsvSchema {
                format: match format {
                    FormatArg::Wide => CsvFormat::Wide,
                    FormatArg::Long => CsvFormat::Long,
                },
                classes,
                class_names: None,
                sample_rate_hz: sample_rate,
                window,
                overlap,
            };
            let set = load_csv(input, &schema)?;
            eprintln!("imported {} windows of {}x{}", set.len(), set.channels(), set.length());
            save_binary(&set, out)
        }
        Command::Decompose { data, out_dir, index, levels } => decompose(&data, &out_dir, index, levels),
        Command::Train { data, out, history } => {
            let history_path = history.unwrap_or_else(|| out.with_file_name("history.json"));
            match ctx.experiment.train.precision {
                64 => train_command::<f64>(&ctx, &data, &out, &history_path),
                _ => train_command::<f32>(&ctx, &data, &out, &history_path),
            }
        }
        Command::Eval { model, data, split, perturb, out } => {
            let checkpoint = Checkpoint::load(&model)?;
            let report = match precision_for(&cli.precision, &checkpoint) {
                64 => eval_command::<f64>(&ctx, &checkpoint, &data, split, perturb)?,
                _ => eval_command::<f32>(&ctx, &checkpoint, &data, split, perturb)?,
            };
            emit(out.as_deref(), &json_bytes(&report)?)
        }
        Command::Sweep { kind, data, model, ratios, snr, split, out } => {
            let mut ctx = ctx;
            if let Some(r) = ratios {
                ctx.experiment.sweep.mask_ratios = r;
            }
            if let Some(s) = snr {
                ctx.experiment.sweep.snr_levels = s;
            }
            ctx.experiment.sweep.validate()?;
            let rows = sweep_command(&ctx, kind, &data, model.as_deref(), split, &cli.precision)?;
            let mut bytes = Vec::new();
            write_sweep_csv(&rows, &mut bytes)?;
            emit(out.as_deref(), &bytes)
        }
        Command::Report { input, out } => emit(out.as_deref(), render_report(&input)?.as_bytes()),
    }
}

fn precision_for(flag: &Option<u32>, checkpoint: &Checkpoint) -> u32 {
    flag.unwrap_or(checkpoint.header.precision)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => std::io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn write_matrix(path: &Path, m: &Matrix<f64>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..m.rows() {
        writer.write_record(m.row(r).iter().map(|v| format!("{v:e}")))?;
    }
    writer.flush()?;
    Ok(())
}

fn decompose(data: &Path, out_dir: &Path, index: usize, levels: usize) -> Result<()> {
    let set = load_binary(data)?;
    if index >= set.len() {
        return Err(Error::InvalidArgument(format!("window index {index} out of range for {} windows", set.len())));
    }
    let x = Matrix::new(set.channels(), set.length(), set.window(index).iter().map(|&v| v as f64).collect())?;
    let pyramid = mdwd(&x, &haar_filters(), levels)?;
    fs::create_dir_all(out_dir)?;
    write_matrix(&out_dir.join("X.csv"), &pyramid.x)?;
    for (i, d) in pyramid.details.iter().enumerate() {
        write_matrix(&out_dir.join(format!("H{}.csv", i + 1)), d)?;
    }
    write_matrix(&out_dir.join(format!("L{levels}.csv")), &pyramid.approx)
}

fn train_command<T: Real>(ctx: &Context, data: &Path, out: &Path, history_path: &Path) -> Result<()> {
    let set = load_binary(data)?;
    let tc = ctx.train_config();
    let model_config = ctx.experiment.model.resolve(&set)?;
    let prepared = prepare_data(&set, &tc)?;
    let mut outcome = train::<T>(&model_config, &prepared.train, prepared.monitor(&tc), &tc)?;
    let test = evaluate(&mut outcome.model, &prepared.test, None, tc.batch_size)?;
    let record = TrainingRecord {
        train: tc,
        standardizer: prepared.standardizer,
        best_epoch: outcome.history.best_epoch,
        best_val_accuracy: outcome.history.best_val_accuracy,
    };
    outcome.model.to_checkpoint(serde_json::to_value(&record)?)?.save(out)?;
    fs::write(history_path, json_bytes(&outcome.history)?)?;
    eprintln!(
        "best epoch {} of {}: validation accuracy {:.4}, test accuracy {:.4}",
        outcome.history.best_epoch,
        outcome.history.epochs.len(),
        outcome.history.best_val_accuracy,
        test.metrics.accuracy
    );
    Ok(())
}

fn training_record(checkpoint: &Checkpoint) -> Result<TrainingRecord> {
    serde_json::from_value(checkpoint.header.extra.clone())
        .map_err(|e| Error::Format(format!("checkpoint carries no training record: {e}")))
}

/// The requested part of `data`, standardized as during training.
fn evaluation_set(checkpoint: &Checkpoint, data: &Path, split: SplitArg) -> Result<LabeledWindowSet> {
    let record = training_record(checkpoint)?;
    let set = load_binary(data)?;
    if split == SplitArg::All {
        return record.standardizer.apply(&set);
    }
    let prepared = prepare_data(&set, &record.train)?;
    Ok(match split {
        SplitArg::Train => prepared.train,
        SplitArg::Val => prepared.val,
        _ => prepared.test,
    })
}

fn eval_command<T: Real>(
    ctx: &Context,
    checkpoint: &Checkpoint,
    data: &Path,
    split: SplitArg,
    perturb: Option<Perturbation>,
) -> Result<EvaluationReport> {
    let mut model = Model::<T>::from_checkpoint(checkpoint)?;
    let set = evaluation_set(checkpoint, data, split)?;
    let spec = perturb.map(|perturbation| PerturbationSpec { perturbation, seed: ctx.seed });
    evaluate(&mut model, &set, spec.as_ref(), ctx.experiment.train.batch_size)
}

fn sweep_command(
    ctx: &Context,
    kind: SweepArg,
    data: &Path,
    model: Option<&Path>,
    split: SplitArg,
    precision: &Option<u32>,
) -> Result<Vec<SweepRow>> {
    let spec = &ctx.experiment.sweep;
    match kind {
        SweepArg::Noise | SweepArg::Missing => {
            let path = model.ok_or_else(|| Error::InvalidArgument("noise and missing sweeps need --model".into()))?;
            let checkpoint = Checkpoint::load(path)?;
            let set = evaluation_set(&checkpoint, data, split)?;
            let batch = ctx.experiment.train.batch_size;
            fn run<T: Real>(
                checkpoint: &Checkpoint,
                set: &LabeledWindowSet,
                noise: bool,
                spec: &crate::harness::SweepSpec,
                seed: u64,
                batch: usize,
            ) -> Result<Vec<SweepRow>> {
                let mut m = Model::<T>::from_checkpoint(checkpoint)?;
                if noise {
                    sweep_noise(&mut m, set, spec, seed, batch)
                } else {
                    sweep_missing(&mut m, set, spec, seed, batch)
                }
            }
            let noise = matches!(kind, SweepArg::Noise);
            match precision_for(precision, &checkpoint) {
                64 => run::<f64>(&checkpoint, &set, noise, spec, ctx.seed, batch),
                _ => run::<f32>(&checkpoint, &set, noise, spec, ctx.seed, batch),
            }
        }
        SweepArg::Ablation | SweepArg::Sensitivity => {
            let set = load_binary(data)?;
            let tc = ctx.train_config();
            let base = ctx.experiment.model.resolve(&set)?;
            let prepared = prepare_data(&set, &tc)?;
            if matches!(kind, SweepArg::Ablation) {
                sweep_ablation(&base, &prepared, spec, &tc)
            } else {
                sweep_sensitivity(&base, &prepared, spec, &tc)
            }
        }
    }
}

fn render_report(input: &Path) -> Result<String> {
    let text = fs::read_to_string(input).map_err(at_path(input))?;
    let mut out = String::new();
    if let Ok(report) = serde_json::from_str::<EvaluationReport>(&text) {
        let m = &report.metrics;
        out.push_str(&format!(
            "{} L{} {} on {} windows",
            report.variant.name(),
            report.levels,
            report.last_level_mode.name(),
            report.samples
        ));
        if let Some(p) = report.perturbation {
            out.push_str(&format!(", {} {}", p.perturbation.kind(), p.perturbation.param()));
        }
        out.push_str("\n\n| metric | value |\n|---|---|\n");
        for (name, v) in [
            ("accuracy", m.accuracy),
            ("macro precision", m.macro_precision),
            ("macro recall", m.macro_recall),
            ("macro F1", m.macro_f1),
        ] {
            out.push_str(&format!("| {name} | {:.2}% |\n", 100.0 * v));
        }
        out.push_str("\n| class | precision | recall | F1 | support |\n|---|---|---|---|---|\n");
        for (k, c) in m.per_class.iter().enumerate() {
            let flag = if c.undefined { " *" } else { "" };
            out.push_str(&format!(
                "| {k}{flag} | {:.2}% | {:.2}% | {:.2}% | {} |\n",
                100.0 * c.precision,
                100.0 * c.recall,
                100.0 * c.f1,
                c.support
            ));
        }
        return Ok(out);
    }
    if let Ok(history) = serde_json::from_str::<History>(&text) {
        out.push_str("| epoch | train loss | train acc | val loss | val acc |\n|---|---|---|---|---|\n");
        for e in &history.epochs {
            let mark = if e.epoch == history.best_epoch { " (best)" } else { "" };
            out.push_str(&format!(
                "| {}{mark} | {:.4} | {:.2}% | {:.4} | {:.2}% |\n",
                e.epoch,
                e.train_loss,
                100.0 * e.train_accuracy,
                e.val_loss,
                100.0 * e.val_accuracy
            ));
        }
        return Ok(out);
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    out.push_str("| cell | variant | levels | mode | perturbation | accuracy | precision | recall | F1 |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for row in reader.deserialize::<SweepRow>() {
        let r = row?;
        let perturb = match r.param {
            Some(p) => format!("{} {p}", r.perturb_kind),
            None => r.perturb_kind.clone(),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {perturb} | {:.2}% | {:.2}% | {:.2}% | {:.2}% |\n",
            r.cell,
            r.variant.name(),
            r.levels,
            r.last_level_mode.name(),
            r.accuracy_pct,
            r.precision_pct,
            r.recall_pct,
            r.f1_pct
        ));
    }
    Ok(out)
}
