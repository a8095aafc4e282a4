use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, LabeledWindowSet};
use crate::error::{Error, Result};
use crate::metrics::{confusion, precision_recall_f1};
use crate::model::{MhnnConfig, Model};
use crate::nn::{one_hot, AdamState, Mode, Tape, DEFAULT_LR};
use crate::tensor::Real;

/// Stream indices derived from the training seed.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

fn default_batch_size() -> usize {
    128
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_max_epochs() -> usize {
    300
}
fn default_patience() -> usize {
    20
}
fn default_split() -> f64 {
    0.15
}
fn default_precision() -> u32 {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of every class held out for early stopping.
    #[serde(default = "default_split")]
    pub eval_split: f64,
    /// Fraction of every class reserved for the final report.
    #[serde(default = "default_split")]
    pub test_split: f64,
    #[serde(default = "default_precision")]
    pub precision: u32,
    /// Monitor the test part each epoch instead of a separate validation part.
    #[serde(default)]
    pub paper_protocol: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            lr: default_lr(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
            eval_split: default_split(),
            test_split: default_split(),
            precision: default_precision(),
            paper_protocol: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be >= 1".into());
        }
        if !(self.eval_split > 0.0 && self.eval_split < 1.0) {
            return fail(format!("eval_split {} outside (0, 1)", self.eval_split));
        }
        if !(self.test_split > 0.0 && self.eval_split + self.test_split < 1.0) {
            return fail(format!("test_split {} leaves no training data", self.test_split));
        }
        if self.precision != 32 && self.precision != 64 {
            return fail(format!("precision must be 32 or 64, got {}", self.precision));
        }
        Ok(())
    }
}

/// Train / validation / test parts standardized with training statistics.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: LabeledWindowSet,
    pub val: LabeledWindowSet,
    pub test: LabeledWindowSet,
    pub standardizer: crate::data::Standardizer,
}

impl PreparedData {
    /// The set monitored for early stopping.
    pub fn monitor(&self, config: &TrainConfig) -> &LabeledWindowSet {
        if config.paper_protocol {
            &self.test
        } else {
            &self.val
        }
    }
}

/// Stratified split of `set` followed by standardization.
pub fn prepare_data(set: &LabeledWindowSet, config: &TrainConfig) -> Result<PreparedData> {
    config.validate()?;
    let train_frac = 1.0 - config.eval_split - config.test_split;
    let (train, val, test) = set.split(train_frac, config.eval_split, derive_seed(config.seed, SPLIT_STREAM))?;
    let (train, rest, standardizer) = crate::data::standardize(&train, &[&val, &test])?;
    let [val, test]: [LabeledWindowSet; 2] = rest.try_into().expect("two sets in, two out");
    Ok(PreparedData { train, val, test, standardizer })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the train-mode predictions made while fitting.
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub history: History,
}

/// Loss and accuracy of eval-mode predictions.
pub fn eval_loss_accuracy<T: Real>(
    model: &mut Model<T>,
    set: &LabeledWindowSet,
    batch_size: usize,
) -> Result<(f64, Vec<usize>)> {
    let probs = model.predict_proba(&set.to_tensor::<T>()?, batch_size)?;
    let k = model.config().classes;
    let targets = one_hot::<T>(set.labels(), k)?;
    let loss = crate::nn::tape::cross_entropy_value(probs.data(), targets.data(), set.len()).as_f64();
    let preds = probs.data().chunks(k).map(crate::model::argmax).collect();
    Ok((loss, preds))
}

/// Minibatches of a shuffled index list; a trailing batch of one window is
/// folded into the previous batch so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

fn first_non_finite_branch<T: Real>(model: &Model<T>, tape: &Tape<T>, trace: &crate::model::ForwardTrace) -> String {
    for (branch, out) in model.network.branches().iter().zip(&trace.branches) {
        if !tape.value(out.features).all_finite() {
            return branch.name.clone();
        }
    }
    if trace.aggregated.as_ref().is_some_and(|a| !tape.value(a.output).all_finite()) {
        return "cross aggregation".into();
    }
    "classifier".into()
}

/// Fits a freshly initialized model with Adam and early stopping on `val`,
/// returning the weights of the best validation epoch.
pub fn train<T: Real>(
    model_config: &MhnnConfig,
    train_set: &LabeledWindowSet,
    val_set: &LabeledWindowSet,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    model_config.validate()?;
    for set in [train_set, val_set] {
        check_shape(model_config, set)?;
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT_STREAM));
    let mut model = Model::<T>::build(model_config, &mut init_rng)?;
    let mut adam = AdamState::new(&model.params, config.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_STREAM));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, DROPOUT_STREAM));
    let k = model_config.classes;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        best_val_loss: f64::INFINITY,
    };
    let mut best = model.params.snapshot();
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in batches(&order, config.batch_size).into_iter().enumerate() {
            let x = train_set.batch_tensor::<T>(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels()[i]).collect();
            let targets = one_hot::<T>(&labels, k)?;
            let mut tape = Tape::new();
            let trace = model.forward(&mut tape, &x, Mode::Train, &mut dropout_rng)?;
            let loss_node = tape.softmax_cross_entropy(trace.logits, &targets)?;
            let loss = tape.value(loss_node).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    branch: first_non_finite_branch(&model, &tape, &trace),
                });
            }
            let probs = tape.value(trace.probs).data();
            correct += probs.chunks(k).zip(&labels).filter(|(p, &l)| crate::model::argmax(p) == l).count();
            loss_sum += loss * idx.len() as f64;
            model.params.zero_grads();
            tape.backward(loss_node, &mut model.params)?;
            adam.step(&mut model.params)?;
        }
        let (val_loss, preds) = eval_loss_accuracy(&mut model, val_set, config.batch_size)?;
        let cm = confusion(&preds, val_set.labels(), k)?;
        let val_accuracy = crate::metrics::accuracy(&cm)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss,
            val_accuracy,
            val_macro_f1: precision_recall_f1(&cm).macro_f1,
        });
        let improved = val_accuracy > history.best_val_accuracy;
        if improved || (val_accuracy == history.best_val_accuracy && val_loss < history.best_val_loss) {
            history.best_epoch = epoch;
            history.best_val_accuracy = val_accuracy;
            history.best_val_loss = val_loss;
            best = model.params.snapshot();
        }
        since_best = if improved { 0 } else { since_best + 1 };
        if since_best >= config.patience {
            break;
        }
    }
    model.params.zero_grads();
    model.params.restore(&best)?;
    Ok(TrainOutcome { model, history })
}

pub fn check_shape(config: &MhnnConfig, set: &LabeledWindowSet) -> Result<()> {
    if set.channels() != config.channels || set.length() != config.window || set.classes() != config.classes {
        return Err(Error::Shape(format!(
            "data is {} channels x {} steps with {} classes, model expects {} x {} with {}",
            set.channels(),
            set.length(),
            set.classes(),
            config.channels,
            config.window,
            config.classes
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn tiny() -> (MhnnConfig, LabeledWindowSet) {
        let mut cfg = MhnnConfig::new(2, 16, 2);
        cfg.levels = 2;
        cfg.filters = 4;
        (cfg, synth_generate(8, 2, 16, 2, 1).unwrap())
    }

    #[test]
    fn batches_fold_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order[..1], 4).len(), 1);
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let (cfg, set) = tiny();
        let tc = TrainConfig { patience: 0, batch_size: 8, ..Default::default() };
        let out = train::<f32>(&cfg, &set, &set, &tc).unwrap();
        assert_eq!(out.history.epochs.len(), 1);
        assert_eq!(out.history.best_epoch, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, set) = tiny();
        let tc = TrainConfig { max_epochs: 3, batch_size: 5, seed: 4, ..Default::default() };
        let a = train::<f32>(&cfg, &set, &set, &tc).unwrap();
        let b = train::<f32>(&cfg, &set, &set, &tc).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params.snapshot(), b.model.params.snapshot());
    }

    #[test]
    fn best_epoch_weights_are_restored() {
        let (cfg, set) = tiny();
        let tc = TrainConfig { max_epochs: 6, batch_size: 4, seed: 2, ..Default::default() };
        let mut out = train::<f64>(&cfg, &set, &set, &tc).unwrap();
        let (loss, preds) = eval_loss_accuracy(&mut out.model, &set, 64).unwrap();
        let acc = preds.iter().zip(set.labels()).filter(|(p, l)| p == l).count() as f64 / set.len() as f64;
        assert_eq!(acc, out.history.best_val_accuracy);
        assert!((loss - out.history.best_val_loss).abs() < 1e-12);
        let last = out.history.epochs.last().unwrap().val_accuracy;
        assert!(out.history.best_val_accuracy >= last);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut cfg, set) = tiny();
        cfg.channels = 3;
        assert!(matches!(train::<f32>(&cfg, &set, &set, &TrainConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn prepared_parts_are_disjoint_and_standardized() {
        let set = synth_generate(20, 2, 16, 2, 1).unwrap();
        let p = prepare_data(&set, &TrainConfig::default()).unwrap();
        assert_eq!(p.train.len() + p.val.len() + p.test.len(), 40);
        assert_eq!(p.train.class_counts(), vec![14, 14]);
        let refit = crate::data::Standardizer::fit(&p.train);
        assert!(refit.mean.iter().all(|m| m.abs() < 1e-6));
    }
}
