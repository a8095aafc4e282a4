//! C ABI over the `mhnn` library.
//!
//! Every function returns an [`MhnnStatus`]; on failure a description is
//! available from [`mhnn_last_error`] on the same thread. Models and datasets
//! are opaque handles released with their `_free` function. Output buffers are
//! owned by the caller and their lengths are checked.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mhnn::data::{load_binary, save_binary, synth_generate, LabeledWindowSet, SetMetadata, Standardizer};
use mhnn::harness::evaluate;
use mhnn::model::Model;
use mhnn::nn::Checkpoint;
use mhnn::wavelet::{haar_filters, mdwd, reconstruct, Matrix, WaveletPyramid};
use mhnn::{Error, Tensor};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MhnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Runtime = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A trained model plus the normalization statistics stored with it.
pub struct MhnnModel {
    model: Model<f32>,
    standardizer: Option<Standardizer>,
}

/// A labeled window set.
pub struct MhnnDataset {
    set: LabeledWindowSet,
}

struct Failure {
    status: MhnnStatus,
    message: String,
}

impl Failure {
    fn new(status: MhnnStatus, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => MhnnStatus::Io,
            Error::Format(_) | Error::Json(_) | Error::Csv(_) | Error::Parse { .. } => MhnnStatus::Format,
            Error::Shape(_) | Error::WindowTooShort { .. } | Error::InconsistentPyramid(_) => MhnnStatus::ShapeMismatch,
            Error::InvalidArgument(_) | Error::InvalidConfig(_) | Error::EmptyInput | Error::NotOneHot(_) => {
                MhnnStatus::InvalidArgument
            }
            _ => MhnnStatus::Runtime,
        };
        Self::new(status, e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn guard(body: impl FnOnce() -> FfiResult) -> MhnnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            MhnnStatus::Ok
        }
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(_) => {
            set_last_error("panic inside mhnn");
            MhnnStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> FfiResult<PathBuf> {
    if path.is_null() {
        return Err(Failure::new(MhnnStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure::new(MhnnStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> FfiResult<&'a T> {
    ptr.as_ref().ok_or_else(|| Failure::new(MhnnStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(ptr: *mut T, what: &str) -> FfiResult<&'a mut T> {
    ptr.as_mut().ok_or_else(|| Failure::new(MhnnStatus::NullPointer, format!("{what} is null")))
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::new(MhnnStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, needed: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if ptr.is_null() {
        return Err(Failure::new(MhnnStatus::NullPointer, format!("{what} is null")));
    }
    if len < needed {
        return Err(Failure::new(MhnnStatus::BufferTooSmall, format!("{what} holds {len} values, {needed} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, needed))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> FfiResult {
    if out.is_null() {
        return Err(Failure::new(MhnnStatus::NullPointer, "output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write_opt<T>(ptr: *mut T, value: T) {
    if !ptr.is_null() {
        *ptr = value;
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mhnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn mhnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads an `MHWS` window-set file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mhnn_dataset_load(path: *const c_char, out: *mut *mut MhnnDataset) -> MhnnStatus {
    guard(|| {
        let set = load_binary(path_arg(path)?)?;
        store(out, MhnnDataset { set })
    })
}

/// Generates the synthetic sinusoid window set.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mhnn_dataset_synth(
    n_per_class: usize,
    channels: usize,
    length: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut MhnnDataset,
) -> MhnnStatus {
    guard(|| {
        let set = synth_generate(n_per_class, channels, length, classes, seed)?;
        store(out, MhnnDataset { set })
    })
}

/// Builds a dataset from `n × channels × length` samples and `n` labels.
/// Channels and classes get generic names.
///
/// # Safety
/// `windows` must hold `n · channels · length` floats, `labels` `n` values and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mhnn_dataset_from_buffers(
    windows: *const f32,
    labels: *const u32,
    n: usize,
    channels: usize,
    length: usize,
    classes: usize,
    sample_rate_hz: f64,
    out: *mut *mut MhnnDataset,
) -> MhnnStatus {
    guard(|| {
        let count = n
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(length))
            .ok_or_else(|| Failure::new(MhnnStatus::InvalidArgument, "dimensions overflow"))?;
        let samples = input(windows, count, "windows")?.to_vec();
        let labels = input(labels, n, "labels")?.iter().map(|&l| l as usize).collect();
        let meta = SetMetadata {
            channel_names: (0..channels).map(|c| format!("ch{c}")).collect(),
            class_names: (0..classes).map(|k| format!("class{k}")).collect(),
            sample_rate_hz,
        };
        let set = LabeledWindowSet::new(samples, labels, channels, length, meta)?;
        store(out, MhnnDataset { set })
    })
}

/// Writes a dataset in the `MHWS` format.
///
/// # Safety
/// `dataset` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mhnn_dataset_save(dataset: *const MhnnDataset, path: *const c_char) -> MhnnStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        Ok(save_binary(&ds.set, path_arg(path)?)?)
    })
}

/// Window count, channels, window length and class count. Null outputs are skipped.
///
/// # Safety
/// `dataset` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mhnn_dataset_shape(
    dataset: *const MhnnDataset,
    n: *mut usize,
    channels: *mut usize,
    length: *mut usize,
    classes: *mut usize,
) -> MhnnStatus {
    guard(|| {
        let set = &handle(dataset, "dataset")?.set;
        write_opt(n, set.len());
        write_opt(channels, set.channels());
        write_opt(length, set.length());
        write_opt(classes, set.classes());
        Ok(())
    })
}

/// Copies the `n × channels × length` samples into `out`.
///
/// # Safety
/// `dataset` must be a live handle and `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mhnn_dataset_windows(
    dataset: *const MhnnDataset,
    out: *mut f32,
    out_len: usize,
) -> MhnnStatus {
    guard(|| {
        let set = &handle(dataset, "dataset")?.set;
        output(out, out_len, set.samples().len(), "out")?.copy_from_slice(set.samples());
        Ok(())
    })
}

/// Copies the labels into `out`.
///
/// # Safety
/// `dataset` must be a live handle and `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn mhnn_dataset_labels(dataset: *const MhnnDataset, out: *mut u32, out_len: usize) -> MhnnStatus {
    guard(|| {
        let set = &handle(dataset, "dataset")?.set;
        for (o, &l) in output(out, out_len, set.len(), "out")?.iter_mut().zip(set.labels()) {
            *o = l as u32;
        }
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mhnn_dataset_free(dataset: *mut MhnnDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Loads a checkpoint written by `mhnn train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mhnn_model_load(path: *const c_char, out: *mut *mut MhnnModel) -> MhnnStatus {
    guard(|| {
        let checkpoint = Checkpoint::load(&path_arg(path)?)?;
        let model = Model::<f32>::from_checkpoint(&checkpoint)?;
        let standardizer = match checkpoint.header.extra.get("standardizer") {
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| Failure::new(MhnnStatus::Format, format!("bad normalization statistics: {e}")))?,
            ),
            None => None,
        };
        store(out, MhnnModel { model, standardizer })
    })
}

/// Input channels, window length and class count. Null outputs are skipped.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mhnn_model_shape(
    model: *const MhnnModel,
    channels: *mut usize,
    length: *mut usize,
    classes: *mut usize,
) -> MhnnStatus {
    guard(|| {
        let config = handle(model, "model")?.model.config();
        write_opt(channels, config.channels);
        write_opt(length, config.window);
        write_opt(classes, config.classes);
        Ok(())
    })
}

fn standardized(m: &MhnnModel, set: &LabeledWindowSet) -> FfiResult<LabeledWindowSet> {
    Ok(match &m.standardizer {
        Some(s) => s.apply(set)?,
        None => set.clone(),
    })
}

unsafe fn probabilities(m: &mut MhnnModel, windows: *const f32, n: usize) -> FfiResult<Tensor<f32>> {
    let config = m.model.config().clone();
    let per = config.channels * config.window;
    let raw = input(windows, n.saturating_mul(per), "windows")?;
    if n == 0 {
        return Err(Failure::new(MhnnStatus::InvalidArgument, "no windows"));
    }
    let mut data = raw.to_vec();
    if let Some(s) = &m.standardizer {
        for (i, v) in data.iter_mut().enumerate() {
            let ch = (i / config.window) % config.channels;
            *v = ((*v as f64 - s.mean[ch]) / s.std[ch]) as f32;
        }
    }
    let x = Tensor::new(&[n, config.channels, config.window], data)?;
    Ok(m.model.predict_proba(&x, 128)?)
}

/// Class probabilities for `n` raw windows of `channels × length` samples,
/// normalized with the statistics stored in the checkpoint. Writes `n × classes`
/// values to `out`.
///
/// # Safety
/// `model` must be a live handle, `windows` must hold `n · channels · length`
/// floats and `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mhnn_model_predict_proba(
    model: *mut MhnnModel,
    windows: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> MhnnStatus {
    guard(|| {
        let m = handle_mut(model, "model")?;
        let k = m.model.config().classes;
        let dst = output(out, out_len, n.saturating_mul(k), "out")?;
        dst.copy_from_slice(probabilities(m, windows, n)?.data());
        Ok(())
    })
}

/// Predicted class of each of `n` raw windows.
///
/// # Safety
/// As for [`mhnn_model_predict_proba`]; `labels` must hold `labels_len` values.
#[no_mangle]
pub unsafe extern "C" fn mhnn_model_predict(
    model: *mut MhnnModel,
    windows: *const f32,
    n: usize,
    labels: *mut u32,
    labels_len: usize,
) -> MhnnStatus {
    guard(|| {
        let m = handle_mut(model, "model")?;
        let k = m.model.config().classes;
        let dst = output(labels, labels_len, n, "labels")?;
        let probs = probabilities(m, windows, n)?;
        for (o, row) in dst.iter_mut().zip(probs.data().chunks(k)) {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            *o = best as u32;
        }
        Ok(())
    })
}

/// Accuracy and macro F1 of the model on a raw dataset. Null outputs are skipped.
///
/// # Safety
/// `model` and `dataset` must be live handles; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mhnn_model_evaluate(
    model: *mut MhnnModel,
    dataset: *const MhnnDataset,
    accuracy: *mut f64,
    macro_f1: *mut f64,
) -> MhnnStatus {
    guard(|| {
        let m = handle_mut(model, "model")?;
        let set = standardized(m, &handle(dataset, "dataset")?.set)?;
        let report = evaluate(&mut m.model, &set, None, 128)?;
        write_opt(accuracy, report.metrics.accuracy);
        write_opt(macro_f1, report.metrics.macro_f1);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mhnn_model_free(model: *mut MhnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn component_lengths(length: usize, levels: usize) -> FfiResult<Vec<usize>> {
    if levels == 0 || levels >= usize::BITS as usize || length < (1usize << levels) {
        return Err(Error::WindowTooShort { len: length, levels }.into());
    }
    let mut lens = Vec::with_capacity(levels + 1);
    let mut len = length;
    for _ in 0..levels {
        len = len.div_ceil(2);
        lens.push(len);
    }
    lens.push(len);
    Ok(lens)
}

/// Lengths of the `levels` detail components (finest first) followed by the
/// approximation length, written to `lengths[0..=levels]`.
///
/// # Safety
/// `lengths` must hold `lengths_len` values.
#[no_mangle]
pub unsafe extern "C" fn mhnn_mdwd_lengths(
    length: usize,
    levels: usize,
    lengths: *mut usize,
    lengths_len: usize,
) -> MhnnStatus {
    guard(|| {
        let lens = component_lengths(length, levels)?;
        output(lengths, lengths_len, lens.len(), "lengths")?.copy_from_slice(&lens);
        Ok(())
    })
}

/// Haar decomposition of a `channels × length` signal. `out` receives the
/// detail components of levels 1..=levels and then the final approximation,
/// each `channels × len` row-major, back to back.
///
/// # Safety
/// `signal` must hold `channels · length` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn mhnn_mdwd(
    signal: *const f64,
    channels: usize,
    length: usize,
    levels: usize,
    out: *mut f64,
    out_len: usize,
) -> MhnnStatus {
    guard(|| {
        let lens = component_lengths(length, levels)?;
        let x = Matrix::new(channels, length, input(signal, channels.saturating_mul(length), "signal")?.to_vec())?;
        let pyramid = mdwd(&x, &haar_filters(), levels)?;
        let needed = channels * lens.iter().sum::<usize>();
        let dst = output(out, out_len, needed, "out")?;
        let mut pos = 0;
        for m in pyramid.details.iter().chain(std::iter::once(&pyramid.approx)) {
            dst[pos..pos + m.as_slice().len()].copy_from_slice(m.as_slice());
            pos += m.as_slice().len();
        }
        Ok(())
    })
}

/// Inverse of [`mhnn_mdwd`]: rebuilds the `channels × length` signal from
/// components laid out as `mhnn_mdwd` writes them.
///
/// # Safety
/// `components` must hold the `channels · Σ len` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn mhnn_reconstruct(
    components: *const f64,
    channels: usize,
    length: usize,
    levels: usize,
    out: *mut f64,
    out_len: usize,
) -> MhnnStatus {
    guard(|| {
        let lens = component_lengths(length, levels)?;
        let src = input(components, channels.saturating_mul(lens.iter().sum()), "components")?;
        let mut parts = Vec::with_capacity(lens.len());
        let mut pos = 0;
        for &len in &lens {
            parts.push(Matrix::new(channels, len, src[pos..pos + channels * len].to_vec())?);
            pos += channels * len;
        }
        let approx = parts.pop().expect("levels >= 1");
        let pyramid = WaveletPyramid { x: Matrix::zeros(channels, length), details: parts, approx };
        let signal = reconstruct(&pyramid, &haar_filters())?;
        output(out, out_len, channels * length, "out")?.copy_from_slice(signal.as_slice());
        Ok(())
    })
}
