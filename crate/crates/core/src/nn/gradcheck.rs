use crate::error::Result;
use crate::nn::params::{ParamId, ParamStore};

/// Worst disagreement found between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements left out because a rectifier input changed sign within `±h`.
    pub skipped: usize,
}

pub const DEFAULT_ERROR_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, DEFAULT_ERROR_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients with central differences of step `h`.
///
/// `loss` must evaluate the loss for the current parameter values; when its
/// flag is `true` it must also back-propagate into a zeroed store. `stride`
/// checks every `stride`-th element of each parameter (1 checks all).
pub fn gradient_check<F>(store: &mut ParamStore<f64>, loss: F, h: f64, stride: usize) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
{
    gradient_check_with_floor(store, loss, h, stride, DEFAULT_ERROR_FLOOR)
}

/// [`gradient_check`] with a different denominator floor for the relative error.
pub fn gradient_check_with_floor<F>(
    store: &mut ParamStore<f64>,
    mut loss: F,
    h: f64,
    stride: usize,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
{
    gradient_check_piecewise(store, |s, with_grad| Ok((loss(s, with_grad)?, Vec::new())), h, stride, floor)
}

/// [`gradient_check_with_floor`] for losses that also return their
/// activation pattern (see [`Tape::activation_pattern`](crate::nn::Tape::activation_pattern)).
/// An element whose `+h` or `−h` pass changes the pattern straddles a kink,
/// where central differences are meaningless; it is counted in `skipped`.
pub fn gradient_check_piecewise<F>(
    store: &mut ParamStore<f64>,
    mut loss: F,
    h: f64,
    stride: usize,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<(f64, Vec<bool>)>,
{
    store.zero_grads();
    let (_, pattern) = loss(store, true)?;
    let ids: Vec<ParamId> = store.param_ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let p = store.param(id);
            p.grad().map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
        })
        .collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (&id, grad) in ids.iter().zip(&analytic) {
        for i in (0..grad.len()).step_by(stride.max(1)) {
            let orig = store.param(id).data()[i];
            store.param_mut(id).data_mut()[i] = orig + h;
            let (plus, plus_pattern) = loss(store, false)?;
            store.param_mut(id).data_mut()[i] = orig - h;
            let (minus, minus_pattern) = loss(store, false)?;
            store.param_mut(id).data_mut()[i] = orig;
            if plus_pattern != pattern || minus_pattern != pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error_with_floor(grad[i], numeric, floor);
            report.checked += 1;
            if err > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = err;
                report.worst_param = store.param_name(id).to_string();
                report.worst_index = i;
                report.analytic = grad[i];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
