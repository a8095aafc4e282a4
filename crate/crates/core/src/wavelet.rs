//! Multilevel discrete wavelet decomposition of multichannel windows.
//!
//! Each decomposition step is a stride-2 correlation of the signal with a
//! low-pass and a high-pass filter, so every level halves the temporal
//! resolution. The low-pass output is decomposed again at the next level.
//! Channels are processed independently.

use num_traits::Float;

use crate::error::{Error, Result};

/// Analysis filter pair of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPair<F> {
    lowpass: Vec<F>,
    highpass: Vec<F>,
}

impl<F: Float> FilterPair<F> {
    pub fn new(lowpass: Vec<F>, highpass: Vec<F>) -> Result<Self> {
        if lowpass.len() != highpass.len() || lowpass.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "filter pair needs equal lengths >= 2, got {} and {}",
                lowpass.len(),
                highpass.len()
            )));
        }
        Ok(Self { lowpass, highpass })
    }

    pub fn lowpass(&self) -> &[F] {
        &self.lowpass
    }

    pub fn highpass(&self) -> &[F] {
        &self.highpass
    }

    pub fn taps(&self) -> usize {
        self.lowpass.len()
    }
}

/// Orthonormal Haar pair: `(1/√2, 1/√2)` and `(1/√2, −1/√2)`.
pub fn haar_filters<F: Float>() -> FilterPair<F> {
    let h = F::from(std::f64::consts::FRAC_1_SQRT_2).unwrap();
    FilterPair { lowpass: vec![h, h], highpass: vec![h, -h] }
}

/// Dense row-major `rows × cols` matrix; rows are channels, columns time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Float> Matrix<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<F> {
        if self.rows != other.rows || self.cols != other.cols {
            return None;
        }
        Some(self.data.iter().zip(&other.data).fold(F::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }
}

/// Components of a multilevel decomposition: the original window, the detail
/// matrices of every level (finest first) and the final approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid<F> {
    pub x: Matrix<F>,
    pub details: Vec<Matrix<F>>,
    pub approx: Matrix<F>,
}

impl<F: Float> WaveletPyramid<F> {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Detail matrix of level `level` (1-based).
    pub fn detail(&self, level: usize) -> &Matrix<F> {
        &self.details[level - 1]
    }

    fn check_chain(&self) -> Result<()> {
        let c = self.x.rows();
        let mut len = self.x.cols();
        if self.details.is_empty() {
            return Err(Error::InconsistentPyramid("no detail levels".into()));
        }
        for (i, d) in self.details.iter().enumerate() {
            len = len.div_ceil(2);
            if d.rows() != c || d.cols() != len {
                return Err(Error::InconsistentPyramid(format!(
                    "level {} detail is {}x{}, expected {c}x{len}",
                    i + 1,
                    d.rows(),
                    d.cols()
                )));
            }
        }
        if self.approx.rows() != c || self.approx.cols() != len {
            return Err(Error::InconsistentPyramid(format!(
                "approximation is {}x{}, expected {c}x{len}",
                self.approx.rows(),
                self.approx.cols()
            )));
        }
        Ok(())
    }
}

/// One analysis step. Odd-length input is extended by repeating its last
/// sample; taps that would fall past the extended end contribute nothing.
/// Both outputs have length `ceil(n / 2)`.
pub fn dwt_step<F: Float>(signal: &[F], filters: &FilterPair<F>) -> Result<(Vec<F>, Vec<F>)> {
    let n = signal.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let half = n.div_ceil(2);
    let padded = 2 * half;
    let at = |i: usize| if i < n { signal[i] } else { signal[n - 1] };
    let mut approx = Vec::with_capacity(half);
    let mut detail = Vec::with_capacity(half);
    for m in 0..half {
        let mut a = F::zero();
        let mut d = F::zero();
        for (k, (&lo, &hi)) in filters.lowpass.iter().zip(&filters.highpass).enumerate() {
            let i = 2 * m + k;
            if i >= padded {
                break;
            }
            let s = at(i);
            a = a + s * lo;
            d = d + s * hi;
        }
        approx.push(a);
        detail.push(d);
    }
    Ok((approx, detail))
}

/// One synthesis step: the transpose of the analysis operator, which is its
/// inverse for orthonormal two-tap filters. Returns `2 * approx.len()` samples.
pub fn idwt_step<F: Float>(approx: &[F], detail: &[F], filters: &FilterPair<F>) -> Result<Vec<F>> {
    if approx.len() != detail.len() {
        return Err(Error::Shape(format!("approximation length {} != detail length {}", approx.len(), detail.len())));
    }
    let out_len = 2 * approx.len();
    let mut out = vec![F::zero(); out_len];
    for (m, (&a, &d)) in approx.iter().zip(detail).enumerate() {
        for (k, (&lo, &hi)) in filters.lowpass.iter().zip(&filters.highpass).enumerate() {
            let i = 2 * m + k;
            if i >= out_len {
                break;
            }
            out[i] = out[i] + a * lo + d * hi;
        }
    }
    Ok(out)
}

/// Multilevel decomposition of a `C × T` window into `levels` detail
/// matrices and one approximation matrix.
pub fn mdwd<F: Float>(window: &Matrix<F>, filters: &FilterPair<F>, levels: usize) -> Result<WaveletPyramid<F>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("decomposition depth must be >= 1".into()));
    }
    let t = window.cols();
    if window.rows() == 0 || t == 0 {
        return Err(Error::EmptyInput);
    }
    if levels >= usize::BITS as usize || t < (1usize << levels) {
        return Err(Error::WindowTooShort { len: t, levels });
    }
    let c = window.rows();
    let mut details = Vec::with_capacity(levels);
    let mut current = window.clone();
    for _ in 0..levels {
        let half = current.cols().div_ceil(2);
        let mut approx = Matrix::zeros(c, half);
        let mut detail = Matrix::zeros(c, half);
        for ch in 0..c {
            let (a, d) = dwt_step(current.row(ch), filters)?;
            approx.row_mut(ch).copy_from_slice(&a);
            detail.row_mut(ch).copy_from_slice(&d);
        }
        details.push(detail);
        current = approx;
    }
    Ok(WaveletPyramid { x: window.clone(), details, approx: current })
}

/// Inverse of [`mdwd`]. Samples added by odd-length extension are dropped so
/// the result has the original `C × T` shape.
pub fn reconstruct<F: Float>(pyramid: &WaveletPyramid<F>, filters: &FilterPair<F>) -> Result<Matrix<F>> {
    pyramid.check_chain()?;
    let c = pyramid.x.rows();
    let t = pyramid.x.cols();
    let mut current = pyramid.approx.clone();
    for level in (1..=pyramid.levels()).rev() {
        let target = if level == 1 { t } else { pyramid.detail(level - 1).cols() };
        let detail = pyramid.detail(level);
        let mut next = Matrix::zeros(c, target);
        for ch in 0..c {
            let full = idwt_step(current.row(ch), detail.row(ch), filters)?;
            next.row_mut(ch).copy_from_slice(&full[..target]);
        }
        current = next;
    }
    Ok(current)
}
