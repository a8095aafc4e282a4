use super::{LabeledWindowSet, SetMetadata};
use crate::error::{Error, Result};

/// Cuts a `C × L` recording into windows of `width` steps with the given
/// overlap fraction. Each window takes the majority of its per-step labels,
/// ties going to the smallest label.
pub fn sliding_window(
    series: &[Vec<f64>],
    labels_per_step: &[usize],
    width: usize,
    overlap: f64,
    meta: SetMetadata,
) -> Result<LabeledWindowSet> {
    let c = series.len();
    if c == 0 {
        return Err(Error::EmptyInput);
    }
    let len = series[0].len();
    if let Some(ch) = series.iter().position(|s| s.len() != len) {
        return Err(Error::Shape(format!("channel {ch} has {} steps, expected {len}", series[ch].len())));
    }
    if labels_per_step.len() != len {
        return Err(Error::Shape(format!("{} labels for {len} steps", labels_per_step.len())));
    }
    if width == 0 || width > len {
        return Err(Error::InvalidArgument(format!("window width {width} exceeds series length {len}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} outside [0, 1)")));
    }
    let stride = (width as f64 * (1.0 - overlap)).round() as usize;
    if stride == 0 {
        return Err(Error::InvalidArgument(format!("overlap {overlap} gives a zero stride for width {width}")));
    }
    let k = meta.class_names.len();
    let count = (len - width) / stride + 1;
    let mut windows = Vec::with_capacity(count * c * width);
    let mut labels = Vec::with_capacity(count);
    let mut votes = vec![0usize; k];
    for start in (0..count).map(|i| i * stride) {
        for s in series {
            windows.extend(s[start..start + width].iter().map(|&v| v as f32));
        }
        votes.iter_mut().for_each(|v| *v = 0);
        for (step, &l) in labels_per_step[start..start + width].iter().enumerate() {
            if l >= k {
                return Err(Error::InvalidArgument(format!(
                    "step {}: label {l} out of range for {k} classes",
                    start + step
                )));
            }
            votes[l] += 1;
        }
        let best = votes.iter().copied().max().unwrap_or(0);
        labels.push(votes.iter().position(|&v| v == best).unwrap_or(0));
    }
    LabeledWindowSet::new(windows, labels, c, width, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(c: usize, k: usize) -> SetMetadata {
        SetMetadata {
            channel_names: (0..c).map(|i| format!("ch{i}")).collect(),
            class_names: (0..k).map(|i| format!("c{i}")).collect(),
            sample_rate_hz: 100.0,
        }
    }

    #[test]
    fn half_overlap_starts() {
        let series = vec![(0..1200).map(|i| i as f64).collect::<Vec<_>>()];
        let set = sliding_window(&series, &vec![0; 1200], 600, 0.5, meta(1, 1)).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.window(0)[0], 0.0);
        assert_eq!(set.window(1)[0], 300.0);
        assert_eq!(set.window(2)[0], 600.0);
    }

    #[test]
    fn count_matches_formula() {
        for (len, width, overlap) in [(1000, 200, 0.0), (1000, 200, 0.5), (37, 10, 0.3), (10, 10, 0.9)] {
            let series = vec![vec![0.0; len]; 2];
            let set = sliding_window(&series, &vec![0; len], width, overlap, meta(2, 1)).unwrap();
            let stride = (width as f64 * (1.0 - overlap)).round() as usize;
            assert_eq!(set.len(), (len - width) / stride + 1);
        }
    }

    #[test]
    fn majority_label_with_smallest_tie_break() {
        let series = vec![vec![0.0; 8]];
        let labels = [2, 2, 1, 1, 1, 0, 0, 2];
        let set = sliding_window(&series, &labels, 4, 0.0, meta(1, 3)).unwrap();
        assert_eq!(set.labels(), &[1, 0]);
    }

    #[test]
    fn rejects_wide_windows() {
        let series = vec![vec![0.0; 5]];
        assert!(sliding_window(&series, &[0; 5], 6, 0.0, meta(1, 1)).is_err());
    }
}
