use mhnn::metrics::{accuracy, confusion, micro_f1, precision_recall_f1, ConfusionMatrix};
use proptest::prelude::*;

fn predictions() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize)> {
    (2usize..=8, 1usize..=60)
        .prop_flat_map(|(k, n)| (proptest::collection::vec(0..k, n), proptest::collection::vec(0..k, n), Just(k)))
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_f1_is_consistent((preds, labels, k) in predictions()) {
        let cm = confusion(&preds, &labels, k).unwrap();
        prop_assert_eq!(cm.total(), preds.len() as u64);
        let s = precision_recall_f1(&cm);
        for m in &s.per_class {
            for v in [m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-15);
            prop_assert_eq!(m.f1 == 0.0, m.precision * m.recall == 0.0);
        }
        for v in [s.macro_precision, s.macro_recall, s.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn accuracy_equals_micro_recall((preds, labels, k) in predictions()) {
        let cm = confusion(&preds, &labels, k).unwrap();
        let tp: u64 = (0..k).map(|c| cm.true_positives(c)).sum();
        let fn_: u64 = (0..k).map(|c| cm.false_negatives(c)).sum();
        let acc = accuracy(&cm).unwrap();
        prop_assert!((acc - tp as f64 / (tp + fn_) as f64).abs() < 1e-15);
        prop_assert!((acc - micro_f1(&cm)).abs() < 1e-12);
    }

    #[test]
    fn relabeling_classes_permutes_metrics((preds, labels, k) in predictions(), rot in 0usize..8) {
        let perm: Vec<usize> = (0..k).map(|c| (c + rot) % k).collect();
        let a = precision_recall_f1(&confusion(&preds, &labels, k).unwrap());
        let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let b = precision_recall_f1(&confusion(&pp, &pl, k).unwrap());
        for (class, &moved) in a.per_class.iter().zip(&perm) {
            prop_assert_eq!(class, &b.per_class[moved]);
        }
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
    }

    #[test]
    fn sharded_confusions_sum((preds, labels, k) in predictions(), cut in 0usize..60) {
        let cut = cut.min(preds.len());
        let mut left = confusion(&preds[..cut], &labels[..cut], k).unwrap();
        left.merge(&confusion(&preds[cut..], &labels[cut..], k).unwrap()).unwrap();
        prop_assert_eq!(left, confusion(&preds, &labels, k).unwrap());
    }
}

#[test]
fn zero_matrix_has_no_accuracy() {
    assert!(accuracy(&ConfusionMatrix::zeros(3)).is_err());
}
