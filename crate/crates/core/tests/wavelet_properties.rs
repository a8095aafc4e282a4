use mhnn::wavelet::{dwt_step, haar_filters, mdwd, reconstruct, Matrix};
use proptest::prelude::*;

fn window() -> impl Strategy<Value = (Matrix<f64>, usize)> {
    (1usize..=4, 1usize..=3, 0usize..=40).prop_flat_map(|(c, levels, extra)| {
        let t = (1 << levels) + extra;
        proptest::collection::vec(-10.0f64..10.0, c * t)
            .prop_map(move |data| (Matrix::new(c, t, data).unwrap(), levels))
    })
}

fn energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

proptest! {
    #[test]
    fn reconstruction_inverts_decomposition((x, levels) in window()) {
        let f = haar_filters::<f64>();
        let p = mdwd(&x, &f, levels).unwrap();
        let back = reconstruct(&p, &f).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn even_steps_conserve_energy(signal in proptest::collection::vec(-5.0f64..5.0, 1..32)) {
        let mut s = signal;
        if s.len() % 2 == 1 {
            s.push(0.0);
        }
        let (a, d) = dwt_step(&s, &haar_filters()).unwrap();
        let lhs = energy(&s);
        prop_assert!((lhs - energy(&a) - energy(&d)).abs() <= 1e-10 * lhs.max(1.0));
    }

    #[test]
    fn decomposition_is_linear(
        (x, levels) in window(),
        alpha in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let f = haar_filters::<f64>();
        let mut state = seed;
        let y_data: Vec<f64> = (0..x.as_slice().len())
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let y = Matrix::new(x.rows(), x.cols(), y_data).unwrap();
        let combo = Matrix::new(
            x.rows(),
            x.cols(),
            x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| alpha * a + b).collect(),
        )
        .unwrap();
        let (px, py, pc) = (mdwd(&x, &f, levels).unwrap(), mdwd(&y, &f, levels).unwrap(), mdwd(&combo, &f, levels).unwrap());
        for lvl in 0..levels {
            for ((a, b), c) in px.details[lvl].as_slice().iter().zip(py.details[lvl].as_slice()).zip(pc.details[lvl].as_slice()) {
                prop_assert!((alpha * a + b - c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn channels_are_decomposed_independently((x, levels) in window(), scale in 0.5f64..2.0) {
        let f = haar_filters::<f64>();
        let base = mdwd(&x, &f, levels).unwrap();
        let mut changed = x.clone();
        changed.row_mut(0).iter_mut().for_each(|v| *v *= scale + 1.0);
        let other = mdwd(&changed, &f, levels).unwrap();
        for ch in 1..x.rows() {
            prop_assert_eq!(base.approx.row(ch), other.approx.row(ch));
            for lvl in 0..levels {
                prop_assert_eq!(base.details[lvl].row(ch), other.details[lvl].row(ch));
            }
        }
    }

    #[test]
    fn component_lengths_halve_with_rounding_up((x, levels) in window()) {
        let p = mdwd(&x, &haar_filters::<f64>(), levels).unwrap();
        let mut len = x.cols();
        for d in &p.details {
            len = len.div_ceil(2);
            prop_assert_eq!(d.cols(), len);
            prop_assert_eq!(d.rows(), x.rows());
        }
        prop_assert_eq!(p.approx.cols(), len);
    }
}
