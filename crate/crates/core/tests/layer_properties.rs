use mhnn::nn::{LinearParams, Mode, ParamStore, Tape};
use mhnn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 2usize..8).prop_flat_map(|(b, k)| (Just(b), Just(k), proptest::collection::vec(-50.0f64..50.0, b * k)))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((b, k, data) in logits()) {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(&[b, k], data).unwrap());
        let p = tape.softmax(x).unwrap();
        for row in tape.value(p).data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn leaky_relu_with_zero_slope_is_relu(data in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
        let n = data.len();
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(&[1, 1, n], data).unwrap());
        let a = tape.leaky_relu(x, 0.0).unwrap();
        let b = tape.relu(x);
        prop_assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn eval_dropout_is_identity(data in proptest::collection::vec(-5.0f64..5.0, 1..40), p in 0.0f64..0.9) {
        let n = data.len();
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(&[1, n], data.clone()).unwrap());
        let y = tape.dropout(x, p, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn linear_is_affine_in_its_input(
        a in proptest::collection::vec(-2.0f64..2.0, 4),
        b in proptest::collection::vec(-2.0f64..2.0, 4),
    ) {
        let mut store = ParamStore::<f64>::new();
        let layer = LinearParams::register(&mut store, "fc", 4, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let run = |v: Vec<f64>| {
            let mut tape = Tape::<f64>::new();
            let x = tape.input(Tensor::new(&[1, 4], v).unwrap());
            let y = tape.linear(x, &store, &layer).unwrap();
            tape.value(y).data().to_vec()
        };
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (ya, yb, ys, y0) = (run(a), run(b), run(sum), run(vec![0.0; 4]));
        for i in 0..3 {
            prop_assert!((ya[i] + yb[i] - y0[i] - ys[i]).abs() < 1e-12);
        }
    }
}
