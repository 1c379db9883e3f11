use proptest::prelude::*;
use spaceedit_tensor::{kernels, Tensor};

proptest! {
    #[test]
    fn sum_to_shape_preserves_total(rows in 1usize..5, cols in 1usize..5, vals in proptest::collection::vec(-10.0f64..10.0, 25)) {
        let t = Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec());
        let total = t.sum();
        let reduced = kernels::sum_to_shape(&t, &[1, cols]);
        prop_assert!((reduced.sum() - total).abs() < 1e-9);
        let reduced = kernels::sum_to_shape(&t, &[rows, 1]);
        prop_assert!((reduced.sum() - total).abs() < 1e-9);
    }

    #[test]
    fn permute_roundtrip(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let t = Tensor::<f64>::from_fn(vec![a, b, c], |i| i as f64);
        let p = kernels::permute(&t, &[1, 2, 0]);
        let back = kernels::permute(&p, &kernels::inverse_permutation(&[1, 2, 0]));
        prop_assert_eq!(back, t);
    }

    #[test]
    fn upsample_then_pool_is_identity(h in 1usize..5, w in 1usize..5) {
        let t = Tensor::<f64>::from_fn(vec![1, 2, h, w], |i| (i as f64).sin());
        let round = kernels::avg_pool2(&kernels::upsample2(&t));
        prop_assert!(round.max_abs_diff(&t) < 1e-12);
    }
}
