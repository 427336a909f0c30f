use affect_core::dataset::{denormalize_label, normalize_label};
use affect_core::keyframe::{class_of, joint_softmax, select_top_k, NUM_CLASSES};
use affect_core::metrics::{ccc, CccMode, SeriesPair};
use affect_core::temporal::{build_sampling_matrix, FilterParams};
use proptest::prelude::*;

fn series(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, len)
}

proptest! {
    #[test]
    fn ccc_is_bounded_and_symmetric((x, y) in (2usize..64).prop_flat_map(|n| (series(n), series(n)))) {
        let pair = SeriesPair::new(&x, &y).unwrap();
        let swapped = SeriesPair::new(&y, &x).unwrap();
        if let (Ok(a), Ok(b)) = (ccc(pair, CccMode::Strict), ccc(swapped, CccMode::Strict)) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ccc_shift_penalty(x in series(16), shift in 0.1f64..50.0) {
        let y: Vec<f64> = x.iter().map(|v| v + shift).collect();
        if let Ok(c) = ccc(SeriesPair::new(&x, &y).unwrap(), CccMode::Strict) {
            prop_assert!(c < 1.0);
        }
    }

    #[test]
    fn sampling_rows_are_distributions(
        g_hat in -10.0f64..10.0,
        d_hat in -5.0f64..5.0,
        s_hat in -8.0f64..8.0,
        n in 1usize..10,
        t in 1usize..80,
    ) {
        let m = build_sampling_matrix(&FilterParams { g_hat, d_hat, s_hat, n }, t);
        prop_assert_eq!(m.matrix.len(), n * t);
        for k in 0..n {
            let row = m.row(k);
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_softmax_marginalizes((c, f, scores) in (1usize..8, 1usize..40)
        .prop_flat_map(|(c, f)| (Just(c), Just(f), prop::collection::vec(-30.0f64..30.0, c * f))))
    {
        let (joint, marginal) = joint_softmax(&scores, c, f);
        prop_assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((marginal.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn top_k_is_sorted_and_in_range(marginal in prop::collection::vec(0.0f64..1.0, 1..50), k in 1usize..20) {
        let sel = select_top_k(&marginal, k);
        prop_assert_eq!(sel.len(), k);
        prop_assert!(sel.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(sel.iter().all(|&i| i < marginal.len()));
        if marginal.len() >= k {
            prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
            let floor = sel.iter().map(|&i| marginal[i]).fold(f64::INFINITY, f64::min);
            let above = marginal.iter().filter(|&&m| m > floor).count();
            prop_assert!(above < k);
        }
    }

    #[test]
    fn class_and_label_ranges(v in -10i32..=10, a in -10i32..=10) {
        prop_assert!(class_of(v, a) < NUM_CLASSES);
        let x = normalize_label(v).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((denormalize_label(x) - v as f64).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_levels_are_rejected(level in prop_oneof![-1000i32..-10, 11i32..1000]) {
        prop_assert!(normalize_label(level).is_err());
    }
}
