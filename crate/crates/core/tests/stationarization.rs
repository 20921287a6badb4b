use nst_core::stationarization::{
    denormalize, normalize, DenormMode, SeriesWindow, StationaryStats, DEFAULT_EPSILON,
};
use nst_core::Tensor;
use proptest::prelude::*;

fn window(rows: usize, cols: usize, data: Vec<f64>) -> SeriesWindow {
    SeriesWindow::new(Tensor::new([rows, cols], data).unwrap(), None).unwrap()
}

fn arb_window() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..24, 1usize..5)
        .prop_flat_map(|(s, c)| (Just(s), Just(c), prop::collection::vec(-1e3f64..1e3, s * c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn normalized_columns_are_standard((s, c, data) in arb_window()) {
        let w = window(s, c, data);
        let (n, stats) = normalize(&w, DEFAULT_EPSILON).unwrap();
        for j in 0..c {
            let col: Vec<f64> = (0..s).map(|i| n.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / s as f64;
            prop_assert!(mean.abs() < 1e-9);
            if stats.sigma.data()[j] >= 10.0 * DEFAULT_EPSILON {
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s as f64;
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn affine_equivariance((s, c, data) in arb_window(), a in 0.01f64..100.0, b in -1e3f64..1e3) {
        let w = window(s, c, data.clone());
        let shifted = window(s, c, data.iter().map(|v| a * v + b).collect());
        let (n1, s1) = normalize(&w, DEFAULT_EPSILON).unwrap();
        let (n2, _) = normalize(&shifted, DEFAULT_EPSILON).unwrap();
        // columns that hit the floor are not scale-equivariant by design
        prop_assume!(s1.sigma.data().iter().all(|&v| a * v > 1e3 * DEFAULT_EPSILON && v > 1e3 * DEFAULT_EPSILON));
        prop_assert!(n1.max_abs_diff(&n2) < 1e-9, "diff {}", n1.max_abs_diff(&n2));
    }

    #[test]
    fn inverse_round_trip((s, c, data) in arb_window()) {
        let w = window(s, c, data);
        let (n, stats) = normalize(&w, DEFAULT_EPSILON).unwrap();
        let back = denormalize(&n, &stats, DenormMode::Inverse).unwrap();
        prop_assert!(back.max_abs_diff(&w.x) < 1e-10);
    }

    #[test]
    fn sigma_never_below_floor((s, c, data) in arb_window(), eps in 1e-8f64..1.0) {
        let w = window(s, c, data);
        let (_, stats) = normalize(&w, eps).unwrap();
        prop_assert!(stats.sigma.data().iter().all(|&v| v >= eps));
        prop_assert!(stats.mu.all_finite());
    }
}

#[test]
fn columns_are_independent() {
    let two = window(3, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 60.0]);
    let (n, s) = normalize(&two, DEFAULT_EPSILON).unwrap();
    for (j, col) in [[1.0, 2.0, 3.0], [10.0, 20.0, 60.0]].iter().enumerate() {
        let (nj, sj) = normalize(&window(3, 1, col.to_vec()), DEFAULT_EPSILON).unwrap();
        assert_eq!(s.mu.data()[j], sj.mu.item());
        assert_eq!(s.sigma.data()[j], sj.sigma.item());
        for i in 0..3 {
            assert_eq!(n.at(i, j), nj.at(i, 0));
        }
    }
}

#[test]
fn constant_window_round_trips() {
    let w = window(4, 1, vec![7.0; 4]);
    let (n, stats) = normalize(&w, DEFAULT_EPSILON).unwrap();
    assert_eq!(denormalize(&n, &stats, DenormMode::Inverse).unwrap(), w.x);
}

#[test]
fn literal_mode_is_not_an_inverse() {
    let stats = StationaryStats {
        mu: Tensor::vector(vec![1.0]),
        sigma: Tensor::vector(vec![2.0]),
    };
    let y = Tensor::from_rows(&[[0.5]]).unwrap();
    assert_eq!(
        denormalize(&y, &stats, DenormMode::Literal).unwrap().item(),
        3.0
    );
    assert_eq!(
        denormalize(&y, &stats, DenormMode::Inverse).unwrap().item(),
        2.0
    );
}
