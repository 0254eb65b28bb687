mod common;

use common::*;
use ionlds_core::unscented::unscented_transform;
use ionlds_core::{GaussianBelief, UtParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn affine_maps_are_transformed_exactly() {
    let worst = criteria::ut_affine_worst();
    assert!(worst <= 1e-10, "worst relative error {worst:e}");
}

#[test]
fn sigma_points_reproduce_their_gaussian() {
    let worst = criteria::ut_weights_worst();
    assert!(worst <= 1e-9, "worst relative error {worst:e}");
}

#[test]
fn central_weight_is_lambda_over_spread() {
    let ut = UtParams::default();
    for d in 1..=6 {
        let (wm, wc) = ut.weights(d).unwrap();
        let lambda = 3.0 - d as f64;
        assert!((wm[0] - lambda / 3.0).abs() < 1e-15);
        assert!((wc[0] - wm[0]).abs() < 1e-15);
        assert!(wm[1..].iter().all(|w| (w - 1.0 / 6.0).abs() < 1e-15));
    }
}

#[test]
fn zero_spread_is_a_config_error() {
    let ut = UtParams {
        alpha: 1.0,
        beta: 0.0,
        kappa: Some(-2.0),
    };
    assert!(ut.weights(2).is_err());
}

#[test]
fn non_finite_map_reports_sigma_point() {
    let belief = GaussianBelief::new(DVector::from_element(1, 0.0), DMatrix::identity(1, 1)).unwrap();
    let err = unscented_transform(
        &belief,
        |x| x.map(|v| if v > 0.5 { f64::NAN } else { v }),
        &UtParams::default(),
    )
    .unwrap_err();
    assert_eq!(err.kind(), "propagation");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_exactness_holds_for_any_seed(seed in any::<u64>(), d in 1usize..=6, out in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = normal_vector(&mut rng, d);
        let cov = random_cov(&mut rng, d, d, 0.1);
        let m = normal_matrix(&mut rng, out, d);
        let belief = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
        let mo = unscented_transform(&belief, |x| &m * x, &UtParams::default()).unwrap();
        prop_assert!(max_rel_err_vec(&mo.mean, &(&m * &mean)) <= 1e-10);
        prop_assert!(max_rel_err(&mo.cov, &(&m * &cov * m.transpose())) <= 1e-10);
    }

    #[test]
    fn mean_weights_sum_to_one(alpha in 0.1f64..2.0, kappa in 0.0f64..5.0, d in 1usize..=8) {
        let ut = UtParams { alpha, beta: 2.0, kappa: Some(kappa) };
        let (wm, _) = ut.weights(d).unwrap();
        prop_assert!((wm.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
