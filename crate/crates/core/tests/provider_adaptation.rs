mod common;

use common::*;
use radiant::align::fit_scale_shift;
use radiant::provider::{AmbiguityOracleConfig, DepthProvider};

#[test]
fn region_fit_recovers_composite_affine() {
    let case = two_box_case(32);
    let oracle = noiseless(vec![(1.0, 0.0), (2.0, 0.5)], 0.5, 1.0);
    let out = oracle.apply(&case.perception);
    let in_region = |r: usize| -> Vec<bool> {
        (0..out.values.len())
            .map(|i| out.validity[i] && case.perception.regions[i] == Some(r))
            .collect()
    };
    // Region 1: 0.5 * (2 d + 0.5) + 1 = d + 1.25.
    let fit = fit_scale_shift(&case.perception.depth.values, &out.values, &in_region(1)).unwrap();
    assert!((fit.w - 1.0).abs() < 1e-6 && (fit.q - 1.25).abs() < 1e-6, "{fit:?}");
    // Region 0: 0.5 d + 1.
    let fit = fit_scale_shift(&case.perception.depth.values, &out.values, &in_region(0)).unwrap();
    assert!((fit.w - 0.5).abs() < 1e-6 && (fit.q - 1.0).abs() < 1e-6, "{fit:?}");

    let all: Vec<bool> = out.validity.clone();
    let whole = fit_scale_shift(&case.perception.depth.values, &out.values, &all).unwrap();
    let residual = affine_residual(&case.perception.depth, &out, &all);
    assert!(residual > 1e-3, "whole-image fit {whole:?} residual {residual}");
}

#[test]
fn two_hundred_steps_halve_the_error() {
    let case = two_box_case(32);
    let mut p = DepthProvider::new(AmbiguityOracleConfig::ambiguous(3), (8, 8)).unwrap();
    let before = mean_abs(&predict(&p, &case), &case.target);
    adapt(&mut p, &case, 200, 0.0, |_| 1e-2);
    let after = mean_abs(&predict(&p, &case), &case.target);
    assert!(after <= 0.5 * before, "{before} -> {after}");
}

#[test]
fn global_affine_is_exactly_invertible() {
    let case = two_box_case(16);
    let mut p = DepthProvider::new(noiseless(vec![], 0.35, 0.4), (8, 8)).unwrap();
    p.correction.set_uniform(1.0 / 0.35, -0.4 / 0.35);
    assert!(mean_abs(&predict(&p, &case), &case.target) < 1e-6);
}

// A 2x2 grid reaches the bound within 500 steps. The default 8x8 grid has
// weakly observed high-frequency node modes and needs more steps, so it is
// checked at 2000.
#[test]
fn global_affine_inversion_converges() {
    for case in [two_box_case(32), ramp_case(32)] {
        let mut p = DepthProvider::new(noiseless(vec![], 0.35, 0.4), (2, 2)).unwrap();
        adapt(&mut p, &case, 500, 0.0, cosine(0.05, 20, 500));
        let e = mean_abs(&predict(&p, &case), &case.target);
        assert!(e < 1e-3, "2x2 grid after 500 steps: {e}");

        let mut p = DepthProvider::new(noiseless(vec![], 0.35, 0.4), (8, 8)).unwrap();
        adapt(&mut p, &case, 2000, 0.0, cosine(0.1, 0, 2000));
        let e = mean_abs(&predict(&p, &case), &case.target);
        assert!(e < 1e-3, "8x8 grid after 2000 steps: {e}");
    }
}

#[test]
fn regularizer_keeps_undistorted_region_affine() {
    let case = two_box_case(32);
    let oracle = noiseless(vec![(1.0, 0.0), (0.75, 0.6), (1.3, -0.5)], 0.35, 0.4);
    let floor = floor_mask(&case);

    let mut free = DepthProvider::new(oracle.clone(), (8, 8)).unwrap();
    let init = predict(&free, &case);
    adapt(&mut free, &case, 500, 0.0, |_| 1e-2);
    let free_residual = affine_residual(&init, &predict(&free, &case), &floor);

    // Regularizer weight relative to the adaptation loss, as in training.
    let mut reg = DepthProvider::new(oracle, (8, 8)).unwrap();
    adapt(&mut reg, &case, 500, 10.0, |_| 1e-2);
    let reg_residual = affine_residual(&init, &predict(&reg, &case), &floor);
    assert!(reg_residual < 1e-2, "{reg_residual}");
    assert!(reg_residual < free_residual, "{reg_residual} vs {free_residual}");
}
