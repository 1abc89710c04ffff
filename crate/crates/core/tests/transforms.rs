mod common;

use common::{exposure_model, outcome_model, random_point, rng};
use erc_core::model::{BetaConstraint, ErcMode, OutcomePriors};
use erc_core::sampler::Model;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn exposure_round_trip() {
    let m = exposure_model(true, true);
    let mut r = rng(31);
    for _ in 0..1000 {
        let u = random_point(&mut r, m.dim(), 1.0);
        let p = m.params(&u);
        let back = m.unconstrain(&p).unwrap();
        assert!(max_diff(&u, &back) < 1e-10);
        let flat = m.flatten(&p);
        assert_eq!(flat.len(), m.param_names().len());
        assert!(max_diff(&m.flatten(&m.unflatten(&flat)), &flat) < 1e-12);
    }
}

#[test]
fn outcome_round_trip_all_modes() {
    for mode in [ErcMode::Shared, ErcMode::Hierarchical] {
        for constraint in [BetaConstraint::Free, BetaConstraint::NonNegative] {
            let m = outcome_model(mode, constraint, OutcomePriors::default());
            let mut r = rng(32);
            for _ in 0..250 {
                let u = random_point(&mut r, m.dim(), 1.0);
                let p = m.params(&u);
                let back = m.unconstrain(&p).unwrap();
                assert!(max_diff(&u, &back) < 1e-10, "{mode:?} {constraint:?}: {}", max_diff(&u, &back));
                let flat = m.flatten(&p);
                assert_eq!(flat.len(), m.param_names().len());
                let again = m.flatten(&m.unflatten(&flat));
                assert!(max_diff(&again, &flat) < 1e-10);
            }
        }
    }
}

#[test]
fn nonnegative_draws_give_monotone_predictor() {
    let m = outcome_model(ErcMode::Shared, BetaConstraint::NonNegative, OutcomePriors::default());
    let mut r = rng(33);
    let basis = m.basis().clone();
    for _ in 0..200 {
        let u = random_point(&mut r, m.dim(), 2.0);
        let p = m.params(&u);
        assert!(p.beta[0].iter().all(|b| *b >= 0.0));
        let mut prev = f64::NEG_INFINITY;
        for k in 0..400 {
            let x = 2.0 + k as f64 * 0.01;
            let v: f64 = basis.row(x).iter().zip(&p.beta[0]).map(|(a, b)| a * b).sum();
            assert!(v >= prev);
            prev = v;
        }
    }
}
