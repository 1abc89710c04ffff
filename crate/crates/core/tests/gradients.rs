mod common;

use common::{exposure_model, max_gradient_error, outcome_model, random_point, rng};
use erc_core::model::{Beta0Mode, BetaConstraint, ErcMode, OutcomePriors};
use erc_core::sampler::Model;

fn check<M: Model>(model: &M, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for _ in 0..100 {
        let u = random_point(&mut r, model.dim(), scale);
        let err = max_gradient_error(|x, g| model.log_density(x, g).unwrap(), &u, 1e-5);
        assert!(err < 1e-6, "relative gradient error {err:e}");
    }
}

#[test]
fn exposure_clustered() {
    check(&exposure_model(true, false), 1, 0.7);
}

#[test]
fn exposure_unclustered_free_trend_scale() {
    check(&exposure_model(false, true), 2, 0.7);
}

#[test]
fn outcome_shared_free() {
    check(&outcome_model(ErcMode::Shared, BetaConstraint::Free, OutcomePriors::default()), 3, 0.7);
}

#[test]
fn outcome_shared_nonnegative() {
    check(&outcome_model(ErcMode::Shared, BetaConstraint::NonNegative, OutcomePriors::default()), 4, 0.7);
}

#[test]
fn outcome_hierarchical_free() {
    check(&outcome_model(ErcMode::Hierarchical, BetaConstraint::Free, OutcomePriors::default()), 5, 0.7);
}

#[test]
fn outcome_hierarchical_nonnegative() {
    let priors = OutcomePriors { lkj_eta: 2.5, xi0: vec![1.0, 0.5, 2.0], ..Default::default() };
    check(&outcome_model(ErcMode::Hierarchical, BetaConstraint::NonNegative, priors), 6, 0.7);
}

#[test]
fn outcome_hierarchical_per_basis_mean() {
    let priors = OutcomePriors { beta0: Beta0Mode::PerBasis, lkj_eta: 0.7, ..Default::default() };
    check(&outcome_model(ErcMode::Hierarchical, BetaConstraint::Free, priors), 7, 0.7);
}
