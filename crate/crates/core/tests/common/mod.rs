#![allow(dead_code)]

use erc_core::model::{
    BetaConstraint, ErcMode, ExposureDatasetBuilder, ExposureModel, ExposurePriors, OutcomeDatasetBuilder,
    OutcomeModel, OutcomePriors, ScalePrior,
};
use erc_core::spline::{ISplineBasis, KnotSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn exposure_model(clustered: bool, free_theta: bool) -> ExposureModel {
    let mut r = rng(11);
    let mut b = ExposureDatasetBuilder::new();
    for g in 0..3 {
        for k in 0..2 {
            for h in 0..3 {
                let cluster = format!("k{g}{k}");
                let hh = format!("h{g}{k}{h}");
                for o in 0..3 {
                    let day = r.random_range(1..120);
                    let w = 4.0 + g as f64 * 0.5 + r.sample::<f64, _>(StandardNormal) * 0.7;
                    b.add_observation(
                        &format!("g{g}"),
                        clustered.then_some(cluster.as_str()),
                        &hh,
                        day,
                        (day / 7) as f64 + o as f64 * 0.0,
                        w,
                    )
                    .unwrap();
                }
            }
        }
    }
    let priors = ExposurePriors {
        trend_df: 3,
        sigma_theta: if free_theta { ScalePrior::half_normal(0.0, 4.0) } else { ScalePrior::fixed(5.0) },
        sigma_h: ScalePrior::half_normal(0.2, 0.5),
        ..Default::default()
    };
    ExposureModel::new(b.build().unwrap(), priors).unwrap()
}

pub fn erc_basis() -> ISplineBasis {
    ISplineBasis::new(3, &KnotSet::new(3.0, 6.0, vec![4.0, 5.0]).unwrap()).unwrap()
}

pub fn outcome_model(mode: ErcMode, constraint: BetaConstraint, priors: OutcomePriors) -> OutcomeModel {
    let mut r = rng(12);
    let mut b = OutcomeDatasetBuilder::new(vec!["age".into()]);
    for s in 0..3 {
        for i in 0..4 {
            let x: f64 = 2.8 + r.random::<f64>() * 3.5;
            let age: f64 = r.random::<f64>() - 0.5;
            for t in 1..=6 {
                let trials = r.random_range(1..4);
                let cases = r.random_range(0..=trials);
                b.add_record(&format!("s{s}"), &format!("i{s}{i}"), t, cases, trials, &[age], x).unwrap();
            }
        }
    }
    let priors = OutcomePriors { time_df: 3, ..priors };
    OutcomeModel::new(b.build().unwrap(), priors, erc_basis(), mode, constraint).unwrap()
}

/// Standard-normal point scaled by `scale`.
pub fn random_point(r: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()
}

/// Largest relative disagreement between the analytic gradient of `f` and
/// central differences with step `h`. Components are compared relative to
/// `max(|analytic|, |numeric|, 1)`.
pub fn max_gradient_error(f: impl Fn(&[f64], &mut [f64]) -> f64, u: &[f64], h: f64) -> f64 {
    let mut g = vec![0.0; u.len()];
    f(u, &mut g);
    let mut scratch = vec![0.0; u.len()];
    let mut worst: f64 = 0.0;
    for i in 0..u.len() {
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        up[i] += h;
        dn[i] -= h;
        let fd = (f(&up, &mut scratch) - f(&dn, &mut scratch)) / (2.0 * h);
        let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max(err);
    }
    worst
}
