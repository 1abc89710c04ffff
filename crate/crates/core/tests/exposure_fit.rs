mod common;

use erc_core::exposure_fit::{
    assign_exposure, fit_exposure, pooling_factor, pooling_factor_plug_in, AssignmentSource, HouseholdMean,
    HouseholdMeans, PoolingVariant, Segment, SubjectTimeline, UnitKey, WindowPolicy,
};
use erc_core::model::{ExposureDatasetBuilder, ExposurePriors, ScalePrior};
use erc_core::sampler::SamplerSettings;
use rand::Rng;
use rand_distr::StandardNormal;

const SIGMA_G: f64 = 2.0;
const SIGMA_H: f64 = 0.4;
const SIGMA_W: f64 = 0.6;
const ETA0: f64 = 4.0;

fn fixed_priors() -> ExposurePriors {
    ExposurePriors {
        eta0: Some(ETA0),
        sigma_g: ScalePrior::fixed(SIGMA_G),
        sigma_h: ScalePrior::fixed(SIGMA_H),
        sigma_w: ScalePrior::fixed(SIGMA_W),
        trend_df: 0,
        ..Default::default()
    }
}

/// Household observation lists for one group.
fn synthetic_households(seed: u64, counts: &[usize]) -> Vec<Vec<f64>> {
    let mut r = common::rng(seed);
    counts
        .iter()
        .map(|&n| {
            let a: f64 = SIGMA_H * r.sample::<f64, _>(StandardNormal);
            (0..n).map(|_| 4.5 + a + SIGMA_W * r.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect()
}

/// Posterior mean and sd of the group mean, and posterior mean of each
/// household mean, with every variance known.
fn normal_normal(households: &[Vec<f64>]) -> (f64, f64, Vec<f64>) {
    let mut prec = 1.0 / (SIGMA_G * SIGMA_G);
    let mut num = ETA0 * prec;
    for h in households {
        let n = h.len() as f64;
        let ybar = h.iter().sum::<f64>() / n;
        let v = SIGMA_H * SIGMA_H + SIGMA_W * SIGMA_W / n;
        prec += 1.0 / v;
        num += ybar / v;
    }
    let eta = num / prec;
    let hh = households
        .iter()
        .map(|h| {
            let n = h.len() as f64;
            let ybar = h.iter().sum::<f64>() / n;
            let b = n * SIGMA_H * SIGMA_H / (n * SIGMA_H * SIGMA_H + SIGMA_W * SIGMA_W);
            (1.0 - b) * eta + b * ybar
        })
        .collect();
    (eta, prec.powf(-0.5), hh)
}

fn build(households: &[Vec<f64>]) -> erc_core::model::ExposureDataset {
    let mut b = ExposureDatasetBuilder::new();
    for (i, h) in households.iter().enumerate() {
        for (j, &w) in h.iter().enumerate() {
            b.add_observation("g", None, &format!("h{i}"), j as i64 + 1, j as f64, w).unwrap();
        }
    }
    b.build().unwrap()
}

#[test]
fn conjugate_group_and_household_means() {
    let households = synthetic_households(21, &[1, 2, 3, 5, 8, 2, 4, 1, 6, 3]);
    let (eta, eta_sd, hh) = normal_normal(&households);
    let settings = SamplerSettings { master_seed: 5, ..Default::default() };
    let post = fit_exposure(build(&households), fixed_priors(), &settings).unwrap();
    let s = post.summary("eta[g]").unwrap();
    let mcse = s.sd / s.ess.sqrt();
    assert!((s.mean - eta).abs() < 3.0 * mcse, "eta {} vs {eta} (mcse {mcse})", s.mean);
    assert!((s.sd / eta_sd - 1.0).abs() < 0.1, "sd {} vs {eta_sd}", s.sd);
    let means = post.household_means();
    for (i, expected) in hh.iter().enumerate() {
        let row = means.get("g", &format!("h{i}")).unwrap();
        // Household means mix eta and alpha, whose ESS is at least as large.
        assert!((row.mean - expected).abs() < 4.0 * row.sd / 400f64.sqrt(), "h{i}: {} vs {expected}", row.mean);
    }
    assert!(post.converged());
    assert!(post.fitted().iter().all(|f| f.is_finite()));
}

#[test]
fn declared_household_follows_prior() {
    let households = synthetic_households(22, &[3, 3, 3, 3]);
    let mut b = ExposureDatasetBuilder::new();
    for (i, h) in households.iter().enumerate() {
        for (j, &w) in h.iter().enumerate() {
            b.add_observation("g", None, &format!("h{i}"), j as i64 + 1, j as f64, w).unwrap();
        }
    }
    b.declare_unit("g", None, "empty").unwrap();
    let data = b.build().unwrap();
    let post = fit_exposure(data, fixed_priors(), &SamplerSettings { master_seed: 6, ..Default::default() }).unwrap();
    let s = post.summary("alpha_household[empty]").unwrap();
    assert!(s.mean.abs() < 0.05, "mean {}", s.mean);
    assert!((s.sd / SIGMA_H - 1.0).abs() < 0.07, "sd {}", s.sd);
    assert!((s.q975 - 1.959964 * SIGMA_H).abs() < 0.08);
}

#[test]
fn fewer_observations_shrink_more() {
    // Two households with the same raw average above the group level.
    let mut households = synthetic_households(23, &[4, 4, 4, 4, 4, 4]);
    households.push(vec![6.0]);
    households.push(vec![6.0; 10]);
    let post = fit_exposure(build(&households), fixed_priors(), &SamplerSettings { master_seed: 7, ..Default::default() })
        .unwrap();
    let group = post.summary("eta[g]").unwrap().mean;
    let m = post.household_means();
    let one = m.mean("g", "h6").unwrap();
    let ten = m.mean("g", "h7").unwrap();
    assert!((one - group).abs() < (ten - group).abs());
    assert!((ten - group).abs() < (6.0 - group).abs());
}

#[test]
fn unclustered_fit_reports_no_cluster_pooling() {
    let households = synthetic_households(24, &[2; 12]);
    let post = fit_exposure(build(&households), fixed_priors(), &SamplerSettings { master_seed: 8, n_chains: 2, ..Default::default() })
        .unwrap();
    for v in [PoolingVariant::DrawWise, PoolingVariant::PlugIn] {
        let p = post.pooling_factors(v);
        assert!(p.cluster.is_none());
        assert!((0.0..=1.0).contains(&p.household));
        assert!((0.0..=1.0).contains(&p.observation));
    }
    let d = post.household_draw(17).unwrap();
    assert_eq!(d.rows().len(), 12);
    assert!(post.household_draw(1_000_000).is_err());
}

fn half_shrunk(seed: u64, n_units: usize, n_draws: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = common::rng(seed);
    let c: Vec<f64> = (0..n_units).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let mean = c.iter().sum::<f64>() / n_units as f64;
    let var_c = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_units as f64 - 1.0);
    // Posterior means c/2; noise of variance Var(c)/4 doubles the within-draw variance.
    let sd = (var_c / 4.0).sqrt();
    let draws = (0..n_draws).map(|_| c.iter().map(|v| v / 2.0 + sd * r.sample::<f64, _>(StandardNormal)).collect()).collect();
    (draws, c)
}

#[test]
fn pooling_factor_half_shrunk() {
    let (draws, _) = half_shrunk(31, 400, 2000);
    let lambda = pooling_factor(&draws);
    assert!((lambda - 0.5).abs() < 0.02, "lambda {lambda}");
}

#[test]
fn pooling_factor_exact_cases() {
    let c = [1.0, -2.0, 0.5, 3.0];
    // Orthogonal perturbation with variance Var(c)/4.
    let u = {
        let raw = [1.0, 1.0, -1.0, -1.0];
        let cm = c.iter().sum::<f64>() / 4.0;
        let dot: f64 = raw.iter().zip(&c).map(|(a, b)| a * (b - cm)).sum();
        let cc: f64 = c.iter().map(|b| (b - cm).powi(2)).sum();
        let v: Vec<f64> = raw.iter().zip(&c).map(|(a, b)| a - dot / cc * (b - cm)).collect();
        let vm = v.iter().sum::<f64>() / 4.0;
        let vv: f64 = v.iter().map(|x| (x - vm).powi(2)).sum();
        let scale = (cc / 4.0 / vv).sqrt();
        v.iter().map(|x| (x - vm) * scale).collect::<Vec<_>>()
    };
    let draws: Vec<Vec<f64>> = (0..10)
        .map(|d| {
            let s = if d % 2 == 0 { 1.0 } else { -1.0 };
            c.iter().zip(&u).map(|(ci, ui)| ci / 2.0 + s * ui).collect()
        })
        .collect();
    assert!((pooling_factor(&draws) - 0.5).abs() < 1e-9);

    let zero: Vec<Vec<f64>> = (0..20).map(|d| c.iter().map(|v| if d % 2 == 0 { *v } else { -*v }).collect()).collect();
    assert!((pooling_factor(&zero) - 1.0).abs() < 1e-9);
    let fixed = vec![c.to_vec(); 20];
    assert!(pooling_factor(&fixed).abs() < 1e-9);
}

#[test]
fn pooling_factor_decreases_with_spread() {
    // Larger true household spread with the same posterior noise: less pooling.
    let mut r = common::rng(32);
    let base: Vec<f64> = (0..200).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let noise: Vec<Vec<f64>> = (0..500).map(|_| (0..200).map(|_| 0.5 * r.sample::<f64, _>(StandardNormal)).collect()).collect();
    let mut last = f64::INFINITY;
    for sigma_h in [0.2, 0.5, 1.0, 2.0] {
        let draws: Vec<Vec<f64>> = noise.iter().map(|n| n.iter().zip(&base).map(|(e, b)| sigma_h * b + e).collect()).collect();
        let l = pooling_factor(&draws);
        assert!(l <= last + 1e-12);
        last = l;
    }
    let sig = vec![1.0; 10];
    assert!(pooling_factor_plug_in(&vec![vec![0.0, 0.0]; 10], &sig) == 1.0);
}

fn random_timeline(r: &mut impl Rng, households: &[(&str, &str)], start: i64) -> SubjectTimeline {
    let n_seg = r.random_range(1..5);
    let mut segs = Vec::new();
    let mut day = start;
    for _ in 0..n_seg {
        let len = r.random_range(1..60);
        let (g, h) = households[r.random_range(0..households.len())];
        segs.push(Segment { start_day: day, end_day: day + len - 1, group: g.into(), cluster: None, household: h.into() });
        day += len;
    }
    SubjectTimeline::new("s", segs).unwrap()
}

fn table(entries: &[(&str, &str, f64)]) -> HouseholdMeans {
    HouseholdMeans::new(
        entries
            .iter()
            .map(|(g, h, m)| HouseholdMean {
                key: UnitKey { group: g.to_string(), cluster: None, household: h.to_string() },
                mean: *m,
                sd: 0.0,
                q025: *m,
                q975: *m,
            })
            .collect(),
    )
}

#[test]
fn assignment_matches_day_loop() {
    let hh = [("trad", "a"), ("trad", "b"), ("clean", "a"), ("clean", "c")];
    let means = table(&[("trad", "a", 6.1), ("trad", "b", 5.4), ("clean", "a", 4.2), ("clean", "c", 3.7)]);
    let mut r = common::rng(41);
    for _ in 0..200 {
        let tl = random_timeline(&mut r, &hh, 1);
        let days: Vec<(i64, i64)> = (tl.start_day()..=tl.end_day()).map(|d| (d, d)).collect();
        let got = assign_exposure(&tl, &means, 28, &days, WindowPolicy::Truncate, AssignmentSource::PosteriorMean).unwrap();
        for a in got {
            let lo = (a.day - 27).max(tl.start_day());
            let mut sum = 0.0;
            let mut n = 0;
            for d in lo..=a.day {
                let s = tl.segments().iter().find(|s| s.start_day <= d && d <= s.end_day).unwrap();
                sum += means.mean(&s.group, &s.household).unwrap();
                n += 1;
            }
            assert!((a.x - sum / n as f64).abs() < 1e-12);
            assert_eq!(a.covered_days, n);
        }
    }
}

#[test]
fn assignment_is_linear_in_means() {
    let hh = [("trad", "a"), ("clean", "c")];
    let means = table(&[("trad", "a", 6.1), ("clean", "c", 3.7)]);
    let mut r = common::rng(42);
    for c in [0.5, 2.0, -1.5] {
        let tl = random_timeline(&mut r, &hh, 100);
        let days: Vec<(i64, i64)> = (tl.start_day()..=tl.end_day()).enumerate().map(|(i, d)| (i as i64, d)).collect();
        let x = assign_exposure(&tl, &means, 28, &days, WindowPolicy::Truncate, AssignmentSource::PosteriorMean).unwrap();
        let y = assign_exposure(&tl, &means.scaled(c), 28, &days, WindowPolicy::Truncate, AssignmentSource::Draw(3)).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((b.x - c * a.x).abs() < 1e-12);
            assert_eq!(b.source, AssignmentSource::Draw(3));
        }
    }
}

#[test]
fn assignment_ignores_trend() {
    // Household means carry no trend, so refitting with a trend leaves the
    // assignment a function of the means table alone.
    let m = common::exposure_model(true, false);
    let settings = SamplerSettings { n_chains: 1, n_warmup: 200, n_draws: 200, master_seed: 3, ..Default::default() };
    let draws = erc_core::sampler::nuts_sample(&m, &settings).unwrap();
    let post = erc_core::exposure_fit::ExposurePosterior::from_draws(m, draws);
    let means = post.household_means();
    let names = post.draws().names().to_vec();
    let theta_idx: Vec<usize> = names.iter().enumerate().filter(|(_, n)| n.starts_with("theta[")).map(|(i, _)| i).collect();
    assert!(!theta_idx.is_empty());
    let mut shifted = Vec::new();
    for d in post.draws().iter_draws() {
        let mut d = d.to_vec();
        for &i in &theta_idx {
            d[i] += 1.0;
        }
        shifted.extend(d);
    }
    let draws = erc_core::sampler::PosteriorDraws::from_values(names, 1, 200, shifted);
    let post2 = erc_core::exposure_fit::ExposurePosterior::from_draws(post.model().clone(), draws);
    assert_eq!(post2.household_means(), means);
}
