//! Rank-normalized split R-hat and bulk effective sample size.

use statrs::distribution::{ContinuousCDF, Normal};

use super::PosteriorDraws;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDiagnostics {
    pub name: String,
    /// `None` with a single chain or a degenerate parameter.
    pub rhat: Option<f64>,
    pub ess_bulk: f64,
    /// Every draw of the parameter is identical.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub params: Vec<ParamDiagnostics>,
    pub n_divergent: usize,
    pub n_transitions: usize,
    pub mean_accept_stat: Vec<f64>,
    pub step_size: Vec<f64>,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn get(&self, name: &str) -> Option<&ParamDiagnostics> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn max_rhat(&self) -> Option<f64> {
        self.params.iter().filter_map(|p| p.rhat).fold(None, |m, r| Some(m.map_or(r, |m: f64| m.max(r))))
    }

    pub fn min_ess(&self) -> f64 {
        self.params.iter().filter(|p| !p.degenerate).map(|p| p.ess_bulk).fold(f64::INFINITY, f64::min)
    }

    pub fn divergent_fraction(&self) -> f64 {
        if self.n_transitions == 0 {
            0.0
        } else {
            self.n_divergent as f64 / self.n_transitions as f64
        }
    }
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains.iter().flatten().next().copied();
    match first {
        Some(v) => chains.iter().flatten().all(|&x| x == v),
        None => true,
    }
}

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replaces values by normal scores of their pooled average ranks.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut all: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = all.len() as f64;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = normal.inverse_cdf((rank - 0.375) / (s + 0.25));
        for &(_, c, k) in &all[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b = n * sample_var(&means);
    let var_hat = (n - 1.0) / n * w + b / n;
    (var_hat / w).sqrt()
}

/// Rank-normalized split R-hat: the larger of the bulk and folded values.
/// Needs at least two chains of at least four draws.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.len() < 2 || chains.iter().any(|c| c.len() < 4) || is_constant(chains) {
        return None;
    }
    let s = split(chains);
    let bulk = rhat_basic(&rank_normalize(&s));
    let median = {
        let mut all: Vec<f64> = s.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        let n = all.len();
        if n % 2 == 1 { all[n / 2] } else { 0.5 * (all[n / 2 - 1] + all[n / 2]) }
    };
    let folded: Vec<Vec<f64>> = s.iter().map(|c| c.iter().map(|v| (v - median).abs()).collect()).collect();
    let tail = if is_constant(&folded) { bulk } else { rhat_basic(&rank_normalize(&folded)) };
    Some(bulk.max(tail))
}

fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Effective sample size by Geyer's initial monotone sequence, combining
/// chains through the between-chain variance.
fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let total = (m * n) as f64;
    if n < 4 {
        return total;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov = |lag: usize| -> f64 { chains.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, lag)).sum::<f64>() / m as f64 };
    let nf = n as f64;
    let mean_var = acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) {
        return 0.0;
    }
    let mut rho = vec![0.0; n + 2];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = 1.0 - (mean_var - acov(1)) / var_plus;
    rho[1] = odd;
    let mut t = 1;
    while t + 2 < n.saturating_sub(3) && even + odd > 0.0 {
        even = 1.0 - (mean_var - acov(t + 1)) / var_plus;
        odd = 1.0 - (mean_var - acov(t + 2)) / var_plus;
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1]).max(1.0 / total.log10());
    total / tau
}

/// Bulk ESS on split, rank-normalized chains. Zero for constant input.
pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    if chains.is_empty() || is_constant(chains) {
        return 0.0;
    }
    let s = split(chains);
    if s.iter().any(|c| c.len() < 2) {
        return chains.iter().map(|c| c.len()).sum::<usize>() as f64;
    }
    ess_raw(&rank_normalize(&s))
}

pub fn compute_diagnostics(draws: &PosteriorDraws) -> Diagnostics {
    let mut params = Vec::with_capacity(draws.dim());
    let mut warnings = Vec::new();
    for (p, name) in draws.names().iter().enumerate() {
        let chains = draws.param_chains(p);
        let degenerate = is_constant(&chains);
        params.push(ParamDiagnostics {
            name: name.clone(),
            rhat: if degenerate { None } else { split_rhat(&chains) },
            ess_bulk: if degenerate { 0.0 } else { bulk_ess(&chains) },
            degenerate,
        });
    }
    let n_divergent = draws.n_divergent();
    let n_transitions = draws.stats().len();
    if n_transitions > 0 && n_divergent * 10 > n_transitions {
        warnings.push(format!("{n_divergent} of {n_transitions} post-warmup transitions diverged"));
    }
    if draws.n_chains() < 2 {
        warnings.push("R-hat unavailable with a single chain".into());
    }
    let has_stats = n_transitions == draws.total_draws();
    let mean_accept_stat = if has_stats {
        (0..draws.n_chains()).map(|c| mean(&draws.chain_stats(c).iter().map(|s| s.accept_stat).collect::<Vec<_>>())).collect()
    } else {
        Vec::new()
    };
    let step_size = draws.adaptation().iter().map(|a| a.step_size).collect();
    Diagnostics { params, n_divergent, n_transitions, mean_accept_stat, step_size, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(seed: u64, m: usize, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn iid_noise_converged() {
        let c = noise(1, 4, 1000);
        assert!(split_rhat(&c).unwrap() < 1.01);
        let ess = bulk_ess(&c);
        assert!(ess > 3000.0 && ess <= 4000.0 * 1.2, "ess {ess}");
    }

    #[test]
    fn shifted_chain_detected() {
        let mut c = noise(2, 4, 1000);
        c[3].iter_mut().for_each(|v| *v += 10.0);
        assert!(split_rhat(&c).unwrap() > 1.5);
    }

    #[test]
    fn constant_chains_degenerate() {
        let c = vec![vec![2.0; 100]; 4];
        assert_eq!(split_rhat(&c), None);
        assert_eq!(bulk_ess(&c), 0.0);
    }

    #[test]
    fn single_chain_has_no_rhat() {
        let c = noise(3, 1, 500);
        assert_eq!(split_rhat(&c), None);
        assert!(bulk_ess(&c) > 300.0);
    }

    #[test]
    fn autocorrelated_chain_has_lower_ess() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..1000)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        x = 0.9 * x + e;
                        x
                    })
                    .collect()
            })
            .collect();
        // AR(1) with phi = 0.9: ESS / N ~ (1 - phi) / (1 + phi).
        let ess = bulk_ess(&chains);
        assert!(ess > 100.0 && ess < 400.0, "ess {ess}");
    }
}
