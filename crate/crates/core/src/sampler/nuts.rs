//! Multinomial No-U-Turn transitions with a diagonal metric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::adapt::{DualAveraging, WindowedVariance};
use super::{Adaptation, DensityError, DrawStats, Model, PosteriorDraws, SamplerError, SamplerSettings};

const MAX_DELTA_H: f64 = 1000.0;
const INIT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct Integrator<'a, M: Model + ?Sized> {
    model: &'a M,
    inv_mass: &'a [f64],
}

impl<M: Model + ?Sized> Integrator<'_, M> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(self.inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn hamiltonian(&self, z: &State) -> f64 {
        -z.logp + self.kinetic(&z.p)
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(self.inv_mass).map(|(p, m)| p * m).collect()
    }

    /// One leapfrog step; a failed density evaluation leaves `logp` at
    /// negative infinity.
    fn leapfrog(&self, z: &mut State, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(self.inv_mass) {
            *q += eps * m * p;
        }
        match self.model.log_density(&z.q, &mut z.grad) {
            Ok(lp) => {
                z.logp = lp;
                for (p, g) in z.p.iter_mut().zip(&z.grad) {
                    *p += 0.5 * eps * g;
                }
            }
            Err(DensityError::NonFinite) => z.logp = f64::NEG_INFINITY,
        }
    }

    fn sample_momentum(&self, rng: &mut ChaCha8Rng, z: &mut State) {
        for (p, m) in z.p.iter_mut().zip(self.inv_mass) {
            let n: f64 = rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }
}

/// Running totals of one transition.
struct TreeStats {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

struct Subtree {
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    rho: Vec<f64>,
    log_sum_weight: f64,
    proposal: State,
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[allow(clippy::too_many_arguments)]
fn build_tree<M: Model + ?Sized>(
    int: &Integrator<'_, M>,
    rng: &mut ChaCha8Rng,
    z: &mut State,
    depth: usize,
    eps: f64,
    h0: f64,
    stats: &mut TreeStats,
) -> Option<Subtree> {
    if depth == 0 {
        int.leapfrog(z, eps);
        stats.n_leapfrog += 1;
        let mut h = int.hamiltonian(z);
        if h.is_nan() {
            h = f64::INFINITY;
        }
        if h - h0 > MAX_DELTA_H {
            stats.divergent = true;
        }
        stats.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
        if stats.divergent {
            return None;
        }
        let ps = int.p_sharp(&z.p);
        return Some(Subtree {
            p_sharp_beg: ps.clone(),
            p_sharp_end: ps,
            p_beg: z.p.clone(),
            p_end: z.p.clone(),
            rho: z.p.clone(),
            log_sum_weight: h0 - h,
            proposal: z.clone(),
        });
    }
    let init = build_tree(int, rng, z, depth - 1, eps, h0, stats)?;
    let fin = build_tree(int, rng, z, depth - 1, eps, h0, stats)?;

    let lsw = log_sum_exp(init.log_sum_weight, fin.log_sum_weight);
    let proposal = if fin.log_sum_weight > lsw || rng.random::<f64>() < (fin.log_sum_weight - lsw).exp() {
        fin.proposal
    } else {
        init.proposal
    };
    let rho = add(&init.rho, &fin.rho);
    let mut persist = criterion(&init.p_sharp_beg, &fin.p_sharp_end, &rho);
    persist &= criterion(&init.p_sharp_beg, &fin.p_sharp_beg, &add(&init.rho, &fin.p_beg));
    persist &= criterion(&init.p_sharp_end, &fin.p_sharp_end, &add(&fin.rho, &init.p_end));
    if !persist {
        return None;
    }
    Some(Subtree {
        p_sharp_beg: init.p_sharp_beg,
        p_sharp_end: fin.p_sharp_end,
        p_beg: init.p_beg,
        p_end: fin.p_end,
        rho,
        log_sum_weight: lsw,
        proposal,
    })
}

/// One NUTS transition from `z`; returns the new state and its statistics.
fn transition<M: Model + ?Sized>(
    int: &Integrator<'_, M>,
    rng: &mut ChaCha8Rng,
    z: &State,
    eps: f64,
    max_depth: usize,
) -> (State, DrawStats) {
    let mut start = z.clone();
    int.sample_momentum(rng, &mut start);
    let h0 = int.hamiltonian(&start);

    let mut fwd = start.clone();
    let mut bck = start.clone();
    let mut sample = start.clone();
    // Outer ends of the whole trajectory.
    let ps0 = int.p_sharp(&start.p);
    let (mut p_sharp_fwd, mut p_sharp_bck) = (ps0.clone(), ps0);
    let (mut p_fwd, mut p_bck) = (start.p.clone(), start.p.clone());
    let mut rho = start.p.clone();
    let mut log_sum_weight = 0.0;
    let mut stats = TreeStats { n_leapfrog: 0, sum_metro_prob: 0.0, divergent: false };
    let mut depth = 0;

    while depth < max_depth {
        let forward = rng.random::<f64>() > 0.5;
        let sub = if forward {
            build_tree(int, rng, &mut fwd, depth, eps, h0, &mut stats)
        } else {
            build_tree(int, rng, &mut bck, depth, eps, h0, &mut stats)
        };
        let Some(sub) = sub else { break };
        depth += 1;

        if sub.log_sum_weight > log_sum_weight
            || rng.random::<f64>() < (sub.log_sum_weight - log_sum_weight).exp()
        {
            sample = sub.proposal.clone();
        }
        log_sum_weight = log_sum_exp(log_sum_weight, sub.log_sum_weight);

        let total = add(&rho, &sub.rho);
        let persist = if forward {
            let ok = criterion(&p_sharp_bck, &sub.p_sharp_end, &total)
                && criterion(&p_sharp_bck, &sub.p_sharp_beg, &add(&rho, &sub.p_beg))
                && criterion(&p_sharp_fwd, &sub.p_sharp_end, &add(&sub.rho, &p_fwd));
            p_sharp_fwd = sub.p_sharp_end;
            p_fwd = sub.p_end;
            ok
        } else {
            let ok = criterion(&sub.p_sharp_end, &p_sharp_fwd, &total)
                && criterion(&sub.p_sharp_end, &p_sharp_bck, &add(&sub.rho, &p_bck))
                && criterion(&sub.p_sharp_beg, &p_sharp_fwd, &add(&rho, &sub.p_beg));
            p_sharp_bck = sub.p_sharp_end;
            p_bck = sub.p_end;
            ok
        };
        rho = total;
        if !persist {
            break;
        }
    }
    let n = stats.n_leapfrog.max(1);
    let draw = DrawStats {
        divergent: stats.divergent,
        tree_depth: depth,
        n_leapfrog: stats.n_leapfrog,
        energy: int.hamiltonian(&sample),
        accept_stat: stats.sum_metro_prob / n as f64,
        step_size: eps,
        log_density: sample.logp,
    };
    (sample, draw)
}

/// Doubles or halves the step size until one leapfrog step crosses an
/// acceptance probability of 0.8.
fn init_step_size<M: Model + ?Sized>(int: &Integrator<'_, M>, rng: &mut ChaCha8Rng, z: &State, mut eps: f64) -> f64 {
    let threshold = 0.8f64.ln();
    let try_step = |rng: &mut ChaCha8Rng, eps: f64| {
        let mut w = z.clone();
        int.sample_momentum(rng, &mut w);
        let h0 = int.hamiltonian(&w);
        int.leapfrog(&mut w, eps);
        let h = int.hamiltonian(&w);
        if h.is_nan() { f64::NEG_INFINITY } else { h0 - h }
    };
    let direction = if try_step(rng, eps) > threshold { 1 } else { -1 };
    for _ in 0..200 {
        let delta = try_step(rng, eps);
        if (direction == 1 && !(delta > threshold)) || (direction == -1 && !(delta < threshold)) {
            break;
        }
        eps = if direction == 1 { 2.0 * eps } else { 0.5 * eps };
        if !(1e-12..=1e7).contains(&eps) {
            eps = eps.clamp(1e-12, 1e7);
            break;
        }
    }
    eps
}

struct ChainOutput {
    constrained: Vec<f64>,
    unconstrained: Vec<f64>,
    stats: Vec<DrawStats>,
    adaptation: Adaptation,
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn initialize<M: Model + ?Sized>(
    model: &M,
    rng: &mut ChaCha8Rng,
    settings: &SamplerSettings,
    chain: usize,
) -> Result<State, SamplerError> {
    let dim = model.dim();
    let centre = model.initial_point();
    let mut grad = vec![0.0; dim];
    for _ in 0..INIT_ATTEMPTS {
        let q: Vec<f64> = centre
            .iter()
            .map(|c| {
                if settings.init_jitter > 0.0 {
                    c + rng.random_range(-settings.init_jitter..settings.init_jitter)
                } else {
                    *c
                }
            })
            .collect();
        if let Ok(lp) = model.log_density(&q, &mut grad) {
            return Ok(State { q, p: vec![0.0; dim], grad, logp: lp });
        }
    }
    Err(SamplerError::Initialization { chain, attempts: INIT_ATTEMPTS })
}

fn run_chain<M: Model + ?Sized>(model: &M, settings: &SamplerSettings, chain: usize) -> Result<ChainOutput, SamplerError> {
    let mut rng = chain_rng(settings.master_seed, chain);
    let dim = model.dim();
    let mut z = initialize(model, &mut rng, settings, chain)?;
    let mut inv_mass = vec![1.0; dim];

    let mut eps = {
        let int = Integrator { model, inv_mass: &inv_mass };
        init_step_size(&int, &mut rng, &z, 1.0)
    };
    let mut dual = DualAveraging::new(settings.target_accept, eps);
    let mut windows = WindowedVariance::new(dim, settings.n_warmup);

    for _ in 0..settings.n_warmup {
        let (next, stat) = {
            let int = Integrator { model, inv_mass: &inv_mass };
            transition(&int, &mut rng, &z, eps, settings.max_tree_depth)
        };
        z = next;
        if settings.adapt {
            eps = dual.update(stat.accept_stat);
            if windows.observe(&z.q, &mut inv_mass) {
                let int = Integrator { model, inv_mass: &inv_mass };
                eps = init_step_size(&int, &mut rng, &z, eps);
                dual.restart(eps);
            }
        }
    }
    if settings.adapt && settings.n_warmup > 0 {
        eps = dual.final_step_size();
    }

    let int = Integrator { model, inv_mass: &inv_mass };
    let n_names = model.param_names().len();
    let mut constrained = Vec::with_capacity(settings.n_draws * n_names);
    let mut unconstrained = Vec::with_capacity(settings.n_draws * dim);
    let mut stats = Vec::with_capacity(settings.n_draws);
    for _ in 0..settings.n_draws {
        let (next, stat) = transition(&int, &mut rng, &z, eps, settings.max_tree_depth);
        z = next;
        constrained.extend(model.constrain(&z.q));
        unconstrained.extend_from_slice(&z.q);
        stats.push(stat);
    }
    Ok(ChainOutput { constrained, unconstrained, stats, adaptation: Adaptation { step_size: eps, inv_mass } })
}

/// Runs `settings.n_chains` independent chains in parallel. Each chain draws
/// from its own stream of the master seed, so results do not depend on
/// thread scheduling.
pub fn nuts_sample<M: Model + ?Sized>(model: &M, settings: &SamplerSettings) -> Result<PosteriorDraws, SamplerError> {
    settings.validate()?;
    let outputs: Vec<Result<ChainOutput, SamplerError>> =
        (0..settings.n_chains).into_par_iter().map(|c| run_chain(model, settings, c)).collect();
    let mut draws = PosteriorDraws {
        names: model.param_names(),
        n_chains: settings.n_chains,
        n_draws: settings.n_draws,
        values: Vec::new(),
        unconstrained: Vec::new(),
        unconstrained_dim: model.dim(),
        stats: Vec::new(),
        adaptation: Vec::new(),
    };
    for out in outputs {
        let out = out?;
        draws.values.extend(out.constrained);
        draws.unconstrained.extend(out.unconstrained);
        draws.stats.extend(out.stats);
        draws.adaptation.push(out.adaptation);
    }
    let div = draws.n_divergent();
    if div * 10 > draws.stats.len() {
        log::warn!("{div} of {} post-warmup transitions diverged", draws.stats.len());
    }
    Ok(draws)
}

/// Integrates `n_steps` leapfrog steps forward, flips the momentum and
/// integrates back. Returns the largest coordinate difference from the
/// starting position and momentum.
pub fn leapfrog_round_trip<M: Model + ?Sized>(
    model: &M,
    q: &[f64],
    p: &[f64],
    inv_mass: &[f64],
    eps: f64,
    n_steps: usize,
) -> Result<f64, DensityError> {
    let int = Integrator { model, inv_mass };
    let mut grad = vec![0.0; q.len()];
    let logp = model.log_density(q, &mut grad)?;
    let mut z = State { q: q.to_vec(), p: p.to_vec(), grad, logp };
    for _ in 0..n_steps {
        int.leapfrog(&mut z, eps);
    }
    z.p.iter_mut().for_each(|v| *v = -*v);
    for _ in 0..n_steps {
        int.leapfrog(&mut z, eps);
    }
    if !z.logp.is_finite() {
        return Err(DensityError::NonFinite);
    }
    let dq = z.q.iter().zip(q).map(|(a, b)| (a - b).abs());
    let dp = z.p.iter().zip(p).map(|(a, b)| (a + b).abs());
    Ok(dq.chain(dp).fold(0.0, f64::max))
}

/// Change in the Hamiltonian over `n_steps` leapfrog steps.
pub fn energy_error<M: Model + ?Sized>(
    model: &M,
    q: &[f64],
    p: &[f64],
    inv_mass: &[f64],
    eps: f64,
    n_steps: usize,
) -> Result<f64, DensityError> {
    let int = Integrator { model, inv_mass };
    let mut grad = vec![0.0; q.len()];
    let logp = model.log_density(q, &mut grad)?;
    let mut z = State { q: q.to_vec(), p: p.to_vec(), grad, logp };
    let h0 = int.hamiltonian(&z);
    for _ in 0..n_steps {
        int.leapfrog(&mut z, eps);
    }
    Ok(int.hamiltonian(&z) - h0)
}
