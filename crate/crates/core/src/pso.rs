//! Particle swarm optimization over policy parameters.
//!
//! The swarm maximizes a noisy fitness. Each particle keeps a personal best
//! whose fitness is the running average of all evaluations made there;
//! neighbors sit on a fixed ring, so particle `i` is attracted to the best
//! personal best among `{i - 1, i, i + 1}`.
//!
//! Randomness is split into per-particle streams derived from the master
//! seed: initial positions, the `xi` draws and the seeds of fitness
//! evaluations for particle `i` never depend on the swarm size or on how
//! evaluations are scheduled.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{final_sq_errors, median, EnsembleConfig};
use crate::par::{map_indexed, Execution};
use crate::policies::{MachinePolicyParams, Policy, ShapedTimeDensity, MACHINE_REPEATS};

const INIT_DOMAIN: u64 = 1;
const XI_DOMAIN: u64 = 2;
const EVAL_DOMAIN: u64 = 3;

fn stream_rng(master: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Seed for one fitness evaluation. `kind` 0 scores the current position,
/// 1 re-scores the personal best.
pub fn evaluation_seed(master: u64, iteration: u64, particle: u64, kind: u64) -> u64 {
    stream_rng(master, EVAL_DOMAIN, (iteration << 32) | (particle << 1) | kind).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SearchBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(Error::InvalidConfig("search box bounds must be non-empty and of equal length".into()));
        }
        for (k, (lo, hi)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidConfig(format!("search box dimension {k}: need lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().zip(&self.lo).zip(&self.hi).all(|((x, lo), hi)| lo <= x && x <= hi)
    }
}

/// When personal bests are re-scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reevaluation {
    /// Every evaluated personal best gets one extra evaluation per iteration.
    #[default]
    EveryIteration,
    /// Only when the current position's fitness beats the incumbent.
    ChallengeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoConfig {
    pub n_pso: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub w: f64,
    pub v_max: Vec<f64>,
    pub search_box: SearchBox,
    /// Stop once the best fitness improves by less than this fraction over
    /// `window` iterations.
    pub tol_rel: f64,
    pub window: usize,
    pub max_iters: usize,
    /// Draw `xi` per coordinate instead of one scalar per particle.
    pub per_coordinate_xi: bool,
    pub reevaluation: Reevaluation,
    pub seed: u64,
}

impl PsoConfig {
    /// Standard constants with `v_max` a quarter of each box side.
    pub fn new(search_box: SearchBox) -> Self {
        let v_max = search_box.lo.iter().zip(&search_box.hi).map(|(lo, hi)| 0.25 * (hi - lo)).collect();
        Self {
            n_pso: 60,
            beta1: 0.5,
            beta2: 1.0,
            w: 0.7,
            v_max,
            search_box,
            tol_rel: 0.01,
            window: 10,
            max_iters: 200,
            per_coordinate_xi: false,
            reevaluation: Reevaluation::EveryIteration,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.search_box.validate()?;
        if self.n_pso < 2 {
            return bad(format!("n_pso must be at least 2, got {}", self.n_pso));
        }
        if !(self.w > 0.0 && self.w < 1.0) {
            return bad(format!("inertia w must lie in (0, 1), got {}", self.w));
        }
        if !(self.beta1 > 0.0 && self.beta2 > 0.0) {
            return bad(format!("beta1, beta2 must be positive, got {}, {}", self.beta1, self.beta2));
        }
        if self.v_max.len() != self.search_box.dim() || self.v_max.iter().any(|v| !(*v > 0.0)) {
            return bad("v_max must be positive and match the box dimension".into());
        }
        if !(self.tol_rel >= 0.0) || self.window == 0 || self.max_iters == 0 {
            return bad("need tol_rel >= 0, window >= 1 and max_iters >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmParticle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub p_best: Vec<f64>,
    /// Average of every evaluation made at `p_best`.
    pub p_best_mean_fitness: f64,
    pub p_best_eval_count: u32,
}

impl SwarmParticle {
    pub fn at(position: Vec<f64>) -> Self {
        let dim = position.len();
        Self {
            p_best: position.clone(),
            position,
            velocity: vec![0.0; dim],
            p_best_mean_fitness: f64::NEG_INFINITY,
            p_best_eval_count: 0,
        }
    }

    pub fn is_evaluated(&self) -> bool {
        self.p_best_eval_count > 0
    }
}

/// Folds a fresh evaluation of the current position into the personal best.
///
/// The incumbent is first re-scored with `resample` (if it returns a value)
/// and averaged over all its evaluations; then the current position takes
/// over if it scored strictly better.
pub fn update_personal_best(
    particle: &mut SwarmParticle,
    new_fitness: f64,
    resample: impl FnOnce() -> Option<f64>,
) {
    if !particle.is_evaluated() {
        particle.p_best.clone_from(&particle.position);
        particle.p_best_mean_fitness = new_fitness;
        particle.p_best_eval_count = 1;
        return;
    }
    if let Some(s) = resample() {
        let n = f64::from(particle.p_best_eval_count);
        let mean = particle.p_best_mean_fitness;
        particle.p_best_mean_fitness = if mean == f64::NEG_INFINITY || s == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            (mean * n + s) / (n + 1.0)
        };
        particle.p_best_eval_count += 1;
    }
    if new_fitness > particle.p_best_mean_fitness {
        particle.p_best.clone_from(&particle.position);
        particle.p_best_mean_fitness = new_fitness;
        particle.p_best_eval_count = 1;
    }
}

/// Index of the best personal best among `i` and its two ring neighbors.
/// Ties go to `i`, then `i - 1`.
pub fn ring_best(swarm: &[SwarmParticle], i: usize) -> usize {
    let n = swarm.len();
    let mut best = i;
    for j in [(i + n - 1) % n, (i + 1) % n] {
        if swarm[j].p_best_mean_fitness > swarm[best].p_best_mean_fitness {
            best = j;
        }
    }
    best
}

/// The `xi_1`, `xi_2` factors for one particle and step.
pub fn draw_xi<R: Rng + ?Sized>(rng: &mut R, dim: usize, per_coordinate: bool) -> (Vec<f64>, Vec<f64>) {
    if per_coordinate {
        let xi1 = (0..dim).map(|_| rng.random::<f64>()).collect();
        let xi2 = (0..dim).map(|_| rng.random::<f64>()).collect();
        (xi1, xi2)
    } else {
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        (vec![a; dim], vec![b; dim])
    }
}

/// One synchronous move of the whole swarm; returns the neighbor index each
/// particle was attracted to. `rngs[i]` supplies particle `i`'s draws.
///
/// Velocities are clamped to `±v_max`; a coordinate that leaves the box is
/// put on the boundary and its velocity zeroed.
pub fn pso_step<R: Rng>(swarm: &mut [SwarmParticle], cfg: &PsoConfig, rngs: &mut [R]) -> Vec<usize> {
    let neighbors: Vec<usize> = (0..swarm.len()).map(|i| ring_best(swarm, i)).collect();
    let targets: Vec<Vec<f64>> = neighbors.iter().map(|&j| swarm[j].p_best.clone()).collect();
    let b = &cfg.search_box;
    for (i, p) in swarm.iter_mut().enumerate() {
        let (xi1, xi2) = draw_xi(&mut rngs[i], p.position.len(), cfg.per_coordinate_xi);
        for k in 0..p.position.len() {
            let x = p.position[k];
            let v = cfg.w * p.velocity[k]
                + cfg.beta1 * xi1[k] * (p.p_best[k] - x)
                + cfg.beta2 * xi2[k] * (targets[i][k] - x);
            let v = v.clamp(-cfg.v_max[k], cfg.v_max[k]);
            let moved = x + v;
            if moved < b.lo[k] || moved > b.hi[k] {
                p.position[k] = moved.clamp(b.lo[k], b.hi[k]);
                p.velocity[k] = 0.0;
            } else {
                p.position[k] = moved;
                p.velocity[k] = v;
            }
        }
    }
    neighbors
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    /// Largest averaged personal-best fitness in the swarm.
    pub best_fitness: f64,
    /// Mean fitness of this iteration's positions (finite values only).
    pub mean_fitness: f64,
}

/// Swarm state after an iteration's move, for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub swarm: Vec<SwarmParticle>,
    pub neighbors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoOutcome {
    pub best_position: Vec<f64>,
    pub best_fitness: f64,
    pub trace: Vec<TracePoint>,
    /// False when `max_iters` ran out before the fitness saturated.
    pub converged: bool,
    pub swarm: Vec<SwarmParticle>,
    /// Filled only when requested.
    pub history: Vec<IterationRecord>,
}

impl PsoOutcome {
    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_trace_csv(&self.trace, writer)
    }
}

pub fn write_trace_csv<W: Write>(trace: &[TracePoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for point in trace {
        w.serialize(point)?;
    }
    w.flush()?;
    Ok(())
}

/// A swarm with its per-particle random streams.
#[derive(Debug, Clone)]
pub struct Swarm {
    pub particles: Vec<SwarmParticle>,
    rngs: Vec<ChaCha8Rng>,
    iteration: u64,
}

impl Swarm {
    /// Particles placed uniformly in the box, at rest.
    pub fn init(cfg: &PsoConfig) -> Self {
        let b = &cfg.search_box;
        let particles = (0..cfg.n_pso)
            .map(|i| {
                let mut rng = stream_rng(cfg.seed, INIT_DOMAIN, i as u64);
                SwarmParticle::at(b.lo.iter().zip(&b.hi).map(|(lo, hi)| rng.random_range(*lo..=*hi)).collect())
            })
            .collect();
        let rngs = (0..cfg.n_pso).map(|i| stream_rng(cfg.seed, XI_DOMAIN, i as u64)).collect();
        Self { particles, rngs, iteration: 0 }
    }

    /// Scores every position (and re-scores personal bests as configured),
    /// then updates the personal bests. Returns the trace point.
    pub fn evaluate<F>(&mut self, cfg: &PsoConfig, fitness: &F, exec: Execution) -> TracePoint
    where
        F: Fn(&[f64], u64) -> f64 + Sync,
    {
        let it = self.iteration;
        let particles = &self.particles;
        let scores: Vec<(f64, Option<f64>)> = map_indexed(particles.len(), exec, |i| {
            let p = &particles[i];
            let s = fitness(&p.position, evaluation_seed(cfg.seed, it, i as u64, 0));
            let rescore = p.is_evaluated()
                && match cfg.reevaluation {
                    Reevaluation::EveryIteration => true,
                    Reevaluation::ChallengeOnly => s > p.p_best_mean_fitness,
                };
            let r = rescore.then(|| fitness(&p.p_best, evaluation_seed(cfg.seed, it, i as u64, 1)));
            (s, r)
        });
        for (p, (s, r)) in self.particles.iter_mut().zip(&scores) {
            update_personal_best(p, *s, || *r);
        }
        let finite: Vec<f64> = scores.iter().map(|s| s.0).filter(|s| s.is_finite()).collect();
        TracePoint {
            iteration: it as usize,
            best_fitness: self.best().p_best_mean_fitness,
            mean_fitness: if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 },
        }
    }

    pub fn step(&mut self, cfg: &PsoConfig) -> Vec<usize> {
        self.iteration += 1;
        pso_step(&mut self.particles, cfg, &mut self.rngs)
    }

    /// Particle holding the largest averaged personal-best fitness.
    pub fn best(&self) -> &SwarmParticle {
        self.particles
            .iter()
            .reduce(|a, b| if b.p_best_mean_fitness > a.p_best_mean_fitness { b } else { a })
            .unwrap()
    }
}

fn saturated(trace: &[TracePoint], cfg: &PsoConfig) -> bool {
    if trace.len() <= cfg.window {
        return false;
    }
    let old = trace[trace.len() - 1 - cfg.window].best_fitness;
    let new = trace[trace.len() - 1].best_fitness;
    old.is_finite() && new - old <= cfg.tol_rel * old.abs()
}

/// Maximizes `fitness(position, seed)`: evaluate, update personal bests,
/// move, until the best fitness saturates or `max_iters` is reached.
pub fn pso_optimize<F>(cfg: &PsoConfig, fitness: &F, exec: Execution, record_history: bool) -> Result<PsoOutcome>
where
    F: Fn(&[f64], u64) -> f64 + Sync,
{
    cfg.validate()?;
    let mut swarm = Swarm::init(cfg);
    let mut trace = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        trace.push(swarm.evaluate(cfg, fitness, exec));
        if saturated(&trace, cfg) {
            converged = true;
            break;
        }
        let neighbors = swarm.step(cfg);
        if record_history {
            history.push(IterationRecord { swarm: swarm.particles.clone(), neighbors });
        }
    }
    let best = swarm.best().clone();
    Ok(PsoOutcome {
        best_position: best.p_best,
        best_fitness: best.p_best_mean_fitness,
        trace,
        converged,
        swarm: swarm.particles,
        history,
    })
}

/// Box containing every shipped policy: `a, b, d, f, g_pol` in `[0, 10]`,
/// `t_max` in `[T1/2, 2 T1]`, `D_th` in `[0, m_r]`, `C_0` in `[0, 200]`.
pub fn machine_search_box(t1: f64, m_r: u32) -> Result<SearchBox> {
    SearchBox::new(
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.5 * t1, 0.0, 0.0],
        vec![10.0, 10.0, 10.0, 10.0, 10.0, 2.0 * t1, f64::from(m_r), 200.0],
    )
}

/// Position to policy parameters: reals pass through, `D_th` and `C_0` are
/// rounded to the nearest integer and clamped to `[0, m_r]` and `[0, inf)`.
pub fn decode_position(position: &[f64], m_r: u32) -> Result<MachinePolicyParams> {
    if position.len() != MachinePolicyParams::DIM {
        return Err(Error::InvalidConfig(format!(
            "policy position has {} coordinates, expected {}",
            position.len(),
            MachinePolicyParams::DIM
        )));
    }
    if position.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("non-finite policy position {position:?}")));
    }
    let params = MachinePolicyParams {
        a: position[0],
        b: position[1],
        d: position[2],
        f: position[3],
        g_pol: position[4],
        t_max: position[5],
        d_th: position[6].round().clamp(0.0, f64::from(m_r)) as u32,
        c0: position[7].round().max(0.0).min(f64::from(u32::MAX)) as u32,
    };
    params.validate(m_r)?;
    Ok(params)
}

/// Position to a waiting-time density on `grid`: the value at `t = 0` is
/// fixed at zero and the position holds the remaining values (negative
/// entries are clipped to zero).
pub fn decode_shape(position: &[f64], grid: &[f64]) -> Result<ShapedTimeDensity> {
    if position.len() + 1 != grid.len() {
        return Err(Error::InvalidConfig(format!(
            "shape position has {} values for a {}-point grid",
            position.len(),
            grid.len()
        )));
    }
    let values = std::iter::once(0.0).chain(position.iter().map(|v| v.max(0.0))).collect();
    ShapedTimeDensity::new(grid.to_vec(), values)
}

/// What a swarm position encodes.
#[derive(Debug, Clone, PartialEq)]
pub enum SearchSpace {
    /// The 8-vector of a uniform-tail machine policy.
    Machine,
    /// Tail density values of a machine policy with fixed `base` parameters.
    Shape { base: MachinePolicyParams, grid: Vec<f64> },
}

impl SearchSpace {
    pub fn dim(&self) -> usize {
        match self {
            SearchSpace::Machine => MachinePolicyParams::DIM,
            SearchSpace::Shape { grid, .. } => grid.len() - 1,
        }
    }

    pub fn decode(&self, position: &[f64]) -> Result<Policy> {
        match self {
            SearchSpace::Machine => Ok(Policy::machine(decode_position(position, MACHINE_REPEATS)?)),
            SearchSpace::Shape { base, grid } => {
                let policy = Policy::machine_shaped(*base, decode_shape(position, grid)?);
                policy.validate()?;
                Ok(policy)
            }
        }
    }

    pub fn default_box(&self, t1: f64) -> Result<SearchBox> {
        match self {
            SearchSpace::Machine => machine_search_box(t1, MACHINE_REPEATS),
            SearchSpace::Shape { grid, .. } => SearchBox::new(vec![0.0; grid.len() - 1], vec![1.0; grid.len() - 1]),
        }
    }
}

/// How fitness is estimated: `k_trials` episodes of `n_u` settings each,
/// with the prior, relaxation times, readout error and SMC size of
/// `ensemble`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessSpec {
    pub k_trials: usize,
    pub n_u: u32,
    pub ensemble: EnsembleConfig,
}

impl FitnessSpec {
    pub fn new(ensemble: EnsembleConfig) -> Self {
        Self { k_trials: 2000, n_u: 200, ensemble }
    }

    /// Ensemble settings for one evaluation of `policy` with `seed`.
    pub fn ensemble_for(&self, policy: &Policy, seed: u64) -> EnsembleConfig {
        EnsembleConfig {
            n_samples: self.k_trials,
            shot_budget: self.n_u * policy.repeats(),
            record_stride: None,
            master_seed: seed,
            ..self.ensemble.clone()
        }
    }
}

/// Negative median squared error of the final `omega_r` estimate.
pub fn evaluate_policy_fitness(policy: &Policy, spec: &FitnessSpec, seed: u64, exec: Execution) -> Result<f64> {
    let mut errs = final_sq_errors(&spec.ensemble_for(policy, seed), policy, exec)?;
    Ok(-median(&mut errs))
}

/// Fitness of a swarm position; infeasible positions score `-inf`.
pub fn evaluate_fitness(position: &[f64], space: &SearchSpace, spec: &FitnessSpec, seed: u64, exec: Execution) -> f64 {
    space
        .decode(position)
        .and_then(|policy| evaluate_policy_fitness(&policy, spec, seed, exec))
        .unwrap_or(f64::NEG_INFINITY)
}

/// Negative squared distance to `optimum`: the sanity benchmark.
pub fn sphere(position: &[f64], optimum: &[f64]) -> f64 {
    -position.iter().zip(optimum).map(|(x, o)| (x - o).powi(2)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::SmcConfig;
    use crate::store::PolicyStore;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_box(dim: usize) -> SearchBox {
        SearchBox::new(vec![-5.0; dim], vec![5.0; dim]).unwrap()
    }

    #[test]
    fn sphere_converges_in_every_dimension() {
        for dim in 1..=4 {
            let optimum: Vec<f64> = (0..dim).map(|k| 1.5 - 0.7 * k as f64).collect();
            let cfg = PsoConfig { seed: 11, ..PsoConfig::new(unit_box(dim)) };
            let out = pso_optimize(&cfg, &|p: &[f64], _| sphere(p, &optimum), Execution::Sequential, false).unwrap();
            assert!(out.trace.len() <= 200);
            let dist = (-sphere(&out.best_position, &optimum)).sqrt();
            assert!(dist < 1e-2, "dim {dim}: distance {dist}");
        }
    }

    #[test]
    fn constant_fitness_saturates_after_one_window() {
        let cfg = PsoConfig::new(unit_box(2));
        let out = pso_optimize(&cfg, &|_: &[f64], _| -3.0, Execution::Sequential, false).unwrap();
        assert!(out.converged);
        assert_eq!(out.trace.len(), cfg.window + 1);
    }

    #[test]
    fn frozen_swarm_does_not_move() {
        let cfg = PsoConfig { w: 0.0, beta1: 0.0, beta2: 0.0, ..PsoConfig::new(unit_box(3)) };
        let mut swarm = Swarm::init(&cfg);
        swarm.particles[0].velocity = vec![1.0, -2.0, 0.5];
        swarm.evaluate(&cfg, &|p: &[f64], _| sphere(p, &[0.0; 3]), Execution::Sequential);
        let before: Vec<_> = swarm.particles.iter().map(|p| p.position.clone()).collect();
        swarm.step(&cfg);
        let after: Vec<_> = swarm.particles.iter().map(|p| p.position.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn far_attractor_moves_exactly_v_max() {
        let b = SearchBox::new(vec![-100.0], vec![100.0]).unwrap();
        let cfg = PsoConfig { n_pso: 2, v_max: vec![0.5], ..PsoConfig::new(b) };
        let mut swarm = vec![SwarmParticle::at(vec![0.0]), SwarmParticle::at(vec![90.0])];
        update_personal_best(&mut swarm[0], -1e4, || None);
        update_personal_best(&mut swarm[1], 0.0, || None);
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(0), ChaCha8Rng::seed_from_u64(1)];
        pso_step(&mut swarm, &cfg, &mut rngs);
        assert_eq!(swarm[0].position[0], 0.5);
        assert_eq!(swarm[0].velocity[0], 0.5);
    }

    #[test]
    fn leaving_the_box_clamps_and_zeroes_velocity() {
        let b = SearchBox::new(vec![0.0], vec![1.0]).unwrap();
        let cfg = PsoConfig { n_pso: 2, v_max: vec![10.0], ..PsoConfig::new(b) };
        let mut swarm = vec![SwarmParticle::at(vec![0.9]), SwarmParticle::at(vec![0.95])];
        swarm[0].velocity = vec![5.0];
        update_personal_best(&mut swarm[0], -1.0, || None);
        update_personal_best(&mut swarm[1], -2.0, || None);
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(0), ChaCha8Rng::seed_from_u64(1)];
        pso_step(&mut swarm, &cfg, &mut rngs);
        assert_eq!(swarm[0].position[0], 1.0);
        assert_eq!(swarm[0].velocity[0], 0.0);
    }

    #[test]
    fn two_particle_trajectory_by_hand() {
        // 1-D fitness -(x - 2)^2, particles at 0 and 3, scalar xi draws.
        let b = SearchBox::new(vec![-10.0], vec![10.0]).unwrap();
        let cfg = PsoConfig { n_pso: 2, ..PsoConfig::new(b) };
        let f = |x: f64| -(x - 2.0).powi(2);
        let mut swarm = vec![SwarmParticle::at(vec![0.0]), SwarmParticle::at(vec![3.0])];
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(5), ChaCha8Rng::seed_from_u64(6)];
        let mut shadow = rngs.clone();

        // Hand computation.
        let (mut x, mut v, mut pb, mut pf) = ([0.0, 3.0], [0.0, 0.0], [0.0, 3.0], [f(0.0), f(3.0)]);
        for _ in 0..2 {
            for i in 0..2 {
                if f(x[i]) > pf[i] {
                    pb[i] = x[i];
                    pf[i] = f(x[i]);
                }
            }
            let nb = if pf[0] >= pf[1] { pb[0] } else { pb[1] };
            for i in 0..2 {
                let (xi1, xi2) = (shadow[i].random::<f64>(), shadow[i].random::<f64>());
                v[i] = (0.7 * v[i] + 0.5 * xi1 * (pb[i] - x[i]) + 1.0 * xi2 * (nb - x[i])).clamp(-5.0, 5.0);
                x[i] += v[i];
            }
        }

        for _ in 0..2 {
            for p in swarm.iter_mut() {
                let (s, r) = (f(p.position[0]), f(p.p_best[0]));
                update_personal_best(p, s, || Some(r));
            }
            pso_step(&mut swarm, &cfg, &mut rngs);
        }
        for i in 0..2 {
            assert!((swarm[i].position[0] - x[i]).abs() < 1e-15);
            assert!((swarm[i].velocity[0] - v[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn running_average_and_replacement() {
        let mut p = SwarmParticle::at(vec![1.0]);
        update_personal_best(&mut p, -4.0, || unreachable!());
        assert_eq!((p.p_best_mean_fitness, p.p_best_eval_count), (-4.0, 1));
        p.position = vec![2.0];
        update_personal_best(&mut p, -10.0, || Some(-2.0));
        assert_eq!((p.p_best_mean_fitness, p.p_best_eval_count), (-3.0, 2));
        assert_eq!(p.p_best, vec![1.0]);
        update_personal_best(&mut p, -2.5, || Some(-3.0));
        assert_eq!((p.p_best_mean_fitness, p.p_best_eval_count), (-2.5, 1));
        assert_eq!(p.p_best, vec![2.0]);
    }

    #[test]
    fn deterministic_and_schedule_independent() {
        let cfg = PsoConfig { max_iters: 15, seed: 3, ..PsoConfig::new(unit_box(2)) };
        // Noisy fitness that depends on the evaluation seed.
        let noisy = |p: &[f64], seed: u64| sphere(p, &[1.0, 1.0]) + (seed % 1000) as f64 * 1e-4;
        let a = pso_optimize(&cfg, &noisy, Execution::Sequential, false).unwrap();
        let b = pso_optimize(&cfg, &noisy, Execution::Parallel, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn without_social_term_particles_evolve_independently() {
        let mk = |n| PsoConfig { n_pso: n, beta2: 0.0, seed: 9, ..PsoConfig::new(unit_box(3)) };
        let f = |p: &[f64], _| sphere(p, &[0.5, -0.5, 2.0]);
        let run = |cfg: &PsoConfig| {
            let mut s = Swarm::init(cfg);
            for _ in 0..8 {
                s.evaluate(cfg, &f, Execution::Sequential);
                s.step(cfg);
            }
            s.particles
        };
        let small = run(&mk(4));
        let large = run(&mk(6));
        assert_eq!(small[..], large[..4]);
    }

    #[test]
    fn history_respects_clamp_and_ring() {
        let cfg = PsoConfig { max_iters: 30, seed: 2, ..PsoConfig::new(unit_box(4)) };
        let out = pso_optimize(&cfg, &|p: &[f64], _| sphere(p, &[3.0; 4]), Execution::Sequential, true).unwrap();
        assert!(!out.history.is_empty());
        for rec in &out.history {
            for (i, p) in rec.swarm.iter().enumerate() {
                assert!(p.velocity.iter().zip(&cfg.v_max).all(|(v, m)| v.abs() <= *m));
                assert!(cfg.search_box.contains(&p.position));
                assert_eq!(rec.neighbors[i], ring_best(&rec.swarm, i));
            }
        }
    }

    #[test]
    fn config_invariants() {
        let ok = PsoConfig::new(unit_box(2));
        assert!(ok.validate().is_ok());
        assert_eq!(ok.v_max, vec![2.5, 2.5]);
        assert!(PsoConfig { n_pso: 1, ..ok.clone() }.validate().is_err());
        assert!(PsoConfig { w: 1.0, ..ok.clone() }.validate().is_err());
        assert!(PsoConfig { beta2: 0.0, ..ok.clone() }.validate().is_err());
        assert!(PsoConfig { v_max: vec![1.0, 0.0], ..ok }.validate().is_err());
    }

    #[test]
    fn decode_rules() {
        let p = decode_position(&[1.0, 2.0, 3.0, 4.0, 5.0, 60.0, 5.6, 120.4], 10).unwrap();
        assert_eq!((p.a, p.t_max, p.d_th, p.c0), (1.0, 60.0, 6, 120));
        let p = decode_position(&[0.0, 0.0, 0.0, 0.0, 0.0, 60.0, 13.0, -4.0], 10).unwrap();
        assert_eq!((p.d_th, p.c0), (10, 0));
        assert!(decode_position(&[1.0; 7], 10).is_err());
        for rec in PolicyStore::builtin().records() {
            assert_eq!(decode_position(&rec.params().to_vec(), 10).unwrap(), rec.params());
        }
    }

    #[test]
    fn shipped_rows_lie_in_the_default_box() {
        for rec in PolicyStore::builtin().records() {
            let n_r: f64 = rec.policy_id.split('_').nth(2).unwrap().parse().unwrap();
            let b = machine_search_box(crate::harness::t1_from_rabi_cycles(n_r, 1.0), 10).unwrap();
            assert!(b.contains(&rec.params().to_vec()), "{}", rec.policy_id);
        }
    }

    #[test]
    fn infeasible_positions_score_negative_infinity() {
        let spec = FitnessSpec::new(EnsembleConfig::for_rabi_cycles(8.0, "x"));
        let pos = [1.0, 1.0, 1.0, 1.0, 1.0, -3.0, 5.0, 10.0];
        assert_eq!(evaluate_fitness(&pos, &SearchSpace::Machine, &spec, 0, Execution::Sequential), f64::NEG_INFINITY);
        let grid = crate::policies::build_time_grid(16, 25.0, 25.0).unwrap();
        let shape = SearchSpace::Shape { base: PolicyStore::builtin().get("mach_u_8_2").unwrap().params(), grid };
        assert_eq!(evaluate_fitness(&[0.0; 15], &shape, &spec, 0, Execution::Sequential), f64::NEG_INFINITY);
    }

    #[test]
    fn fitness_is_seed_deterministic_and_nonpositive() {
        let mut ens = EnsembleConfig::for_rabi_cycles(8.0, "x");
        ens.smc = SmcConfig { n_particles: 300, ..Default::default() };
        let spec = FitnessSpec { k_trials: 8, n_u: 10, ensemble: ens };
        let pos = PolicyStore::builtin().get("mach_u_8_2").unwrap().params().to_vec();
        let a = evaluate_fitness(&pos, &SearchSpace::Machine, &spec, 4, Execution::Sequential);
        let b = evaluate_fitness(&pos, &SearchSpace::Machine, &spec, 4, Execution::Parallel);
        assert_eq!(a, b);
        assert!(a <= 0.0 && a.is_finite());
    }

    proptest! {
        #[test]
        fn integer_coordinates_pass_through(
            reals in proptest::collection::vec(0.0f64..10.0, 5), t in 1.0f64..100.0, d_th in 0u32..=10, c0 in 0u32..300,
        ) {
            let mut v = reals.clone();
            v.extend([t, f64::from(d_th), f64::from(c0)]);
            let p = decode_position(&v, 10).unwrap();
            prop_assert_eq!(p.to_vec(), v);
        }
    }
}
