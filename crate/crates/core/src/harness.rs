//! Episodes and ensembles.
//!
//! An episode draws a true system, then loops: the policy picks a setting,
//! the simulator draws a batch outcome, the posterior is updated with the
//! presumed `T1`, and the click counter is advanced. Ensembles run many
//! independent episodes and reduce them to median curves.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{bayes_update, init_cloud, PosteriorStats, PriorSpec, SmcConfig};
use crate::par::{map_indexed, Execution};
use crate::physics::{sample_batch, TrueSystem};
use crate::policies::{Policy, PolicyState};

pub const SCHEMA_VERSION: u32 = 1;

/// `T1` for an excitation that completes `n_r` Rabi cycles at the mean
/// coupling: `T1 * mu_g0 = n_r * pi`.
pub fn t1_from_rabi_cycles(n_r: f64, mu_g0: f64) -> f64 {
    n_r * PI / mu_g0
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_policy() -> String {
    "mach_u_20_2".into()
}

/// Ensemble configuration; the JSON experiment file mirrors these fields.
///
/// `true_t1` and `presumed_t1` use `null` for "no relaxation"; an absent
/// `presumed_t1` means the policy knows the true value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub prior: PriorSpec,
    pub true_t1: Option<f64>,
    #[serde(default)]
    pub presumed_t1: Option<f64>,
    #[serde(default)]
    pub p_e: f64,
    pub n_samples: usize,
    pub shot_budget: u32,
    #[serde(default = "default_policy")]
    pub policy_id: String,
    /// Shots between recorded points; defaults to the policy's batch size.
    #[serde(default)]
    pub record_stride: Option<u32>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub smc: SmcConfig,
    /// Shaped waiting-time density (`t_i,P_t` CSV) for `mach_c_*` policies.
    #[serde(default)]
    pub density_file: Option<String>,
}

impl EnsembleConfig {
    /// Defaults for a given relaxation time, expressed as Rabi cycles.
    pub fn for_rabi_cycles(n_r: f64, policy_id: &str) -> Self {
        let prior = PriorSpec::default();
        Self {
            schema_version: SCHEMA_VERSION,
            prior,
            true_t1: Some(t1_from_rabi_cycles(n_r, prior.mu_g0)),
            presumed_t1: None,
            p_e: 0.0,
            n_samples: 500,
            shot_budget: 2000,
            policy_id: policy_id.to_string(),
            record_stride: None,
            master_seed: 0,
            smc: SmcConfig::default(),
            density_file: None,
        }
    }

    pub fn true_t1(&self) -> f64 {
        self.true_t1.unwrap_or(f64::INFINITY)
    }

    pub fn presumed_t1(&self) -> f64 {
        self.presumed_t1.or(self.true_t1).unwrap_or(f64::INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        self.prior.validate()?;
        self.smc.validate()?;
        if self.n_samples < 1 {
            return bad("n_samples must be at least 1".into());
        }
        if !(self.true_t1() > 0.0) || !(self.presumed_t1() > 0.0) {
            return bad("relaxation times must be positive".into());
        }
        if !(0.0..=0.5).contains(&self.p_e) {
            return bad(format!("p_e must lie in [0, 0.5], got {}", self.p_e));
        }
        if self.record_stride == Some(0) {
            return bad("record_stride must be positive".into());
        }
        Ok(())
    }

    fn stride_for(&self, policy: &Policy) -> Result<u32> {
        let m_r = policy.repeats();
        let stride = self.record_stride.unwrap_or(m_r);
        if !stride.is_multiple_of(m_r) {
            return Err(Error::InvalidConfig(format!(
                "record_stride {stride} is not a multiple of the batch size {m_r}"
            )));
        }
        Ok(stride)
    }

    /// Shot counts at which every episode records a point.
    pub fn record_grid(&self, policy: &Policy) -> Result<Vec<u32>> {
        let stride = self.stride_for(policy)?;
        let m_r = policy.repeats();
        let reachable = self.shot_budget / m_r * m_r;
        Ok((0..=reachable / stride).map(|k| k * stride).collect())
    }
}

/// Ground truth drawn from the same box as the inference prior.
pub fn sample_true_system<R: Rng + ?Sized>(
    prior: &PriorSpec,
    true_t1: f64,
    p_e: f64,
    rng: &mut R,
) -> Result<TrueSystem> {
    prior.validate()?;
    let h = prior.sample(rng);
    TrueSystem::new(h.g, h.omega_r, true_t1, p_e)
}

/// Reproducible per-episode stream: the master seed selects the key, the
/// episode index the ChaCha stream.
pub fn episode_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub shot: u32,
    pub sq_err_omega: f64,
    pub sq_err_g: f64,
    pub sigma_omega: f64,
    pub sigma_g: f64,
    /// Waiting time of the last setting; empty at shot 0.
    pub t: Option<f64>,
    pub omega_q: Option<f64>,
    pub d: Option<u32>,
    pub c: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub truth: TrueSystem,
    pub rows: Vec<TraceRow>,
    /// Batches whose update underflowed and was rolled back, plus a final
    /// halt if the policy could no longer choose a setting.
    pub degenerate_events: u32,
    pub halted: bool,
}

impl EpisodeTrace {
    pub fn final_row(&self) -> &TraceRow {
        self.rows.last().expect("trace always holds the prior point")
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn row(shot: u32, stats: &PosteriorStats, truth: &TrueSystem, state: &PolicyState) -> TraceRow {
    TraceRow {
        shot,
        sq_err_omega: (stats.mu_omega - truth.omega_r0).powi(2),
        sq_err_g: (stats.mu_g - truth.g0).powi(2),
        sigma_omega: stats.sigma_omega,
        sigma_g: stats.sigma_g,
        t: state.last_setting.map(|s| s.t),
        omega_q: state.last_setting.map(|s| s.omega_q),
        d: state.last_d,
        c: state.c,
    }
}

/// One adaptive estimation run against `truth`.
///
/// The shot-0 point uses the analytic prior mean, so every episode starts
/// from the same estimate.
pub fn run_episode<R: Rng + ?Sized>(
    policy: &Policy,
    truth: &TrueSystem,
    cfg: &EnsembleConfig,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    let grid = cfg.record_grid(policy)?;
    let presumed_t1 = cfg.presumed_t1();
    let m_r = policy.repeats();
    let d_th = policy.click_threshold();

    let mut cloud = init_cloud(&cfg.prior, cfg.smc.n_particles, rng)?;
    let mut state = PolicyState::default();
    let prior_stats = PosteriorStats {
        mu_g: cfg.prior.mu_g0,
        sigma_g: cfg.prior.sigma_g0,
        mu_omega: cfg.prior.mu_omega0,
        sigma_omega: cfg.prior.sigma_omega0,
    };
    let mut rows = Vec::with_capacity(grid.len());
    rows.push(row(0, &prior_stats, truth, &state));

    let mut stats = cloud.stats();
    let mut shots = 0;
    let mut degenerate_events = 0;
    let mut halted = false;
    let mut next = 1;
    while next < grid.len() {
        let setting = match policy.next_setting(&stats, &state, &cloud, presumed_t1, rng) {
            Ok(s) => s,
            Err(Error::DegeneratePosterior(_)) => {
                degenerate_events += 1;
                halted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let d = sample_batch(truth, &setting, rng)?;
        match bayes_update(&mut cloud, &setting, d, presumed_t1, cfg.p_e, &cfg.smc, rng) {
            Ok(_) => stats = cloud.stats(),
            Err(Error::DegeneratePosterior(_)) => degenerate_events += 1,
            Err(e) => return Err(e),
        }
        state.register_batch(d, d_th);
        state.last_setting = Some(setting);
        shots += m_r;
        if shots == grid[next] {
            rows.push(row(shots, &stats, truth, &state));
            next += 1;
        }
    }
    // A halted episode keeps its last estimate for the rest of the budget.
    while rows.len() < grid.len() {
        let mut r = rows.last().unwrap().clone();
        r.shot = grid[rows.len()];
        rows.push(r);
    }
    Ok(EpisodeTrace { truth: *truth, rows, degenerate_events, halted })
}

/// Median of a sample; the mean of the two central values for even sizes.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Normalized median squared errors on the record grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub shots: Vec<u32>,
    /// Median squared error of the `omega_r` estimate over the prior-mean value.
    pub omega: Vec<f64>,
    pub g: Vec<f64>,
    /// Median issued waiting time (`NaN` at shot 0).
    pub median_t: Vec<f64>,
    pub prior_median_sq_err_omega: f64,
    pub prior_median_sq_err_g: f64,
    pub degenerate_events: u64,
    pub halted_episodes: u64,
}

impl ErrorCurve {
    pub fn final_omega(&self) -> f64 {
        *self.omega.last().unwrap()
    }

    /// Normalized `omega_r` error at the recorded point closest to `shot`.
    pub fn omega_at(&self, shot: u32) -> f64 {
        let i = self
            .shots
            .iter()
            .enumerate()
            .min_by_key(|(_, s)| s.abs_diff(shot))
            .map(|(i, _)| i)
            .unwrap();
        self.omega[i]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["shot", "median_sq_err_omega", "median_sq_err_g", "median_t"])?;
        for i in 0..self.shots.len() {
            let t = if self.median_t[i].is_nan() { String::new() } else { self.median_t[i].to_string() };
            w.write_record([
                self.shots[i].to_string(),
                self.omega[i].to_string(),
                self.g[i].to_string(),
                t,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-episode columns kept after an ensemble run.
#[derive(Debug, Clone)]
struct Compact {
    sq_err_omega: Vec<f64>,
    sq_err_g: Vec<f64>,
    t: Vec<f64>,
    degenerate_events: u32,
    halted: bool,
}

/// Runs `cfg.n_samples` independent episodes and reduces them.
///
/// Episode `i` uses [`episode_rng`]`(cfg.master_seed, i)` for both its true
/// system and its run, so the result is identical for any worker count.
pub fn run_ensemble(cfg: &EnsembleConfig, policy: &Policy, exec: Execution) -> Result<ErrorCurve> {
    cfg.validate()?;
    policy.validate()?;
    let grid = cfg.record_grid(policy)?;
    let episodes: Vec<Result<Compact>> = map_indexed(cfg.n_samples, exec, |i| {
        let mut rng = episode_rng(cfg.master_seed, i as u64);
        let truth = sample_true_system(&cfg.prior, cfg.true_t1(), cfg.p_e, &mut rng)?;
        let trace = run_episode(policy, &truth, cfg, &mut rng)?;
        Ok(Compact {
            sq_err_omega: trace.rows.iter().map(|r| r.sq_err_omega).collect(),
            sq_err_g: trace.rows.iter().map(|r| r.sq_err_g).collect(),
            t: trace.rows.iter().map(|r| r.t.unwrap_or(f64::NAN)).collect(),
            degenerate_events: trace.degenerate_events,
            halted: trace.halted,
        })
    });
    let episodes = episodes.into_iter().collect::<Result<Vec<_>>>()?;

    let column = |k: usize, f: &dyn Fn(&Compact) -> &Vec<f64>| -> f64 {
        let mut v: Vec<f64> = episodes.iter().map(|e| f(e)[k]).collect();
        median(&mut v)
    };
    let prior_omega = column(0, &|e| &e.sq_err_omega);
    let prior_g = column(0, &|e| &e.sq_err_g);
    let mut curve = ErrorCurve {
        shots: grid.clone(),
        omega: Vec::with_capacity(grid.len()),
        g: Vec::with_capacity(grid.len()),
        median_t: Vec::with_capacity(grid.len()),
        prior_median_sq_err_omega: prior_omega,
        prior_median_sq_err_g: prior_g,
        degenerate_events: episodes.iter().map(|e| u64::from(e.degenerate_events)).sum(),
        halted_episodes: episodes.iter().filter(|e| e.halted).count() as u64,
    };
    for k in 0..grid.len() {
        curve.omega.push(column(k, &|e| &e.sq_err_omega) / prior_omega);
        curve.g.push(column(k, &|e| &e.sq_err_g) / prior_g);
        curve.median_t.push(if k == 0 { f64::NAN } else { column(k, &|e| &e.t) });
    }
    Ok(curve)
}

/// Final squared `omega_r` errors of every episode, in episode order.
///
/// Only the last point is kept, so this is the cheap path for fitness
/// evaluation.
pub fn final_sq_errors(cfg: &EnsembleConfig, policy: &Policy, exec: Execution) -> Result<Vec<f64>> {
    cfg.validate()?;
    policy.validate()?;
    let cfg = EnsembleConfig { record_stride: Some((cfg.shot_budget / policy.repeats()).max(1) * policy.repeats()), ..cfg.clone() };
    let cfg = &cfg;
    map_indexed(cfg.n_samples, exec, |i| {
        let mut rng = episode_rng(cfg.master_seed, i as u64);
        let truth = sample_true_system(&cfg.prior, cfg.true_t1(), cfg.p_e, &mut rng)?;
        Ok(run_episode(policy, &truth, cfg, &mut rng)?.final_row().sq_err_omega)
    })
    .into_iter()
    .collect()
}

/// Normalized median squared-error curve of the ensemble.
pub fn normalized_median_curve(
    cfg: &EnsembleConfig,
    policy: &Policy,
    exec: Execution,
) -> Result<ErrorCurve> {
    run_ensemble(cfg, policy, exec)
}

/// Median issued waiting time against shot count (shot 0 excluded).
pub fn waiting_time_curve(
    cfg: &EnsembleConfig,
    policy: &Policy,
    exec: Execution,
) -> Result<Vec<(u32, f64)>> {
    let curve = run_ensemble(cfg, policy, exec)?;
    Ok(curve.shots.iter().zip(&curve.median_t).skip(1).map(|(s, t)| (*s, *t)).collect())
}

/// One curve per true `T1`, with the policy and the likelihood both using
/// `presumed_t1` throughout.
pub fn mismatch_study(
    policy: &Policy,
    presumed_t1: f64,
    true_t1_list: &[f64],
    cfg: &EnsembleConfig,
    exec: Execution,
) -> Result<Vec<(f64, ErrorCurve)>> {
    true_t1_list
        .iter()
        .map(|&true_t1| {
            let cfg = EnsembleConfig {
                true_t1: Some(true_t1).filter(|t| t.is_finite()),
                presumed_t1: Some(presumed_t1).filter(|t| t.is_finite()),
                ..cfg.clone()
            };
            Ok((true_t1, run_ensemble(&cfg, policy, exec)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{resolve_policy, PolicyStore};

    fn small_cfg(policy_id: &str) -> EnsembleConfig {
        EnsembleConfig {
            n_samples: 6,
            shot_budget: 100,
            smc: SmcConfig { n_particles: 400, ..Default::default() },
            ..EnsembleConfig::for_rabi_cycles(20.0, policy_id)
        }
    }

    #[test]
    fn true_system_inside_prior_box() {
        let prior = PriorSpec::default();
        let mut rng = episode_rng(1, 0);
        let h = 0.25 * 3f64.sqrt();
        let w = 2.0 * 3f64.sqrt();
        for _ in 0..1000 {
            let s = sample_true_system(&prior, 10.0, 0.0, &mut rng).unwrap();
            assert!(s.g0 >= 1.0 - h && s.g0 <= 1.0 + h);
            assert!(s.omega_r0 >= 30.0 - w && s.omega_r0 <= 30.0 + w);
        }
        let a = sample_true_system(&prior, 10.0, 0.0, &mut episode_rng(4, 2)).unwrap();
        let b = sample_true_system(&prior, 10.0, 0.0, &mut episode_rng(4, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_budget_trace_is_the_prior_point() {
        let cfg = EnsembleConfig { shot_budget: 0, ..small_cfg("man") };
        let truth = TrueSystem::new(1.1, 31.0, cfg.true_t1(), 0.0).unwrap();
        let trace = run_episode(&Policy::manual(), &truth, &cfg, &mut episode_rng(0, 0)).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].shot, 0);
        assert_eq!(trace.rows[0].sq_err_omega, (30.0f64 - 31.0).powi(2));
    }

    #[test]
    fn traces_are_deterministic_and_strictly_increasing() {
        let store = PolicyStore::builtin();
        let cfg = small_cfg("mach_u_20_2");
        let policy = resolve_policy(&cfg.policy_id, &store, None).unwrap();
        let truth = TrueSystem::new(0.9, 29.0, cfg.true_t1(), 0.0).unwrap();
        let a = run_episode(&policy, &truth, &cfg, &mut episode_rng(7, 3)).unwrap();
        let b = run_episode(&policy, &truth, &cfg, &mut episode_rng(7, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 11);
        assert!(a.rows.windows(2).all(|w| w[0].shot < w[1].shot));
        assert!(a.rows[1..].iter().all(|r| r.d.is_some() && r.t.is_some()));
    }

    #[test]
    fn curve_starts_at_one_and_ignores_worker_count() {
        let cfg = small_cfg("rand");
        let policy = Policy::random();
        let seq = run_ensemble(&cfg, &policy, Execution::Sequential).unwrap();
        let par = run_ensemble(&cfg, &policy, Execution::Parallel).unwrap();
        assert_eq!(seq.omega, par.omega);
        assert_eq!(seq.omega[0], 1.0);
        assert_eq!(seq.shots.len(), 101);
        assert!(seq.median_t[0].is_nan());
    }

    #[test]
    fn mismatch_with_equal_times_reduces_to_plain_curve() {
        let cfg = small_cfg("mach_u_20_2");
        let policy = resolve_policy(&cfg.policy_id, &PolicyStore::builtin(), None).unwrap();
        let t1 = cfg.true_t1();
        let plain = run_ensemble(&cfg, &policy, Execution::Sequential).unwrap();
        let study = mismatch_study(&policy, t1, &[t1], &cfg, Execution::Sequential).unwrap();
        assert_eq!(study[0].1.omega, plain.omega);
        assert_eq!(study[0].1.g, plain.g);
        assert_eq!(study[0].1.median_t[1..], plain.median_t[1..]);
    }

    #[test]
    fn median_of_even_and_odd_samples() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn stride_must_align_with_batches() {
        let cfg = EnsembleConfig { record_stride: Some(15), ..small_cfg("mach_u_20_2") };
        let policy = resolve_policy(&cfg.policy_id, &PolicyStore::builtin(), None).unwrap();
        assert!(cfg.record_grid(&policy).is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: EnsembleConfig =
            serde_json::from_str(r#"{"true_t1": 62.83, "n_samples": 10, "shot_budget": 200}"#).unwrap();
        assert_eq!(cfg.presumed_t1(), 62.83);
        assert_eq!(cfg.smc.n_particles, 5000);
        assert_eq!(cfg.policy_id, "mach_u_20_2");
        let none: EnsembleConfig =
            serde_json::from_str(r#"{"true_t1": null, "n_samples": 1, "shot_budget": 1}"#).unwrap();
        assert!(none.true_t1().is_infinite());
        assert!(serde_json::from_str::<EnsembleConfig>(r#"{"n_samples": 1, "shot_budget": 1, "bogus": 2}"#).is_err());
    }
}
