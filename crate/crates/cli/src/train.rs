//! `qest train`: particle swarm search for new policies.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use qest_core::harness::{EnsembleConfig, SCHEMA_VERSION};
use qest_core::policies::{build_time_grid, DEFAULT_GRID_POINTS};
use qest_core::pso::{
    decode_position, decode_shape, evaluate_fitness, pso_optimize, sphere, FitnessSpec, PsoConfig, PsoOutcome,
    Reevaluation, SearchBox, SearchSpace,
};
use qest_core::store::PolicyRecord;
use qest_core::{Error, Execution, MachinePolicyParams, PriorSpec, SmcConfig};

use crate::commands::{load_store, read_json, require_store_path, usage};
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON); every field has a default.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "qest-out")]
    pub out: PathBuf,
    /// Optimize the 4-D sphere benchmark instead of a policy.
    #[arg(long)]
    pub selftest: bool,
    /// Id for the learned policy.
    #[arg(long)]
    pub policy_id: Option<String>,
    /// Swarm size.
    #[arg(long)]
    pub n_pso: Option<usize>,
    /// Episodes per fitness evaluation.
    #[arg(long)]
    pub k_trials: Option<usize>,
    /// Settings per episode.
    #[arg(long)]
    pub n_u: Option<u32>,
    /// Iteration cap; a run that stops here without saturating is flagged.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Swarm master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// SMC particles per posterior.
    #[arg(long)]
    pub particles: Option<usize>,
    /// Relaxation time in Rabi cycles: `T1 mu_g0 = n_R pi`.
    #[arg(long, value_name = "N_R")]
    pub n_r: Option<f64>,
    /// Readout error probability.
    #[arg(long, value_name = "P")]
    pub pe: Option<f64>,
    /// Do not add the learned policy to the store.
    #[arg(long)]
    pub no_store: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// The 8-vector of a uniform-tail machine policy.
    #[default]
    Machine,
    /// Waiting-time density values for a fixed machine policy.
    Shape,
}

fn d_schema() -> u32 {
    SCHEMA_VERSION
}
fn d_policy_id() -> String {
    "mach_u_learned".into()
}
fn d_true_t1() -> f64 {
    20.0 * PI
}
fn d_k_trials() -> usize {
    2000
}
fn d_n_u() -> u32 {
    200
}
fn d_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_schema")]
    pub schema_version: u32,
    #[serde(default = "d_policy_id")]
    pub policy_id: String,
    #[serde(default)]
    pub space: Space,
    /// Store id of the machine policy whose tail a shape search optimizes.
    #[serde(default)]
    pub base_policy: Option<String>,
    #[serde(default = "d_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default = "d_true_t1")]
    pub true_t1: f64,
    #[serde(default)]
    pub presumed_t1: Option<f64>,
    #[serde(default)]
    pub p_e: f64,
    #[serde(default)]
    pub smc: SmcConfig,
    #[serde(default = "d_k_trials")]
    pub k_trials: usize,
    #[serde(default = "d_n_u")]
    pub n_u: u32,
    /// Swarm constants; the search box and `v_max` default from the space.
    #[serde(default)]
    pub pso: PsoOverrides,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsoOverrides {
    pub n_pso: Option<usize>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub w: Option<f64>,
    pub v_max: Option<Vec<f64>>,
    pub search_box: Option<SearchBox>,
    pub tol_rel: Option<f64>,
    pub window: Option<usize>,
    pub max_iters: Option<usize>,
    pub per_coordinate_xi: Option<bool>,
    pub reevaluation: Option<Reevaluation>,
    pub seed: Option<u64>,
}

impl PsoOverrides {
    fn build(&self, default_box: SearchBox) -> PsoConfig {
        let mut cfg = PsoConfig::new(self.search_box.clone().unwrap_or(default_box));
        if let Some(v) = &self.v_max {
            cfg.v_max.clone_from(v);
        }
        cfg.n_pso = self.n_pso.unwrap_or(cfg.n_pso);
        cfg.beta1 = self.beta1.unwrap_or(cfg.beta1);
        cfg.beta2 = self.beta2.unwrap_or(cfg.beta2);
        cfg.w = self.w.unwrap_or(cfg.w);
        cfg.tol_rel = self.tol_rel.unwrap_or(cfg.tol_rel);
        cfg.window = self.window.unwrap_or(cfg.window);
        cfg.max_iters = self.max_iters.unwrap_or(cfg.max_iters);
        cfg.per_coordinate_xi = self.per_coordinate_xi.unwrap_or(cfg.per_coordinate_xi);
        cfg.reevaluation = self.reevaluation.unwrap_or(cfg.reevaluation);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    fn apply(&mut self, a: &TrainArgs) {
        if let Some(id) = &a.policy_id {
            self.policy_id.clone_from(id);
        }
        if let Some(n) = a.n_pso {
            self.pso.n_pso = Some(n);
        }
        if let Some(k) = a.k_trials {
            self.k_trials = k;
        }
        if let Some(n) = a.n_u {
            self.n_u = n;
        }
        if let Some(n) = a.max_iters {
            self.pso.max_iters = Some(n);
        }
        if let Some(s) = a.seed {
            self.pso.seed = Some(s);
        }
        if let Some(n) = a.particles {
            self.smc.n_particles = n;
        }
        if let Some(n_r) = a.n_r {
            self.true_t1 = n_r * PI / self.prior.mu_g0;
        }
        if let Some(p) = a.pe {
            self.p_e = p;
        }
    }

    fn presumed_t1(&self) -> f64 {
        self.presumed_t1.unwrap_or(self.true_t1)
    }

    fn fitness_spec(&self) -> Result<FitnessSpec> {
        if !(self.true_t1.is_finite() && self.presumed_t1().is_finite()) {
            return Err(usage("training needs finite relaxation times"));
        }
        if self.k_trials == 0 || self.n_u == 0 {
            return Err(usage("k_trials and n_u must be positive"));
        }
        let ensemble = EnsembleConfig {
            prior: self.prior,
            true_t1: Some(self.true_t1),
            presumed_t1: self.presumed_t1,
            p_e: self.p_e,
            smc: self.smc,
            ..EnsembleConfig::for_rabi_cycles(20.0, &self.policy_id)
        };
        ensemble.validate()?;
        Ok(FitnessSpec { k_trials: self.k_trials, n_u: self.n_u, ensemble })
    }
}

#[derive(Serialize)]
struct TrainResult<'a> {
    policy_id: &'a str,
    space: Space,
    best_fitness: f64,
    iterations: usize,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<MachinePolicyParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_policy: Option<&'a str>,
    best_position: &'a [f64],
}

const UNSATURATED: &str = "fitness did not saturate before max_iters; returning the best position so far";

fn write_trace(out: &Path, outcome: &PsoOutcome) -> Result<String> {
    let file = fs::File::create(out.join("trace.csv")).context("creating trace.csv")?;
    outcome.write_trace_csv(file)?;
    Ok("trace.csv".into())
}

pub fn train(args: TrainArgs, store_path: Option<&Path>) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    if args.selftest {
        return selftest(&args);
    }
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply(&args);
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(usage(format!("unsupported schema_version {}", cfg.schema_version)));
    }
    let spec = cfg.fitness_spec()?;
    let store = load_store(store_path)?;

    let space = match cfg.space {
        Space::Machine => SearchSpace::Machine,
        Space::Shape => {
            let id = cfg.base_policy.as_deref().ok_or_else(|| usage("a shape search needs base_policy"))?;
            let base = store
                .get(id)
                .ok_or_else(|| Error::UnknownPolicy { id: id.to_string(), available: store.available().join(", ") })?
                .params();
            let grid = build_time_grid(cfg.grid_points, cfg.presumed_t1(), base.t_max)?;
            SearchSpace::Shape { base, grid }
        }
    };
    let writes_store = cfg.space == Space::Machine && !args.no_store;
    if writes_store {
        require_store_path(store_path)?;
        if store.get(&cfg.policy_id).is_some() {
            return Err(Error::DuplicatePolicy(cfg.policy_id.clone()).into());
        }
    }
    let pso = cfg.pso.build(space.default_box(cfg.presumed_t1())?);
    pso.validate()?;

    let fitness = |p: &[f64], seed: u64| evaluate_fitness(p, &space, &spec, seed, Execution::Sequential);
    let outcome = pso_optimize(&pso, &fitness, Execution::default(), false)?;

    let mut manifest = RunManifest::new("train", &args.out, pso.seed, &(&cfg, &pso))?;
    manifest.config_path = args.config.as_ref().map(|p| p.display().to_string());
    manifest.converged = Some(outcome.converged);
    if !outcome.converged {
        manifest.warning = Some(UNSATURATED.into());
        eprintln!("warning: {UNSATURATED}");
    }
    manifest.outputs.push(write_trace(&args.out, &outcome)?);

    let mut result = TrainResult {
        policy_id: &cfg.policy_id,
        space: cfg.space,
        best_fitness: outcome.best_fitness,
        iterations: outcome.trace.len(),
        converged: outcome.converged,
        params: None,
        base_policy: cfg.base_policy.as_deref(),
        best_position: &outcome.best_position,
    };
    match &space {
        SearchSpace::Machine => {
            let params = decode_position(&outcome.best_position, qest_core::policies::MACHINE_REPEATS)
                .map_err(|e| anyhow!("no feasible policy found: {e}"))?;
            result.params = Some(params);
            if writes_store {
                let path = require_store_path(store_path)?;
                let mut store = store.clone();
                store.insert(PolicyRecord::new(cfg.policy_id.clone(), &params))?;
                store.save(path).with_context(|| format!("writing {}", path.display()))?;
                println!("added {} to {}", cfg.policy_id, path.display());
            }
        }
        SearchSpace::Shape { grid, .. } => {
            let density = decode_shape(&outcome.best_position, grid)?;
            let name = format!("{}.csv", cfg.policy_id);
            density.write_csv(fs::File::create(args.out.join(&name))?)?;
            manifest.outputs.push(name);
        }
    }
    fs::write(args.out.join("best.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    manifest.outputs.push("best.json".into());
    manifest.write(&args.out)?;
    println!(
        "{}: best fitness {:.4e} after {} iterations (converged: {})",
        cfg.policy_id,
        outcome.best_fitness,
        outcome.trace.len(),
        outcome.converged
    );
    Ok(())
}

/// Sphere benchmark at the standard swarm constants.
fn selftest(args: &TrainArgs) -> Result<()> {
    let optimum = [1.3, -2.1, 0.4, 3.7];
    let mut pso = PsoConfig::new(SearchBox::new(vec![-5.0; 4], vec![5.0; 4])?);
    pso.seed = args.seed.unwrap_or(0);
    pso.n_pso = args.n_pso.unwrap_or(pso.n_pso);
    pso.max_iters = args.max_iters.unwrap_or(pso.max_iters);
    let outcome = pso_optimize(&pso, &|p: &[f64], _| sphere(p, &optimum), Execution::default(), false)?;
    let distance = (-sphere(&outcome.best_position, &optimum)).sqrt();
    let mut manifest = RunManifest::new("train --selftest", &args.out, pso.seed, &pso)?;
    manifest.converged = Some(outcome.converged);
    manifest.outputs.push(write_trace(&args.out, &outcome)?);
    manifest.write(&args.out)?;
    println!(
        "selftest: distance to optimum {distance:.2e} after {} iterations (within 1e-2: {})",
        outcome.trace.len(),
        distance < 1e-2
    );
    if distance < 1e-2 {
        Ok(())
    } else {
        Err(anyhow!("selftest missed the optimum by {distance:.2e}"))
    }
}
