use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use qest_core::harness::{episode_rng, run_ensemble, run_episode, sample_true_system, EnsembleConfig};
use qest_core::policies::{ManualPolicyParams, ShapedTimeDensity};
use qest_core::presets::preset;
use qest_core::store::{format_value, resolve_policy, PolicyStore, STORE_ENV};
use qest_core::{Error, Execution};

use crate::manifest::RunManifest;
use crate::{Cli, Command, EnsembleArgs, EstimateArgs, Overrides, PoliciesCommand};

/// Problems with how the tool was invoked rather than with the model.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::UnknownPolicy { .. }
                | Error::DuplicatePolicy(_)
                | Error::Domain(_)
                | Error::InvalidConfig(_)
                | Error::DegeneratePosterior(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        configure_workers(n)?;
    }
    let store_path = cli.store.clone().or_else(|| std::env::var_os(STORE_ENV).map(PathBuf::from));
    match cli.command {
        Command::Estimate(args) => estimate(args, store_path.as_deref()),
        Command::Ensemble(args) => ensemble(args, store_path.as_deref()),
        Command::Train(args) => crate::train::train(args, store_path.as_deref()),
        Command::Policies(cmd) => policies(cmd, store_path.as_deref()),
    }
}

#[cfg(feature = "parallel")]
fn configure_workers(n: usize) -> Result<()> {
    if n == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow::anyhow!("configuring worker pool: {e}"))
}

#[cfg(not(feature = "parallel"))]
fn configure_workers(n: usize) -> Result<()> {
    if n == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    Ok(())
}

pub fn load_store(path: Option<&Path>) -> Result<PolicyStore> {
    match path {
        Some(p) => PolicyStore::load_or_builtin(p).with_context(|| format!("reading policy store {}", p.display())),
        None => Ok(PolicyStore::builtin()),
    }
}

pub fn require_store_path(path: Option<&Path>) -> Result<&Path> {
    path.ok_or_else(|| usage(format!("no writable policy store: pass --store or set {STORE_ENV}")))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn apply_overrides(cfg: &mut EnsembleConfig, o: &Overrides) {
    let finite = |t: f64| Some(t).filter(|t| t.is_finite());
    if let Some(p) = &o.policy {
        cfg.policy_id.clone_from(p);
    }
    if let Some(s) = o.seed {
        cfg.master_seed = s;
    }
    if let Some(n) = o.samples {
        cfg.n_samples = n;
    }
    if let Some(n) = o.shots {
        cfg.shot_budget = n;
    }
    if let Some(t) = o.true_t1 {
        cfg.true_t1 = finite(t);
    }
    if let Some(t) = o.presumed_t1 {
        cfg.presumed_t1 = finite(t);
    }
    if let Some(p) = o.pe {
        cfg.p_e = p;
    }
    if let Some(n) = o.particles {
        cfg.smc.n_particles = n;
    }
    if let Some(s) = o.stride {
        cfg.record_stride = Some(s);
    }
    if let Some(d) = &o.density {
        cfg.density_file = Some(d.display().to_string());
    }
}

fn load_density(cfg: &EnsembleConfig) -> Result<Option<ShapedTimeDensity>> {
    cfg.density_file
        .as_ref()
        .map(|p| {
            let file = fs::File::open(p).with_context(|| format!("opening density {p}"))?;
            ShapedTimeDensity::read_csv(file).with_context(|| format!("reading density {p}"))
        })
        .transpose()
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_file(dir: &Path, name: &str, write: impl FnOnce(fs::File) -> qest_core::Result<()>) -> Result<String> {
    let path = dir.join(name);
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write(file).with_context(|| format!("writing {}", path.display()))?;
    Ok(name.to_string())
}

#[derive(Serialize)]
struct EpisodeSummary {
    episode: u64,
    g0: f64,
    omega_r0: f64,
    true_t1: Option<f64>,
    presumed_t1: Option<f64>,
    p_e: f64,
    policy_id: String,
    final_sq_err_omega: f64,
    final_sq_err_g: f64,
    degenerate_events: u32,
    halted: bool,
}

fn estimate(args: EstimateArgs, store_path: Option<&Path>) -> Result<()> {
    let mut cfg: EnsembleConfig = read_json(&args.config)?;
    apply_overrides(&mut cfg, &args.overrides);
    cfg.validate()?;
    let store = load_store(store_path)?;
    let policy = resolve_policy(&cfg.policy_id, &store, load_density(&cfg)?.as_ref())?;

    let mut rng = episode_rng(cfg.master_seed, args.episode);
    let truth = sample_true_system(&cfg.prior, cfg.true_t1(), cfg.p_e, &mut rng)?;
    let trace = run_episode(&policy, &truth, &cfg, &mut rng)?;

    create_out_dir(&args.out)?;
    let mut manifest = RunManifest::new("estimate", &args.out, cfg.master_seed, &(&cfg, args.episode))?;
    manifest.config_path = Some(args.config.display().to_string());
    manifest.outputs.push(write_file(&args.out, "trace.csv", |f| trace.write_csv(f))?);
    let last = trace.final_row();
    let summary = EpisodeSummary {
        episode: args.episode,
        g0: truth.g0,
        omega_r0: truth.omega_r0,
        true_t1: cfg.true_t1,
        presumed_t1: Some(cfg.presumed_t1()).filter(|t| t.is_finite()),
        p_e: cfg.p_e,
        policy_id: cfg.policy_id.clone(),
        final_sq_err_omega: last.sq_err_omega,
        final_sq_err_g: last.sq_err_g,
        degenerate_events: trace.degenerate_events,
        halted: trace.halted,
    };
    fs::write(args.out.join("episode.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    manifest.outputs.push("episode.json".into());
    manifest.write(&args.out)?;
    println!(
        "{}: {} shots, final squared error omega_r {:.3e}, g {:.3e}",
        cfg.policy_id, last.shot, last.sq_err_omega, last.sq_err_g
    );
    Ok(())
}

#[derive(Serialize)]
struct CurveSummary {
    label: String,
    policy_id: String,
    true_t1: Option<f64>,
    presumed_t1: Option<f64>,
    p_e: f64,
    n_samples: usize,
    shot_budget: u32,
    final_normalized_sq_err_omega: f64,
    final_normalized_sq_err_g: f64,
    prior_median_sq_err_omega: f64,
    degenerate_events: u64,
    halted_episodes: u64,
}

fn ensemble(args: EnsembleArgs, store_path: Option<&Path>) -> Result<()> {
    let mut runs: Vec<(String, EnsembleConfig)> = Vec::new();
    let mut config_path = None;
    if let Some(name) = &args.preset {
        if args.overrides.policy.is_some() {
            return Err(usage("--policy cannot be combined with --preset"));
        }
        for r in preset(name)? {
            runs.push((r.label, r.config));
        }
    } else {
        let path = args.config.as_ref().expect("clap requires --config or --preset");
        config_path = Some(path.display().to_string());
        let cfg: EnsembleConfig = read_json(path)?;
        match &args.mismatch {
            Some(list) => {
                let presumed = cfg.presumed_t1();
                for t in list {
                    let cfg = EnsembleConfig {
                        true_t1: Some(*t).filter(|t| t.is_finite()),
                        presumed_t1: Some(presumed).filter(|t| t.is_finite()),
                        ..cfg.clone()
                    };
                    runs.push((format!("true_t1_{t}"), cfg));
                }
            }
            None => runs.push(("curve".into(), cfg)),
        }
    }
    for (_, cfg) in runs.iter_mut() {
        apply_overrides(cfg, &args.overrides);
        cfg.validate()?;
    }
    let store = load_store(store_path)?;
    let policies = runs
        .iter()
        .map(|(_, cfg)| resolve_policy(&cfg.policy_id, &store, load_density(cfg)?.as_ref()).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;

    create_out_dir(&args.out)?;
    let configs: Vec<&EnsembleConfig> = runs.iter().map(|(_, c)| c).collect();
    let seed = runs[0].1.master_seed;
    let mut manifest = RunManifest::new("ensemble", &args.out, seed, &configs)?;
    manifest.config_path = config_path;
    manifest.preset.clone_from(&args.preset);
    let mut summaries = Vec::new();
    for ((label, cfg), policy) in runs.iter().zip(&policies) {
        let curve = run_ensemble(cfg, policy, Execution::default())?;
        manifest.outputs.push(write_file(&args.out, &format!("{label}.csv"), |f| curve.write_csv(f))?);
        println!(
            "{label}: normalized median squared error {:.3e} after {} shots ({} episodes)",
            curve.final_omega(),
            curve.shots.last().unwrap(),
            cfg.n_samples
        );
        summaries.push(CurveSummary {
            label: label.clone(),
            policy_id: cfg.policy_id.clone(),
            true_t1: cfg.true_t1,
            presumed_t1: Some(cfg.presumed_t1()).filter(|t| t.is_finite()),
            p_e: cfg.p_e,
            n_samples: cfg.n_samples,
            shot_budget: cfg.shot_budget,
            final_normalized_sq_err_omega: curve.final_omega(),
            final_normalized_sq_err_g: *curve.g.last().unwrap(),
            prior_median_sq_err_omega: curve.prior_median_sq_err_omega,
            degenerate_events: curve.degenerate_events,
            halted_episodes: curve.halted_episodes,
        });
    }
    fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summaries)? + "\n")?;
    manifest.outputs.push("summary.json".into());
    manifest.write(&args.out)?;
    Ok(())
}

fn policies(cmd: PoliciesCommand, store_path: Option<&Path>) -> Result<()> {
    let store = load_store(store_path)?;
    match cmd {
        PoliciesCommand::List => {
            println!("man\tbaseline");
            println!("rand\tbaseline");
            for r in store.records() {
                println!("{}\t{}", r.policy_id, if r.is_builtin() { "built-in" } else { "learned" });
            }
        }
        PoliciesCommand::Show { id } => show(&store, &id, store_path)?,
        PoliciesCommand::Import { file } => {
            let path = require_store_path(store_path)?;
            let text = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let incoming = PolicyStore::read_csv(text.as_slice())?;
            let mut store = store;
            let (mut added, mut unchanged) = (0, 0);
            for rec in incoming.records() {
                match store.get(&rec.policy_id) {
                    Some(existing) if existing == rec => unchanged += 1,
                    _ => {
                        store.insert(rec.clone())?;
                        added += 1;
                    }
                }
            }
            store.save(path).with_context(|| format!("writing {}", path.display()))?;
            println!("imported {added} policies ({unchanged} already present) into {}", path.display());
        }
        PoliciesCommand::Export { file } => {
            store.save(&file).with_context(|| format!("writing {}", file.display()))?;
            println!("exported {} policies to {}", store.records().len(), file.display());
        }
    }
    Ok(())
}

fn show(store: &PolicyStore, id: &str, store_path: Option<&Path>) -> Result<()> {
    match id {
        "man" => {
            let p = ManualPolicyParams::default();
            println!("policy_id = man\na = {}\nb = {}\nc = {}\nM_0 = {}\nsource: built-in baseline", p.a, p.b, p.c, p.m0);
        }
        "rand" => {
            let p = ManualPolicyParams::default();
            println!("policy_id = rand\nc = {}\nt ~ U[0, T1]\nsource: built-in baseline", p.c);
        }
        _ => {
            let r = store.get(id).ok_or_else(|| Error::UnknownPolicy {
                id: id.to_string(),
                available: store.available().join(", "),
            })?;
            println!("policy_id = {}", r.policy_id);
            for (name, v) in [("a", r.a), ("b", r.b), ("d", r.d), ("f", r.f), ("g_pol", r.g_pol), ("t_max", r.t_max)] {
                println!("{name} = {}", format_value(v));
            }
            println!("D_th = {}\nC_0 = {}", r.d_th, r.c0);
            let source = if r.is_builtin() {
                "built-in table".to_string()
            } else {
                match store_path {
                    Some(p) => format!("policy store {}", p.display()),
                    None => "policy store".to_string(),
                }
            };
            println!("source: {source}");
        }
    }
    Ok(())
}
