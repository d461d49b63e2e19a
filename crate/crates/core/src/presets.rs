//! Named ensemble studies behind the published figures.
//!
//! Each preset expands to labelled runs; a run is a complete
//! [`EnsembleConfig`] whose `policy_id` names the policy to resolve.
//!
//! * `fig2` — `n_R = 20`: manual, random and `mach_u_20_2`.
//! * `fig3e` — `mach_u_<n_R>_2` for `n_R` in 20, 12, 8, 2.
//! * `fig4` — initial frequency spread `sigma_omega0` in 2, 10, 20 for each
//!   `n_R`, with the matching `mach_u_<n_R>_<sigma>` policies.
//! * `fig5a`..`fig5d` — readout error `P_e = 0.1` with `mach_u_<n_R>_2_re`
//!   for presumed `n_R` = 20, 12, 8, 2 and true relaxation times at or below
//!   the presumed one.

use crate::error::{Error, Result};
use crate::harness::{t1_from_rabi_cycles, EnsembleConfig};
use crate::inference::PriorSpec;

pub const NAMES: [&str; 7] = ["fig2", "fig3e", "fig4", "fig5a", "fig5b", "fig5c", "fig5d"];

const RABI_CYCLES: [u32; 4] = [20, 12, 8, 2];

/// Readout error used by the `fig5*` studies.
pub const READOUT_ERROR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct PresetRun {
    pub label: String,
    pub config: EnsembleConfig,
}

fn run(label: String, config: EnsembleConfig) -> PresetRun {
    PresetRun { label, config }
}

/// True `T1 mu_g0 / pi` values studied against a presumed `n_R`.
pub fn mismatch_cycles(presumed: u32) -> [f64; 3] {
    match presumed {
        20 => [20.0, 16.0, 12.0],
        12 => [12.0, 8.0, 6.0],
        8 => [8.0, 6.0, 4.0],
        _ => [2.0, 1.0, 0.5],
    }
}

pub fn preset(name: &str) -> Result<Vec<PresetRun>> {
    let runs = match name {
        "fig2" => ["man", "rand", "mach_u_20_2"]
            .iter()
            .map(|id| run(id.to_string(), EnsembleConfig::for_rabi_cycles(20.0, id)))
            .collect(),
        "fig3e" => RABI_CYCLES
            .iter()
            .map(|n| {
                let id = format!("mach_u_{n}_2");
                run(id.clone(), EnsembleConfig::for_rabi_cycles(f64::from(*n), &id))
            })
            .collect(),
        "fig4" => {
            let mut runs = Vec::new();
            for n in RABI_CYCLES {
                for sigma in [2u32, 10, 20] {
                    let id = format!("mach_u_{n}_{sigma}");
                    let mut cfg = EnsembleConfig::for_rabi_cycles(f64::from(n), &id);
                    cfg.prior = PriorSpec { sigma_omega0: f64::from(sigma), ..PriorSpec::default() };
                    runs.push(run(id, cfg));
                }
            }
            runs
        }
        "fig5a" | "fig5b" | "fig5c" | "fig5d" => {
            let presumed = match name {
                "fig5a" => 20,
                "fig5b" => 12,
                "fig5c" => 8,
                _ => 2,
            };
            let id = format!("mach_u_{presumed}_2_re");
            mismatch_cycles(presumed)
                .iter()
                .map(|true_cycles| {
                    let mut cfg = EnsembleConfig::for_rabi_cycles(f64::from(presumed), &id);
                    cfg.p_e = READOUT_ERROR;
                    cfg.presumed_t1 = cfg.true_t1;
                    cfg.true_t1 = Some(t1_from_rabi_cycles(*true_cycles, cfg.prior.mu_g0));
                    run(format!("{id}_true_{true_cycles}"), cfg)
                })
                .collect()
        }
        _ => {
            return Err(Error::Domain(format!(
                "unknown preset `{name}`; available: {}",
                NAMES.join(", ")
            )))
        }
    };
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{resolve_policy, PolicyStore};
    use std::f64::consts::PI;

    #[test]
    fn every_preset_resolves_against_the_builtin_store() {
        let store = PolicyStore::builtin();
        for name in NAMES {
            let runs = preset(name).unwrap();
            assert!(!runs.is_empty());
            for r in runs {
                r.config.validate().unwrap();
                resolve_policy(&r.config.policy_id, &store, None).unwrap();
            }
        }
        assert!(preset("fig9").is_err());
    }

    #[test]
    fn fig5d_uses_short_true_relaxation() {
        let runs = preset("fig5d").unwrap();
        let trues: Vec<f64> = runs.iter().map(|r| r.config.true_t1() / PI).collect();
        assert!(trues.iter().zip([2.0, 1.0, 0.5]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(runs.iter().all(|r| (r.config.presumed_t1() - 2.0 * PI).abs() < 1e-12 && r.config.p_e == 0.1));
    }

    #[test]
    fn fig4_widens_the_prior() {
        let runs = preset("fig4").unwrap();
        assert_eq!(runs.len(), 12);
        assert_eq!(runs[2].label, "mach_u_20_20");
        assert_eq!(runs[2].config.prior.sigma_omega0, 20.0);
    }
}
