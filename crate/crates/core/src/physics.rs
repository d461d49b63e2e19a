//! Closed-form outcome probabilities for swap spectroscopy.
//!
//! A qubit prepared in its excited state is tuned to `omega_q`, left to
//! exchange its excitation with a mode at `omega_r` for a time `t`, and then
//! read out. The probability of finding it in the ground state is a function
//! of the detuning `omega_q - omega_r`, the coupling `g` and the qubit
//! relaxation time `T1`. On top of that sits a symmetric readout-flip channel
//! and binomial batching of repeated shots at one setting.
//!
//! Units: frequencies are in multiples of the mean prior coupling, times in
//! its inverse.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Outcome probabilities are clamped to `[EPS, 1 - EPS]` before entering a
/// likelihood so that no hypothesis is ever assigned exactly zero weight.
pub const PROB_EPS: f64 = 1e-12;

/// Ground-truth parameters of one simulated sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueSystem {
    pub g0: f64,
    pub omega_r0: f64,
    /// Qubit relaxation time; `f64::INFINITY` means no relaxation.
    pub t1: f64,
    /// Per-shot readout flip probability.
    pub p_e: f64,
}

impl TrueSystem {
    pub fn new(g0: f64, omega_r0: f64, t1: f64, p_e: f64) -> Result<Self> {
        if !(g0 > 0.0 && g0.is_finite()) {
            return Err(domain(format!("coupling g0 must be positive, got {g0}")));
        }
        if !(omega_r0 > 0.0 && omega_r0.is_finite()) {
            return Err(domain(format!("mode frequency must be positive, got {omega_r0}")));
        }
        validate_t1(t1)?;
        if !(0.0..=0.5).contains(&p_e) {
            return Err(domain(format!("readout error must lie in [0, 0.5], got {p_e}")));
        }
        Ok(Self { g0, omega_r0, t1, p_e })
    }

    pub fn hypothesis(&self) -> HypothesisPoint {
        HypothesisPoint { g: self.g0, omega_r: self.omega_r0 }
    }
}

/// One control choice: qubit frequency, waiting time and the number of
/// shots taken at that setting before the posterior is updated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSetting {
    pub omega_q: f64,
    pub t: f64,
    pub m_r: u32,
}

impl MeasurementSetting {
    pub fn new(omega_q: f64, t: f64, m_r: u32) -> Result<Self> {
        let s = Self { omega_q, t, m_r };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t >= 0.0) || !self.t.is_finite() {
            return Err(domain(format!("waiting time must be finite and >= 0, got {}", self.t)));
        }
        if !self.omega_q.is_finite() {
            return Err(domain("qubit frequency must be finite"));
        }
        if self.m_r == 0 {
            return Err(domain("repeat count m_r must be at least 1"));
        }
        Ok(())
    }
}

/// A candidate `(g, omega_r)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisPoint {
    pub g: f64,
    pub omega_r: f64,
}

impl HypothesisPoint {
    pub fn new(g: f64, omega_r: f64) -> Self {
        Self { g, omega_r }
    }
}

fn validate_t1(t1: f64) -> Result<()> {
    if t1 > 0.0 {
        Ok(())
    } else {
        Err(domain(format!("relaxation time must be positive, got {t1}")))
    }
}

fn validate_hyp(hyp: &HypothesisPoint) -> Result<()> {
    if hyp.g > 0.0 && hyp.g.is_finite() && hyp.omega_r.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("hypothesis needs finite g > 0, got g = {}", hyp.g)))
    }
}

fn validate_prob(p: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(domain(format!("{what} must lie in [0, 1], got {p}")))
    }
}

/// Ground-state probability with qubit relaxation.
///
/// The two detuning-weighted exponentials describe the dressed states
/// decaying at rates `(omega_R +- delta) / (2 omega_R T1)`; the cosine term
/// is the vacuum Rabi oscillation under the `exp(-t / 2T1)` envelope.
/// `t1 = +inf` falls through to [`ground_prob_coherent`].
pub fn ground_prob_relaxing(
    setting: &MeasurementSetting,
    hyp: &HypothesisPoint,
    t1: f64,
) -> Result<f64> {
    setting.validate()?;
    validate_hyp(hyp)?;
    validate_t1(t1)?;
    if t1.is_infinite() {
        return Ok(coherent_unchecked(setting.omega_q - hyp.omega_r, hyp.g, setting.t));
    }
    let half_envelope = (-setting.t / (2.0 * t1)).exp();
    Ok(relaxing_unchecked(
        setting.omega_q - hyp.omega_r,
        hyp.g,
        setting.t,
        setting.t / t1,
        half_envelope,
    ))
}

/// Ground-state probability without relaxation.
pub fn ground_prob_coherent(setting: &MeasurementSetting, hyp: &HypothesisPoint) -> Result<f64> {
    setting.validate()?;
    validate_hyp(hyp)?;
    Ok(coherent_unchecked(setting.omega_q - hyp.omega_r, hyp.g, setting.t))
}

/// `t_over_t1 = t / T1`, `half_envelope = exp(-t / 2T1)`; both depend only on
/// the setting so callers looping over hypotheses hoist them.
#[inline]
fn relaxing_unchecked(delta: f64, g: f64, t: f64, t_over_t1: f64, half_envelope: f64) -> f64 {
    let four_g2 = 4.0 * g * g;
    let omega_rabi = (delta * delta + four_g2).sqrt();
    // omega_R - |delta| cancels badly for large detuning; use the conjugate form.
    let (plus, minus) = if delta >= 0.0 {
        let p = omega_rabi + delta;
        (p, four_g2 / p)
    } else {
        let m = omega_rabi - delta;
        (four_g2 / m, m)
    };
    let cp = plus / (2.0 * omega_rabi);
    let cm = minus / (2.0 * omega_rabi);
    let mixing = 0.5 * four_g2 / (omega_rabi * omega_rabi);
    let p = 1.0
        - cp * cp * (-cp * t_over_t1).exp()
        - cm * cm * (-cm * t_over_t1).exp()
        - mixing * half_envelope * (omega_rabi * t).cos();
    p.clamp(0.0, 1.0)
}

#[inline]
fn coherent_unchecked(delta: f64, g: f64, t: f64) -> f64 {
    let four_g2 = 4.0 * g * g;
    let omega_rabi2 = delta * delta + four_g2;
    // 1/2 (1 - 4g^2/wR^2 cos(wR t) - delta^2/wR^2) == 4g^2/wR^2 sin^2(wR t / 2)
    let s = (0.5 * omega_rabi2.sqrt() * t).sin();
    (four_g2 / omega_rabi2 * s * s).clamp(0.0, 1.0)
}

/// Probability of reporting "ground" after a symmetric readout flip.
pub fn observed_click_prob(p_ground: f64, p_e: f64) -> Result<f64> {
    validate_prob(p_ground, "ground-state probability")?;
    validate_prob(p_e, "readout error")?;
    Ok(flip(p_ground, p_e))
}

#[inline]
fn flip(p_ground: f64, p_e: f64) -> f64 {
    p_ground * (1.0 - p_e) + (1.0 - p_ground) * p_e
}

/// `C(n, k)` as a float; exact for the small `n` used by batching.
pub fn binomial_coefficient(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

/// Probability of `d` ground-state reports among `setting.m_r` shots.
pub fn batch_likelihood(
    d: u32,
    setting: &MeasurementSetting,
    hyp: &HypothesisPoint,
    t1: f64,
    p_e: f64,
) -> Result<f64> {
    if d > setting.m_r {
        return Err(domain(format!("outcome d = {d} exceeds m_r = {}", setting.m_r)));
    }
    validate_prob(p_e, "readout error")?;
    let p_ground = ground_prob_relaxing(setting, hyp, t1)?;
    Ok(binomial_mass(d, setting.m_r, clamp_prob(flip(p_ground, p_e))))
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
fn binomial_mass(d: u32, m_r: u32, p: f64) -> f64 {
    binomial_coefficient(m_r, d) * p.powi(d as i32) * (1.0 - p).powi((m_r - d) as i32)
}

/// Draw the number of ground-state reports for one batch on the true system.
pub fn sample_batch<R: Rng + ?Sized>(
    true_sys: &TrueSystem,
    setting: &MeasurementSetting,
    rng: &mut R,
) -> Result<u32> {
    let p_ground = ground_prob_relaxing(setting, &true_sys.hypothesis(), true_sys.t1)?;
    let p_obs = flip(p_ground, true_sys.p_e);
    if p_obs <= 0.0 {
        return Ok(0);
    }
    if p_obs >= 1.0 {
        return Ok(setting.m_r);
    }
    let dist = Binomial::new(u64::from(setting.m_r), p_obs)
        .map_err(|e| domain(format!("binomial: {e}")))?;
    Ok(dist.sample(rng) as u32)
}

/// Batch likelihood with everything that depends only on the setting and the
/// observed count precomputed. This is the inner loop of every posterior
/// update.
#[derive(Debug, Clone, Copy)]
pub struct LikelihoodKernel {
    omega_q: f64,
    t: f64,
    t_over_t1: f64,
    half_envelope: f64,
    coherent: bool,
    p_e: f64,
    d: u32,
    m_r: u32,
    coefficient: f64,
}

impl LikelihoodKernel {
    pub fn new(setting: &MeasurementSetting, d: u32, t1: f64, p_e: f64) -> Result<Self> {
        setting.validate()?;
        validate_t1(t1)?;
        validate_prob(p_e, "readout error")?;
        if d > setting.m_r {
            return Err(domain(format!("outcome d = {d} exceeds m_r = {}", setting.m_r)));
        }
        let coherent = t1.is_infinite();
        Ok(Self {
            omega_q: setting.omega_q,
            t: setting.t,
            t_over_t1: if coherent { 0.0 } else { setting.t / t1 },
            half_envelope: if coherent { 1.0 } else { (-setting.t / (2.0 * t1)).exp() },
            coherent,
            p_e,
            d,
            m_r: setting.m_r,
            coefficient: binomial_coefficient(setting.m_r, d),
        })
    }

    /// Ground-state probability at `(g, omega_r)`; `g` must be positive.
    #[inline]
    pub fn ground_prob(&self, g: f64, omega_r: f64) -> f64 {
        let delta = self.omega_q - omega_r;
        if self.coherent {
            coherent_unchecked(delta, g, self.t)
        } else {
            relaxing_unchecked(delta, g, self.t, self.t_over_t1, self.half_envelope)
        }
    }

    #[inline]
    pub fn likelihood(&self, g: f64, omega_r: f64) -> f64 {
        let p = clamp_prob(flip(self.ground_prob(g, omega_r), self.p_e));
        let q = 1.0 - p;
        match (self.m_r, self.d) {
            (1, 1) => p,
            (1, _) => q,
            _ => self.coefficient * p.powi(self.d as i32) * q.powi((self.m_r - self.d) as i32),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn setting(delta: f64, t: f64, m_r: u32) -> (MeasurementSetting, HypothesisPoint) {
        (
            MeasurementSetting { omega_q: 30.0 + delta, t, m_r },
            HypothesisPoint { g: 1.0, omega_r: 30.0 },
        )
    }

    #[test]
    fn relaxing_vanishes_at_zero_time() {
        for &(delta, g) in &[(0.0, 1.0), (0.7, 0.3), (-5.0, 2.0), (120.0, 0.01)] {
            let s = MeasurementSetting { omega_q: 30.0 + delta, t: 0.0, m_r: 1 };
            let h = HypothesisPoint { g, omega_r: 30.0 };
            let p = ground_prob_relaxing(&s, &h, 3.0).unwrap();
            assert!(p.abs() < 1e-12, "{p}");
        }
    }

    #[test]
    fn relaxing_approaches_one_long_after_t1() {
        let (s, h) = setting(0.0, 20.0, 1);
        let p = ground_prob_relaxing(&s, &h, 1.0).unwrap();
        assert!(p > 1.0 - 2.0 * (-10.0f64).exp() && p < 1.0, "{p}");
    }

    #[test]
    fn relaxing_matches_high_precision_oracle() {
        // 50-digit evaluation of the printed formula.
        let (s, h) = setting(0.7, 2.3, 1);
        let p = ground_prob_relaxing(&s, &h, 10.0).unwrap();
        assert!((p - 0.452_775_489_915_438_24).abs() < 1e-14, "{p}");
    }

    #[test]
    fn coherent_endpoints() {
        let g = 0.8;
        let s = MeasurementSetting { omega_q: 5.0, t: PI / (2.0 * g), m_r: 1 };
        let h = HypothesisPoint { g, omega_r: 5.0 };
        assert!((ground_prob_coherent(&s, &h).unwrap() - 1.0).abs() < 1e-15);
        let s0 = MeasurementSetting { t: 0.0, ..s };
        assert_eq!(ground_prob_coherent(&s0, &h).unwrap(), 0.0);
        let far = MeasurementSetting { omega_q: 5.0 + 1e7, t: 1.3, m_r: 1 };
        assert!(ground_prob_coherent(&far, &h).unwrap() < 1e-13);
    }

    #[test]
    fn infinite_t1_routes_to_coherent() {
        let (s, h) = setting(0.4, 1.7, 1);
        assert_eq!(
            ground_prob_relaxing(&s, &h, f64::INFINITY).unwrap(),
            ground_prob_coherent(&s, &h).unwrap()
        );
    }

    #[test]
    fn non_positive_coupling_is_rejected() {
        let (s, _) = setting(0.0, 1.0, 1);
        let h = HypothesisPoint { g: 0.0, omega_r: 30.0 };
        assert!(ground_prob_relaxing(&s, &h, 5.0).is_err());
        assert!(ground_prob_coherent(&s, &h).is_err());
        let h = HypothesisPoint { g: -1.0, omega_r: 30.0 };
        assert!(ground_prob_coherent(&s, &h).is_err());
    }

    #[test]
    fn readout_flip() {
        assert!((observed_click_prob(0.0, 0.1).unwrap() - 0.1).abs() < 1e-15);
        assert!((observed_click_prob(1.0, 0.1).unwrap() - 0.9).abs() < 1e-15);
        for pe in [0.0, 0.05, 0.3, 0.5] {
            assert!((observed_click_prob(0.5, pe).unwrap() - 0.5).abs() < 1e-15);
        }
        assert!(observed_click_prob(1.2, 0.1).is_err());
        assert!(observed_click_prob(0.2, -0.1).is_err());
    }

    #[test]
    fn batch_likelihood_values() {
        // p_obs = 0.5: choose p_e = 0.5 so the flip channel forces it.
        let (s, h) = setting(0.3, 1.1, 10);
        let l = batch_likelihood(3, &s, &h, 5.0, 0.5).unwrap();
        assert!((l - 0.117_187_5).abs() < 1e-15);

        // p_ground -> 1 long after T1: all-ground batch has likelihood ~1.
        let (s, h) = setting(0.0, 2000.0, 10);
        let l = batch_likelihood(10, &s, &h, 1.0, 0.0).unwrap();
        assert!((l - 1.0).abs() < 1e-10, "{l}");

        // 50-digit oracle: binomial mass with p_obs from the relaxing formula.
        let (s, h) = setting(0.4, 3.0, 10);
        let l = batch_likelihood(7, &s, &h, 20.0 * PI, 0.1).unwrap();
        assert!((l / 3.762_618_336_999_318e-5 - 1.0).abs() < 1e-12, "{l}");

        assert!(batch_likelihood(11, &s, &h, 5.0, 0.0).is_err());
    }

    #[test]
    fn kernel_agrees_with_public_functions() {
        let s = MeasurementSetting { omega_q: 31.2, t: 4.5, m_r: 10 };
        for d in 0..=10 {
            let k = LikelihoodKernel::new(&s, d, 7.0, 0.05).unwrap();
            for &(g, w) in &[(1.0, 30.0), (0.6, 31.0), (1.4, 33.5)] {
                let direct = batch_likelihood(d, &s, &HypothesisPoint::new(g, w), 7.0, 0.05).unwrap();
                assert!((k.likelihood(g, w) - direct).abs() <= 1e-15 * direct.max(1e-300));
            }
        }
    }

    #[test]
    fn sampling_extremes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // t = 0 and no readout error: never in the ground state.
        let sys = TrueSystem::new(1.0, 30.0, 10.0, 0.0).unwrap();
        let s = MeasurementSetting { omega_q: 30.0, t: 0.0, m_r: 10 };
        assert_eq!(sample_batch(&sys, &s, &mut rng).unwrap(), 0);
        // Exact swap on resonance without relaxation: always in the ground state.
        let sys = TrueSystem::new(1.0, 30.0, f64::INFINITY, 0.0).unwrap();
        let s = MeasurementSetting { omega_q: 30.0, t: PI / 2.0, m_r: 10 };
        assert_eq!(sample_batch(&sys, &s, &mut rng).unwrap(), 10);

        let sys = TrueSystem::new(1.1, 29.0, 8.0, 0.1).unwrap();
        let s = MeasurementSetting { omega_q: 29.5, t: 2.0, m_r: 10 };
        let a: Vec<u32> = {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            (0..20).map(|_| sample_batch(&sys, &s, &mut r).unwrap()).collect()
        };
        let b: Vec<u32> = {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            (0..20).map(|_| sample_batch(&sys, &s, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_matches_binomial_mean() {
        let sys = TrueSystem::new(0.9, 30.0, 15.0, 0.1).unwrap();
        let s = MeasurementSetting { omega_q: 30.6, t: 2.4, m_r: 10 };
        let p_obs = flip(ground_prob_relaxing(&s, &sys.hypothesis(), sys.t1).unwrap(), sys.p_e);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let total: u64 = (0..n).map(|_| u64::from(sample_batch(&sys, &s, &mut rng).unwrap())).sum();
        let mean = total as f64 / n as f64;
        let se = (10.0 * p_obs * (1.0 - p_obs) / n as f64).sqrt();
        assert!((mean - 10.0 * p_obs).abs() < 4.0 * se, "mean {mean}, expected {}", 10.0 * p_obs);
    }

    #[test]
    fn system_validation() {
        assert!(TrueSystem::new(0.0, 30.0, 1.0, 0.0).is_err());
        assert!(TrueSystem::new(1.0, -1.0, 1.0, 0.0).is_err());
        assert!(TrueSystem::new(1.0, 30.0, 0.0, 0.0).is_err());
        assert!(TrueSystem::new(1.0, 30.0, 1.0, 0.6).is_err());
        assert!(TrueSystem::new(1.0, 30.0, f64::INFINITY, 0.5).is_ok());
        assert!(MeasurementSetting::new(1.0, -0.1, 1).is_err());
        assert!(MeasurementSetting::new(1.0, 0.1, 0).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_stay_in_unit_interval(
            delta in -50.0f64..50.0, g in 1e-3f64..5.0, t in 0.0f64..500.0, t1 in 1e-2f64..1e4,
        ) {
            let s = MeasurementSetting { omega_q: 30.0 + delta, t, m_r: 1 };
            let h = HypothesisPoint { g, omega_r: 30.0 };
            let p = ground_prob_relaxing(&s, &h, t1).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            let q = ground_prob_coherent(&s, &h).unwrap();
            prop_assert!((0.0..=1.0).contains(&q));
        }

        #[test]
        fn resonant_envelope_bound(g in 1e-2f64..5.0, t in 0.0f64..200.0, t1 in 1e-1f64..1e3) {
            let s = MeasurementSetting { omega_q: 30.0, t, m_r: 1 };
            let p = ground_prob_relaxing(&s, &HypothesisPoint { g, omega_r: 30.0 }, t1).unwrap();
            prop_assert!(p >= 1.0 - 2.0 * (-t / (2.0 * t1)).exp() - 1e-14);
        }

        #[test]
        fn batch_masses_sum_to_one(
            delta in -10.0f64..10.0, g in 0.1f64..3.0, t in 0.0f64..100.0,
            t1 in 0.5f64..200.0, p_e in 0.0f64..0.5, m_r in 1u32..25,
        ) {
            let s = MeasurementSetting { omega_q: 30.0 + delta, t, m_r };
            let h = HypothesisPoint { g, omega_r: 30.0 };
            let total: f64 = (0..=m_r).map(|d| batch_likelihood(d, &s, &h, t1, p_e).unwrap()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn only_the_detuning_matters(
            delta in -10.0f64..10.0, g in 0.1f64..3.0, t in 0.0f64..100.0,
            t1 in 0.5f64..200.0, offset in -1e3f64..1e3,
        ) {
            let base = ground_prob_relaxing(
                &MeasurementSetting { omega_q: 30.0 + delta, t, m_r: 1 },
                &HypothesisPoint { g, omega_r: 30.0 },
                t1,
            ).unwrap();
            let shifted = ground_prob_relaxing(
                &MeasurementSetting { omega_q: 30.0 + offset + delta, t, m_r: 1 },
                &HypothesisPoint { g, omega_r: 30.0 + offset },
                t1,
            ).unwrap();
            // Only rounding in forming the detuning separates the two.
            prop_assert!((base - shifted).abs() < 1e-9);
        }
    }
}
