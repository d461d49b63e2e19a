//! Sequential Monte Carlo posterior over `(g, omega_r)`.
//!
//! The posterior is a weighted particle cloud. Each measurement batch
//! multiplies every weight by the batch likelihood of its particle and
//! renormalizes; when the effective sample size drops below a fraction of
//! the cloud size, the cloud is refreshed with the Liu–West kernel.

use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::physics::{HypothesisPoint, LikelihoodKernel, MeasurementSetting};

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Unnormalized weight sums below this are treated as total underflow.
pub const UNDERFLOW_SUM: f64 = 1e-300;

/// Smallest variance the Liu–West kernel will use per coordinate.
const COVARIANCE_FLOOR: f64 = 1e-24;

/// Uniform prior box over `(g, omega_r)`, given by means and standard
/// deviations; the half-width of each side is `sqrt(3) * sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mu_g0: f64,
    pub sigma_g0: f64,
    pub mu_omega0: f64,
    pub sigma_omega0: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { mu_g0: 1.0, sigma_g0: 0.25, mu_omega0: 30.0, sigma_omega0: 2.0 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_g0 > 0.0 && self.sigma_omega0 > 0.0) {
            return Err(Error::InvalidConfig("prior standard deviations must be positive".into()));
        }
        if !(self.mu_g0.is_finite() && self.mu_omega0.is_finite()) {
            return Err(Error::InvalidConfig("prior means must be finite".into()));
        }
        if self.g_bounds().0 <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "coupling prior [{}, {}] must exclude g <= 0",
                self.g_bounds().0,
                self.g_bounds().1
            )));
        }
        Ok(())
    }

    pub fn g_bounds(&self) -> (f64, f64) {
        let h = SQRT_3 * self.sigma_g0;
        (self.mu_g0 - h, self.mu_g0 + h)
    }

    pub fn omega_bounds(&self) -> (f64, f64) {
        let h = SQRT_3 * self.sigma_omega0;
        (self.mu_omega0 - h, self.mu_omega0 + h)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> HypothesisPoint {
        let (g_lo, g_hi) = self.g_bounds();
        let (w_lo, w_hi) = self.omega_bounds();
        HypothesisPoint {
            g: g_lo + (g_hi - g_lo) * rng.random::<f64>(),
            omega_r: w_lo + (w_hi - w_lo) * rng.random::<f64>(),
        }
    }

    /// Lower bound kept on `g` after resampling.
    pub fn g_floor(&self) -> f64 {
        1e-6 * self.mu_g0
    }
}

/// Tuning of the particle filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmcConfig {
    pub n_particles: usize,
    /// Resample when `ESS < resample_threshold * n_particles`.
    pub resample_threshold: f64,
    /// Liu–West shrinkage `a`; `1.0` degenerates to plain multinomial copies.
    pub liu_west_a: f64,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self { n_particles: 5000, resample_threshold: 0.5, liu_west_a: 0.98 }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 1 {
            return Err(Error::InvalidConfig("n_particles must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::InvalidConfig("resample_threshold must lie in [0, 1]".into()));
        }
        if !(self.liu_west_a > 0.0 && self.liu_west_a <= 1.0) {
            return Err(Error::InvalidConfig("liu_west_a must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Weighted means and standard deviations of the two marginals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorStats {
    pub mu_g: f64,
    pub sigma_g: f64,
    pub mu_omega: f64,
    pub sigma_omega: f64,
}

/// What a single [`bayes_update`] did to the cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateOutcome {
    pub resampled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    points: Vec<HypothesisPoint>,
    weights: Vec<f64>,
    g_floor: f64,
}

#[derive(Serialize, Deserialize)]
struct CloudRow {
    g: f64,
    omega_r: f64,
    weight: f64,
}

impl ParticleCloud {
    /// Builds a cloud from explicit points; weights are normalized.
    pub fn new(points: Vec<HypothesisPoint>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(domain("particle cloud must not be empty"));
        }
        if points.len() != weights.len() {
            return Err(domain(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !(p.g > 0.0) || !p.omega_r.is_finite()) {
            return Err(domain(format!("particle with invalid coordinates {p:?}")));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(domain("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegeneratePosterior("all weights are zero".into()));
        }
        let g_min = points.iter().map(|p| p.g).fold(f64::INFINITY, f64::min);
        Ok(Self {
            points,
            weights: weights.into_iter().map(|w| w / total).collect(),
            g_floor: (1e-6 * g_min).min(1e-6),
        })
    }

    /// Equal-weight cloud of `points`.
    pub fn uniform(points: Vec<HypothesisPoint>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0; n])
    }

    pub fn with_g_floor(mut self, g_floor: f64) -> Self {
        self.g_floor = g_floor;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[HypothesisPoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `1 / sum(w^2)`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Multiplies every weight by its batch likelihood and renormalizes.
    ///
    /// On total underflow the cloud is left untouched and
    /// [`Error::DegeneratePosterior`] is returned.
    pub fn reweight(
        &mut self,
        setting: &MeasurementSetting,
        d: u32,
        presumed_t1: f64,
        p_e: f64,
    ) -> Result<()> {
        let kernel = LikelihoodKernel::new(setting, d, presumed_t1, p_e)?;
        let updated: Vec<f64> = self
            .points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * kernel.likelihood(p.g, p.omega_r))
            .collect();
        let total: f64 = updated.iter().sum();
        if !(total >= UNDERFLOW_SUM) {
            return Err(Error::DegeneratePosterior(format!(
                "weight sum {total:e} after observing d = {d} at {setting:?}"
            )));
        }
        let inv = 1.0 / total;
        for (w, u) in self.weights.iter_mut().zip(updated) {
            *w = u * inv;
        }
        Ok(())
    }

    /// Weighted mean and covariance, `([g, omega], [[gg, gw], [gw, ww]])`.
    pub fn moments(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let (mut mg, mut mw) = (0.0, 0.0);
        for (p, w) in self.points.iter().zip(&self.weights) {
            mg += w * p.g;
            mw += w * p.omega_r;
        }
        let (mut sgg, mut sgw, mut sww) = (0.0, 0.0, 0.0);
        for (p, w) in self.points.iter().zip(&self.weights) {
            let (dg, dw) = (p.g - mg, p.omega_r - mw);
            sgg += w * dg * dg;
            sgw += w * dg * dw;
            sww += w * dw * dw;
        }
        ([mg, mw], [[sgg, sgw], [sgw, sww]])
    }

    pub fn stats(&self) -> PosteriorStats {
        let ([mu_g, mu_omega], cov) = self.moments();
        PosteriorStats {
            mu_g,
            sigma_g: cov[0][0].max(0.0).sqrt(),
            mu_omega,
            sigma_omega: cov[1][1].max(0.0).sqrt(),
        }
    }

    /// Index of a particle drawn proportionally to weight.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut u = rng.random::<f64>();
        for (i, w) in self.weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return i;
            }
        }
        // Round-off left a sliver past the last cumulative weight.
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// `omega_r` of a particle drawn from the posterior.
    pub fn sample_omega_marginal<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.points[self.sample_index(rng)].omega_r
    }

    /// Liu–West refresh: equal-weight cloud drawn from the shrunken kernel
    /// mixture `N(a x_j + (1 - a) m, (1 - a^2) S)`, `j` chosen by weight.
    pub fn resample<R: Rng + ?Sized>(&self, liu_west_a: f64, rng: &mut R) -> Self {
        let n = self.points.len();
        let (mean, cov) = self.moments();
        let chol = cholesky_floored(cov);
        let spread = (1.0 - liu_west_a * liu_west_a).max(0.0).sqrt();
        let shift = [(1.0 - liu_west_a) * mean[0], (1.0 - liu_west_a) * mean[1]];
        let index = WeightedIndex::new(&self.weights).expect("normalized weights");
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let x = self.points[index.sample(rng)];
            let z0: f64 = StandardNormal.sample(rng);
            let z1: f64 = StandardNormal.sample(rng);
            let mut g = liu_west_a * x.g + shift[0] + spread * chol[0][0] * z0;
            let omega_r =
                liu_west_a * x.omega_r + shift[1] + spread * (chol[1][0] * z0 + chol[1][1] * z1);
            if g < self.g_floor {
                g = 2.0 * self.g_floor - g;
            }
            points.push(HypothesisPoint { g, omega_r });
        }
        Self { points, weights: vec![1.0 / n as f64; n], g_floor: self.g_floor }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (p, weight) in self.points.iter().zip(&self.weights) {
            w.serialize(CloudRow { g: p.g, omega_r: p.omega_r, weight: *weight })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for row in r.deserialize() {
            let row: CloudRow = row?;
            points.push(HypothesisPoint { g: row.g, omega_r: row.omega_r });
            weights.push(row.weight);
        }
        // Keep snapshot weights bit-exact when they are already normalized.
        let total: f64 = weights.iter().sum();
        let keep = (total - 1.0).abs() <= 1e-12;
        let mut cloud = Self::new(points, weights.clone())?;
        if keep {
            cloud.weights = weights;
        }
        Ok(cloud)
    }
}

/// Lower-triangular factor of a 2x2 covariance with floored diagonal.
fn cholesky_floored(cov: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let s00 = cov[0][0].max(COVARIANCE_FLOOR);
    let s11 = cov[1][1].max(COVARIANCE_FLOOR);
    let l00 = s00.sqrt();
    let l10 = cov[1][0] / l00;
    let l11 = (s11 - l10 * l10).max(COVARIANCE_FLOOR).sqrt();
    [[l00, 0.0], [l10, l11]]
}

/// Particles drawn i.i.d. from the prior box with equal weights.
pub fn init_cloud<R: Rng + ?Sized>(
    prior: &PriorSpec,
    n_particles: usize,
    rng: &mut R,
) -> Result<ParticleCloud> {
    prior.validate()?;
    if n_particles < 100 {
        return Err(Error::InvalidConfig(format!(
            "need at least 100 particles, got {n_particles}"
        )));
    }
    let points = (0..n_particles).map(|_| prior.sample(rng)).collect();
    let weight = 1.0 / n_particles as f64;
    Ok(ParticleCloud { points, weights: vec![weight; n_particles], g_floor: prior.g_floor() })
}

/// Bayes step followed by a Liu–West refresh when the effective sample size
/// falls below `cfg.resample_threshold * n`.
///
/// On underflow the cloud is rolled back and the error is returned; the
/// caller decides whether to treat the batch as uninformative.
pub fn bayes_update<R: Rng + ?Sized>(
    cloud: &mut ParticleCloud,
    setting: &MeasurementSetting,
    d: u32,
    presumed_t1: f64,
    p_e: f64,
    cfg: &SmcConfig,
    rng: &mut R,
) -> Result<UpdateOutcome> {
    cloud.reweight(setting, d, presumed_t1, p_e)?;
    let resampled =
        cloud.effective_sample_size() < cfg.resample_threshold * cloud.len() as f64;
    if resampled {
        *cloud = cloud.resample(cfg.liu_west_a, rng);
    }
    Ok(UpdateOutcome { resampled })
}
