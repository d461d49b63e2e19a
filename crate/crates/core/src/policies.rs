//! Measurement-setting selection rules.
//!
//! Four families are provided:
//!
//! * [`Policy::Manual`]: time grows as `1 / sigma_g`, frequency spread first
//!   on the coupling scale and later on the posterior width of `omega_r`.
//! * [`Policy::Random`]: waiting time uniform on `[0, T1]`, frequency from the
//!   late branch of the manual rule.
//! * [`Policy::Machine`] with [`TimeTail::Uniform`]: batched shots, a click
//!   counter driving three regimes, and waiting times capped by `t_max` once
//!   `sigma_g <= 1 / t_max`.
//! * [`Policy::Machine`] with [`TimeTail::Shaped`]: same, with the capped
//!   waiting times drawn from a piecewise-linear density.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::inference::{ParticleCloud, PosteriorStats};
use crate::physics::MeasurementSetting;

/// Shots per setting for the machine-learned policy family.
pub const MACHINE_REPEATS: u32 = 10;

/// Default number of grid points for a shaped waiting-time density.
pub const DEFAULT_GRID_POINTS: usize = 16;

/// Whether the uniform `r1` in the time rule is reused in the frequency rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    #[default]
    Shared,
    Independent,
}

/// Random numbers consumed by one setting choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draws {
    /// Uniform used by the time rule.
    pub r1: f64,
    /// Uniform used by the frequency rule where `r1` appears; equal to `r1`
    /// under [`DrawMode::Shared`].
    pub r1_freq: f64,
    pub r2: f64,
    /// Standard normal deviate.
    pub z: f64,
}

impl Draws {
    pub fn sample<R: Rng + ?Sized>(mode: DrawMode, rng: &mut R) -> Self {
        let r1 = rng.random::<f64>();
        let r1_freq = match mode {
            DrawMode::Shared => r1,
            DrawMode::Independent => rng.random::<f64>(),
        };
        let r2 = rng.random::<f64>();
        let z: f64 = StandardNormal.sample(rng);
        Self { r1, r1_freq, r2, z }
    }

    pub fn fixed(r1: f64, r2: f64, z: f64) -> Self {
        Self { r1, r1_freq: r1, r2, z }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManualPolicyParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Settings with index `M <= m0` use the exploratory branch.
    pub m0: u32,
    pub draw_mode: DrawMode,
}

impl Default for ManualPolicyParams {
    fn default() -> Self {
        Self { a: 1.57, b: 0.518, c: 3.0, m0: 15, draw_mode: DrawMode::Shared }
    }
}

/// The 8-vector `(a, b, d, f, g_pol, t_max, D_th, C_0)`.
///
/// `t_max` is stored in units of the inverse mean prior coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachinePolicyParams {
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub f: f64,
    pub g_pol: f64,
    pub t_max: f64,
    pub d_th: u32,
    pub c0: u32,
}

impl MachinePolicyParams {
    pub const DIM: usize = 8;

    pub fn validate(&self, m_r: u32) -> Result<()> {
        let reals = [self.a, self.b, self.d, self.f, self.g_pol];
        if reals.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(domain(format!("policy coefficients must be finite and >= 0: {self:?}")));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(domain(format!("t_max must be positive, got {}", self.t_max)));
        }
        if self.d_th > m_r {
            return Err(domain(format!("D_th = {} exceeds m_r = {m_r}", self.d_th)));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.a,
            self.b,
            self.d,
            self.f,
            self.g_pol,
            self.t_max,
            f64::from(self.d_th),
            f64::from(self.c0),
        ]
    }
}

/// Per-episode bookkeeping: settings issued and the click counter.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PolicyState {
    /// Settings issued (and registered) so far.
    pub m: u32,
    /// Batches whose ground-state count exceeded the threshold.
    pub c: u32,
    pub last_setting: Option<MeasurementSetting>,
    pub last_d: Option<u32>,
}

impl PolicyState {
    /// Counts a batch; the click counter moves only on `d > d_th`.
    pub fn register_batch(&mut self, d: u32, d_th: u32) {
        if d > d_th {
            self.c += 1;
        }
        self.m += 1;
        self.last_d = Some(d);
    }
}

/// Functional form of [`PolicyState::register_batch`].
pub fn register_batch(mut state: PolicyState, d: u32, d_th: u32) -> PolicyState {
    state.register_batch(d, d_th);
    state
}

fn require_spread(sigma: f64, what: &str) -> Result<f64> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(sigma)
    } else {
        Err(Error::DegeneratePosterior(format!("{what} = {sigma}")))
    }
}

/// Manual rule for the `m`-th setting (1-based) with explicit draws.
pub fn manual_setting(
    params: &ManualPolicyParams,
    stats: &PosteriorStats,
    m: u32,
    draws: &Draws,
) -> Result<MeasurementSetting> {
    let sigma_g = require_spread(stats.sigma_g, "sigma_g")?;
    let (t, omega_q) = if m <= params.m0 {
        (
            params.a * draws.r1 / sigma_g,
            stats.mu_omega + (draws.r1_freq - 0.5) * stats.mu_g,
        )
    } else {
        (
            (params.a + params.b * draws.z).abs() / sigma_g,
            stats.mu_omega + params.c * (draws.r2 - 0.5) * stats.sigma_omega,
        )
    };
    Ok(MeasurementSetting { omega_q, t, m_r: 1 })
}

pub fn next_setting_man<R: Rng + ?Sized>(
    params: &ManualPolicyParams,
    stats: &PosteriorStats,
    state: &PolicyState,
    rng: &mut R,
) -> Result<MeasurementSetting> {
    let draws = Draws::sample(params.draw_mode, rng);
    manual_setting(params, stats, state.m + 1, &draws)
}

/// Random-time baseline: `t ~ U[0, T1]`, `omega_q` from the late manual
/// branch with spread factor `c`.
pub fn random_setting(t1: f64, c: f64, stats: &PosteriorStats, r_time: f64, r2: f64) -> Result<MeasurementSetting> {
    if !(t1 > 0.0 && t1.is_finite()) {
        return Err(domain(format!("random policy needs a finite T1, got {t1}")));
    }
    require_spread(stats.sigma_g, "sigma_g")?;
    Ok(MeasurementSetting {
        omega_q: stats.mu_omega + c * (r2 - 0.5) * stats.sigma_omega,
        t: r_time * t1,
        m_r: 1,
    })
}

pub fn next_setting_rand<R: Rng + ?Sized>(
    t1: f64,
    stats: &PosteriorStats,
    rng: &mut R,
) -> Result<MeasurementSetting> {
    let r_time = rng.random::<f64>();
    let r2 = rng.random::<f64>();
    random_setting(t1, ManualPolicyParams::default().c, stats, r_time, r2)
}

/// Which branch of the machine policy applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// No click yet: frequency sampled from the posterior marginal.
    Exploring,
    /// Clicks seen, posterior still wider than `1 / t_max`.
    Narrowing,
    /// Clicks seen and `sigma_g <= 1 / t_max`: waiting time from the tail density.
    Capped,
}

pub fn select_regime(c: u32, sigma_g: f64, t_max: f64) -> Regime {
    if c == 0 {
        Regime::Exploring
    } else if sigma_g > 1.0 / t_max {
        Regime::Narrowing
    } else {
        Regime::Capped
    }
}

/// Waiting time from the click-counter rule.
pub fn machine_time_rule(
    params: &MachinePolicyParams,
    c: u32,
    stats: &PosteriorStats,
    draws: &Draws,
) -> Result<f64> {
    let sigma_g = require_spread(stats.sigma_g, "sigma_g")?;
    Ok(if c <= params.c0 {
        params.a * draws.r1 / sigma_g
    } else {
        (params.d + params.b * draws.z).abs() / sigma_g
    })
}

/// Qubit frequency from the click-counter rule (`c >= 1`).
pub fn machine_freq_rule(
    params: &MachinePolicyParams,
    c: u32,
    stats: &PosteriorStats,
    draws: &Draws,
) -> f64 {
    if c <= params.c0 {
        stats.mu_omega + params.f * (draws.r1_freq - 0.5) * stats.mu_g
    } else {
        stats.mu_omega + params.g_pol * (draws.r2 - 0.5) * stats.sigma_omega
    }
}

/// Waiting-time distribution used in the capped regime.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeTail {
    /// Uniform on `[0, t_max]`.
    Uniform,
    Shaped(ShapedTimeDensity),
}

impl TimeTail {
    pub fn sample<R: Rng + ?Sized>(&self, t_max: f64, rng: &mut R) -> f64 {
        match self {
            TimeTail::Uniform => t_max * rng.random::<f64>(),
            TimeTail::Shaped(density) => density.sample(rng),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn next_setting_mach<R: Rng + ?Sized>(
    params: &MachinePolicyParams,
    stats: &PosteriorStats,
    state: &PolicyState,
    cloud: &ParticleCloud,
    tail: &TimeTail,
    draw_mode: DrawMode,
    rng: &mut R,
) -> Result<MeasurementSetting> {
    let c = state.c;
    let draws = Draws::sample(draw_mode, rng);
    let (omega_q, t) = match select_regime(c, stats.sigma_g, params.t_max) {
        Regime::Exploring => {
            let omega_q = cloud.sample_omega_marginal(rng);
            (omega_q, machine_time_rule(params, c, stats, &draws)?)
        }
        Regime::Narrowing => (
            machine_freq_rule(params, c, stats, &draws),
            machine_time_rule(params, c, stats, &draws)?,
        ),
        Regime::Capped => (
            machine_freq_rule(params, c, stats, &draws),
            tail.sample(params.t_max, rng),
        ),
    };
    Ok(MeasurementSetting { omega_q, t, m_r: MACHINE_REPEATS })
}

/// Grid `0 = t_1 < ... < t_n = t_max_prime` whose point density grows as
/// `exp(t / T1)`, the inverse of the relaxation envelope.
pub fn build_time_grid(n_t: usize, t1: f64, t_max_prime: f64) -> Result<Vec<f64>> {
    if n_t < 2 {
        return Err(domain(format!("time grid needs at least 2 points, got {n_t}")));
    }
    if !(t_max_prime > 0.0 && t_max_prime.is_finite()) || !(t1 > 0.0) {
        return Err(domain("time grid needs positive T1 and t_max'"));
    }
    let last = (n_t - 1) as f64;
    let mut grid: Vec<f64> = (0..n_t)
        .map(|i| {
            let frac = i as f64 / last;
            if t1.is_infinite() {
                frac * t_max_prime
            } else {
                t1 * (frac * (t_max_prime / t1).exp_m1()).ln_1p()
            }
        })
        .collect();
    grid[n_t - 1] = t_max_prime;
    Ok(grid)
}

/// Piecewise-linear waiting-time density on a grid starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedTimeDensity {
    grid: Vec<f64>,
    values: Vec<f64>,
    /// Cumulative area at each grid point, ending at 1.
    cumulative: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DensityRow {
    t_i: f64,
    #[serde(rename = "P_t")]
    p_t: f64,
}

impl ShapedTimeDensity {
    /// Validates and normalizes `values` so the interpolant integrates to one.
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid.len() != values.len() {
            return Err(domain("shaped density needs matching grid and values of length >= 2"));
        }
        if grid[0] != 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(domain("shaped density grid must start at 0 and increase strictly"));
        }
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(domain("shaped density values must be finite and >= 0"));
        }
        let mut cumulative = Vec::with_capacity(grid.len());
        cumulative.push(0.0);
        for i in 1..grid.len() {
            let area = 0.5 * (values[i - 1] + values[i]) * (grid[i] - grid[i - 1]);
            cumulative.push(cumulative[i - 1] + area);
        }
        let total = *cumulative.last().unwrap();
        if !(total > 0.0) {
            return Err(domain("shaped density is identically zero"));
        }
        let values = values.into_iter().map(|v| v / total).collect();
        let cumulative = cumulative.into_iter().map(|c| c / total).collect();
        Ok(Self { grid, values, cumulative })
    }

    pub fn uniform(grid: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![1.0; n])
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Normalized density values at the grid points.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn t_max(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn pdf(&self, t: f64) -> f64 {
        if t < 0.0 || t > self.t_max() {
            return 0.0;
        }
        let i = self.segment_of(t);
        let (t0, t1) = (self.grid[i], self.grid[i + 1]);
        let s = (t - t0) / (t1 - t0);
        self.values[i] + s * (self.values[i + 1] - self.values[i])
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= self.t_max() {
            return 1.0;
        }
        let i = self.segment_of(t);
        let x = t - self.grid[i];
        let h = self.grid[i + 1] - self.grid[i];
        let slope = (self.values[i + 1] - self.values[i]) / h;
        self.cumulative[i] + self.values[i] * x + 0.5 * slope * x * x
    }

    fn segment_of(&self, t: f64) -> usize {
        let k = self.grid.partition_point(|&g| g <= t);
        k.clamp(1, self.grid.len() - 1) - 1
    }

    /// Inverse-CDF draw on the trapezoidal segments.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = rng.random::<f64>();
        let i = self.cumulative.partition_point(|&c| c <= u).clamp(1, self.grid.len() - 1) - 1;
        let target = u - self.cumulative[i];
        let h = self.grid[i + 1] - self.grid[i];
        let p0 = self.values[i];
        let slope = (self.values[i + 1] - p0) / h;
        if target <= 0.0 {
            return self.grid[i];
        }
        // Root of p0 x + slope x^2 / 2 = target, in the cancellation-free form.
        let disc = (p0 * p0 + 2.0 * slope * target).max(0.0);
        let x = 2.0 * target / (p0 + disc.sqrt());
        (self.grid[i] + x.clamp(0.0, h)).min(self.grid[i + 1])
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (t, p) in self.grid.iter().zip(&self.values) {
            w.serialize(DensityRow { t_i: *t, p_t: *p })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let (mut grid, mut values) = (Vec::new(), Vec::new());
        for row in r.deserialize() {
            let row: DensityRow = row?;
            grid.push(row.t_i);
            values.push(row.p_t);
        }
        Self::new(grid, values)
    }
}

/// A complete setting-selection rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Manual(ManualPolicyParams),
    /// Random waiting time on `[0, T1]`; `c` scales the frequency spread.
    Random { c: f64 },
    Machine { params: MachinePolicyParams, tail: TimeTail, draw_mode: DrawMode },
}

impl Policy {
    pub fn manual() -> Self {
        Policy::Manual(ManualPolicyParams::default())
    }

    pub fn random() -> Self {
        Policy::Random { c: ManualPolicyParams::default().c }
    }

    pub fn machine(params: MachinePolicyParams) -> Self {
        Policy::Machine { params, tail: TimeTail::Uniform, draw_mode: DrawMode::Shared }
    }

    pub fn machine_shaped(params: MachinePolicyParams, density: ShapedTimeDensity) -> Self {
        Policy::Machine { params, tail: TimeTail::Shaped(density), draw_mode: DrawMode::Shared }
    }

    /// Shots per setting.
    pub fn repeats(&self) -> u32 {
        match self {
            Policy::Machine { .. } => MACHINE_REPEATS,
            _ => 1,
        }
    }

    /// Threshold on `d` for the click counter. Policies without a counter
    /// use `m_r`, which no batch can exceed.
    pub fn click_threshold(&self) -> u32 {
        match self {
            Policy::Machine { params, .. } => params.d_th,
            _ => self.repeats(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Policy::Manual(p) => {
                if p.a > 0.0 && p.b > 0.0 && p.c > 0.0 {
                    Ok(())
                } else {
                    Err(domain(format!("manual policy constants must be positive: {p:?}")))
                }
            }
            Policy::Random { c } if *c > 0.0 => Ok(()),
            Policy::Random { c } => Err(domain(format!("random policy spread must be positive, got {c}"))),
            Policy::Machine { params, tail, .. } => {
                params.validate(MACHINE_REPEATS)?;
                if let TimeTail::Shaped(d) = tail {
                    if d.t_max() > params.t_max * (1.0 + 1e-12) {
                        return Err(domain("shaped density extends beyond the policy's t_max"));
                    }
                }
                Ok(())
            }
        }
    }

    /// Chooses the next setting. `presumed_t1` is only used by the random
    /// baseline.
    pub fn next_setting<R: Rng + ?Sized>(
        &self,
        stats: &PosteriorStats,
        state: &PolicyState,
        cloud: &ParticleCloud,
        presumed_t1: f64,
        rng: &mut R,
    ) -> Result<MeasurementSetting> {
        match self {
            Policy::Manual(p) => next_setting_man(p, stats, state, rng),
            Policy::Random { c } => {
                let r_time = rng.random::<f64>();
                let r2 = rng.random::<f64>();
                random_setting(presumed_t1, *c, stats, r_time, r2)
            }
            Policy::Machine { params, tail, draw_mode } => {
                next_setting_mach(params, stats, state, cloud, tail, *draw_mode, rng)
            }
        }
    }
}
