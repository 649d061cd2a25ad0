//! Discrete diffusion timestep machinery: variance-preserving noise
//! coefficients, forward diffusion, timestep and shift sampling, and
//! annealed timestep ranges.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validate, Error, Result};
use crate::tensor::Mat;

/// Tolerance for the `floor(η·(t − t_min))` shift bound, so that products
/// like `0.1 · 800` land on the integer they denote.
const SHIFT_FLOOR_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaFamily {
    /// DDPM linear betas from 1e-4 to 0.02 (scaled by `1000 / T`, capped at 0.999).
    #[default]
    Linear,
    /// Squared-cosine cumulative signal with offset 0.008 over `t / (T − 1)`.
    Cosine,
}

impl std::str::FromStr for BetaFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BetaFamily::Linear),
            "cosine" => Ok(BetaFamily::Cosine),
            other => Err(Error::Config(format!("unsupported beta family `{other}`"))),
        }
    }
}

/// Coefficients of `x_t = α_t x + σ_t ε` for `t ∈ 0..T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    family: BetaFamily,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn build_schedule(total_steps: usize, family: BetaFamily) -> Result<NoiseSchedule> {
    validate(total_steps >= 2, || {
        format!("schedule needs at least 2 steps, got {total_steps}")
    })?;
    let alpha_bar: Vec<f64> = match family {
        BetaFamily::Linear => {
            let start = 1e-4;
            let end = (0.02 * 1000.0 / total_steps as f64).min(0.999);
            let mut acc = 1.0;
            (0..total_steps)
                .map(|i| {
                    let beta = start + (end - start) * i as f64 / (total_steps - 1) as f64;
                    acc *= 1.0 - beta;
                    acc
                })
                .collect()
        }
        BetaFamily::Cosine => {
            let s = 0.008;
            let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let f0 = f(0.0);
            let mut prev = 1.0f64;
            (0..total_steps)
                .map(|i| {
                    let u = i as f64 / (total_steps - 1) as f64;
                    let ab = (f(u) / f0).clamp(0.0, 1.0).min(prev);
                    prev = ab;
                    ab
                })
                .collect()
        }
    };
    let alpha = alpha_bar.iter().map(|a| a.sqrt()).collect();
    let sigma = alpha_bar.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect();
    let schedule = NoiseSchedule {
        family,
        alpha,
        sigma,
    };
    schedule.check_invariants()?;
    Ok(schedule)
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn family(&self) -> BetaFamily {
        self.family
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.total_steps();
        for t in 0..n {
            let (a, s) = (self.alpha[t], self.sigma[t]);
            validate((a * a + s * s - 1.0).abs() <= 1e-6, || {
                format!("variance is not preserved at t={t}")
            })?;
            if t > 0 {
                validate(a <= self.alpha[t - 1] && s >= self.sigma[t - 1], || {
                    format!("coefficients are not monotone at t={t}")
                })?;
            }
        }
        validate(self.alpha[0] >= 0.999, || {
            format!("alpha[0] = {} is below 0.999", self.alpha[0])
        })?;
        validate(self.sigma[n - 1] >= 0.99, || {
            format!("sigma[T-1] = {} is below 0.99", self.sigma[n - 1])
        })
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        validate(t < self.total_steps(), || {
            format!("timestep {t} outside 0..{}", self.total_steps())
        })
    }

    /// SHA-256 over the coefficient bytes; denoisers record it so that a
    /// checkpoint is never paired with a different schedule.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (a, s) in self.alpha.iter().zip(&self.sigma) {
            h.update(a.to_le_bytes());
            h.update(s.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `α_t x + σ_t ε` at one timestep for every row.
pub fn diffuse(schedule: &NoiseSchedule, x: &Mat, eps: &Mat, t: usize) -> Result<Mat> {
    validate(x.shape() == eps.shape(), || {
        format!("sample shape {:?} does not match noise shape {:?}", x.shape(), eps.shape())
    })?;
    schedule.check_timestep(t)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(x.zip_map(eps, |xv, ev| a * xv + s * ev))
}

/// Row-wise diffusion with one timestep per row.
pub fn diffuse_rows(schedule: &NoiseSchedule, x: &Mat, eps: &Mat, ts: &[usize]) -> Result<Mat> {
    validate(x.shape() == eps.shape(), || {
        format!("sample shape {:?} does not match noise shape {:?}", x.shape(), eps.shape())
    })?;
    validate(ts.len() == x.rows(), || {
        format!("{} timesteps for {} rows", ts.len(), x.rows())
    })?;
    let mut out = x.clone();
    for (r, &t) in ts.iter().enumerate() {
        schedule.check_timestep(t)?;
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        for (o, e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// Inclusive timestep interval `[t_min, t_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepRange {
    t_min: usize,
    t_max: usize,
}

impl TimestepRange {
    /// Requires `0 < t_min ≤ t_max < total_steps`. A single-point range is
    /// allowed.
    pub fn new(t_min: usize, t_max: usize, total_steps: usize) -> Result<Self> {
        validate(t_min > 0 && t_min <= t_max && t_max < total_steps, || {
            format!("invalid timestep range [{t_min}, {t_max}] for T={total_steps}")
        })?;
        Ok(TimestepRange { t_min, t_max })
    }

    pub fn t_min(&self) -> usize {
        self.t_min
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.t_min..=self.t_max).contains(&t)
    }
}

pub fn sample_timestep(range: TimestepRange, rng: &mut impl Rng) -> usize {
    rng.random_range(range.t_min..=range.t_max)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    #[default]
    None,
    Deterministic,
    Uniform,
}

impl std::str::FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShiftMode::None),
            "deterministic" => Ok(ShiftMode::Deterministic),
            "uniform" => Ok(ShiftMode::Uniform),
            other => Err(Error::Config(format!("unknown shift mode `{other}`"))),
        }
    }
}

/// Timestep shift rule `Δt ∈ [0, η·(t − t_min)]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftPolicy {
    mode: ShiftMode,
    eta: f64,
}

impl ShiftPolicy {
    pub fn new(mode: ShiftMode, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
        }
        Ok(ShiftPolicy { mode, eta })
    }

    pub fn none() -> Self {
        ShiftPolicy {
            mode: ShiftMode::None,
            eta: 0.0,
        }
    }

    pub fn mode(&self) -> ShiftMode {
        self.mode
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Largest shift the policy can produce at `t`: the rounded product in
    /// deterministic mode, the integer floor of the uniform support otherwise.
    pub fn max_shift(&self, t: usize, range: TimestepRange) -> usize {
        let span = t.saturating_sub(range.t_min) as f64;
        match self.mode {
            ShiftMode::None => 0,
            ShiftMode::Deterministic => (self.eta * span).round() as usize,
            ShiftMode::Uniform => (self.eta * span + SHIFT_FLOOR_EPS).floor() as usize,
        }
    }
}

/// Draws `Δt` for timestep `t`. The result always satisfies
/// `t + Δt ≤ total_steps − 1`; hitting that clamp is logged.
pub fn sample_shift(
    policy: ShiftPolicy,
    t: usize,
    range: TimestepRange,
    total_steps: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&policy.eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {}", policy.eta)));
    }
    validate(range.contains(t), || {
        format!("timestep {t} outside [{}, {}]", range.t_min, range.t_max)
    })?;
    let upper = policy.max_shift(t, range);
    let dt = match policy.mode {
        ShiftMode::None => 0,
        ShiftMode::Deterministic => upper,
        ShiftMode::Uniform => rng.random_range(0..=upper),
    };
    let limit = total_steps.saturating_sub(1).saturating_sub(t);
    if dt > limit {
        log::warn!("timestep shift clamped: t={t}, dt={dt}, limit={limit}");
        return Ok(limit);
    }
    Ok(dt)
}

/// Linear schedule of timestep ranges over an optimization run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealPlan {
    pub t_min_start: usize,
    pub t_min_end: usize,
    pub t_max_start: usize,
    pub t_max_end: usize,
    pub total_iters: usize,
}

impl AnnealPlan {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        validate(self.total_iters > 0, || "anneal plan needs total_iters > 0".into())?;
        TimestepRange::new(self.t_min_start, self.t_max_start, total_steps)?;
        TimestepRange::new(self.t_min_end, self.t_max_end, total_steps)?;
        Ok(())
    }
}

pub fn anneal_range(plan: &AnnealPlan, iter: usize, total_steps: usize) -> Result<TimestepRange> {
    validate(iter <= plan.total_iters, || {
        format!("iteration {iter} beyond anneal horizon {}", plan.total_iters)
    })?;
    let frac = iter as f64 / plan.total_iters as f64;
    let lerp = |a: usize, b: usize| (a as f64 + (b as f64 - a as f64) * frac).round() as usize;
    TimestepRange::new(
        lerp(plan.t_min_start, plan.t_min_end),
        lerp(plan.t_max_start, plan.t_max_end),
        total_steps,
    )
}
