//! Score-distillation gradients and the plain gradient-descent loops that use them.
//!
//! Every rule returns a gradient with respect to the rendered image `x_π`;
//! the optimizer steps `x_π ← x_π − lr·grad`. Rules that need a reference
//! trajectory read it from a [`PathCache`] keyed by the run's prior draw `ε*`.
//!
//! The SDI and Consistent3D rules are reconstructions from prose
//! descriptions: SDI inverts the current image to find the higher-noise
//! prediction and then reuses the DSD interpolation, and Consistent3D is the
//! SDS residual with the fresh draw replaced by the fixed `ε*`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ode::{ddim_invert, PathCache, DEFAULT_CACHE_PATHS};
use crate::oracle::{Condition, Guidance, Oracle};
use crate::rng;
use crate::scene::Scene;
use crate::schedule::{anneal_time, TimeGrid, DEFAULT_T_MAX};

/// Runs whose iterate grows past this norm are aborted.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistillVariant {
    Sds,
    Asd,
    Sdi,
    Consistent3d,
    SamplingDsd,
    Dsd,
}

impl DistillVariant {
    pub const ALL: [DistillVariant; 6] = [
        DistillVariant::Sds,
        DistillVariant::Asd,
        DistillVariant::Sdi,
        DistillVariant::Consistent3d,
        DistillVariant::SamplingDsd,
        DistillVariant::Dsd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistillVariant::Sds => "sds",
            DistillVariant::Asd => "asd",
            DistillVariant::Sdi => "sdi",
            DistillVariant::Consistent3d => "consistent3d",
            DistillVariant::SamplingDsd => "sampling_dsd",
            DistillVariant::Dsd => "dsd",
        }
    }

    /// Variants that follow a deterministic ODE anneal their time; the
    /// stochastic baselines draw it uniformly.
    pub fn default_time_sampling(self) -> TimeSampling {
        match self {
            DistillVariant::Sds | DistillVariant::Asd | DistillVariant::Consistent3d => TimeSampling::Uniform,
            DistillVariant::Sdi | DistillVariant::SamplingDsd | DistillVariant::Dsd => TimeSampling::Annealed,
        }
    }
}

impl fmt::Display for DistillVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistillVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        DistillVariant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaRule {
    /// `δ = factor·(t − t_min)`
    Proportional { factor: f64 },
    /// `δ = T/N_ddim`, one grid spacing.
    GridSpacing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRule {
    /// `w = σ(t_lo)`
    SigmaLow,
    One,
}

/// Noise coefficient used for the lower-time interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    /// `√(1−α(t_lo))`, which keeps the sampling-equivalence exact.
    TimeMatched,
    /// `√(1−α(t_hi))` at both times.
    HighNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSampling {
    /// `t = max(T(1 − i/N), t_min)`
    Annealed,
    /// `t ~ Uniform(1, T)`
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub variant: DistillVariant,
    pub steps: usize,
    pub ddim_steps: usize,
    pub delta: DeltaRule,
    pub t_min: f64,
    pub weight: WeightRule,
    pub cfg_low: f64,
    pub cfg_high: f64,
    pub cfg_path: f64,
    pub lr: f64,
    pub interpolation: Interpolation,
    pub time_sampling: TimeSampling,
}

impl DistillConfig {
    pub fn new(variant: DistillVariant) -> Self {
        Self {
            variant,
            steps: 100,
            ddim_steps: 10,
            delta: DeltaRule::Proportional { factor: 0.1 },
            t_min: 0.02 * DEFAULT_T_MAX,
            weight: WeightRule::SigmaLow,
            cfg_low: 7.5,
            cfg_high: 1.0,
            cfg_path: 7.5,
            lr: 0.1,
            interpolation: Interpolation::TimeMatched,
            time_sampling: variant.default_time_sampling(),
        }
    }

    pub fn validate(&self, t_max: f64) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.ddim_steps == 0 {
            return bad("ddim_steps must be at least 1".into());
        }
        if !(self.t_min >= 0.0 && self.t_min < t_max) {
            return bad(format!("t_min must lie in [0, {t_max}), got {}", self.t_min));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [
            ("cfg_low", self.cfg_low),
            ("cfg_high", self.cfg_high),
            ("cfg_path", self.cfg_path),
        ] {
            Guidance::new(v).map_err(|_| Error::InvalidParameter(format!("{name} must be ≥ 0, got {v}")))?;
        }
        if let DeltaRule::Proportional { factor } = self.delta {
            if !(factor.is_finite() && factor >= 0.0) {
                return bad(format!("delta factor must be ≥ 0, got {factor}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub grad: DVector<f64>,
    pub eps_low: DVector<f64>,
    pub eps_high: DVector<f64>,
    pub t_low: f64,
    pub t_high: f64,
    pub weight: f64,
}

/// Identifies one run: the base key (normally a config hash) and a seed index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RunSeed {
    pub base: u64,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub t: f64,
    pub grad_norm: f64,
    pub x: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub final_x: DVector<f64>,
    pub trace: Vec<TraceStep>,
}

fn guidance(scale: f64) -> Result<Guidance> {
    Guidance::new(scale)
}

/// Gradient rules and optimization loops bound to one oracle and config.
pub struct Distiller {
    cache: Arc<PathCache>,
    config: DistillConfig,
    grid: TimeGrid,
}

impl Distiller {
    pub fn new(oracle: Arc<Oracle>, config: DistillConfig) -> Result<Self> {
        let grid = TimeGrid::ddim(oracle.schedule().t_max(), config.ddim_steps)?;
        let cache = Arc::new(PathCache::new(oracle, grid, DEFAULT_CACHE_PATHS)?);
        Self::with_cache(cache, config)
    }

    /// Shares an existing cache, whose grid must match `config.ddim_steps`.
    pub fn with_cache(cache: Arc<PathCache>, config: DistillConfig) -> Result<Self> {
        config.validate(cache.oracle().schedule().t_max())?;
        if cache.grid().steps() != config.ddim_steps {
            return Err(Error::InvalidParameter(format!(
                "cache grid has {} steps, config asks for {}",
                cache.grid().steps(),
                config.ddim_steps
            )));
        }
        let grid = cache.grid().clone();
        Ok(Self { cache, config, grid })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    pub fn oracle(&self) -> &Oracle {
        self.cache.oracle()
    }

    pub fn cache(&self) -> &Arc<PathCache> {
        &self.cache
    }

    fn t_max(&self) -> f64 {
        self.oracle().schedule().t_max()
    }

    pub fn delta(&self, t: f64) -> f64 {
        match self.config.delta {
            DeltaRule::Proportional { factor } => factor * (t - self.config.t_min).max(0.0),
            DeltaRule::GridSpacing => self.t_max() / self.config.ddim_steps as f64,
        }
    }

    /// Higher-noise time for a trajectory-backed rule: `t + δ` rounded up to
    /// the DDIM grid, strictly above `t`.
    pub fn t_high_on_grid(&self, t: f64) -> f64 {
        self.grid.snap_above(t, (t + self.delta(t)).min(self.t_max()))
    }

    fn weight(&self, t_low: f64) -> Result<f64> {
        Ok(match self.config.weight {
            WeightRule::SigmaLow => self.oracle().schedule().sigma(t_low)?,
            WeightRule::One => 1.0,
        })
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.oracle().dim() {
            return Err(Error::DimensionMismatch {
                expected: self.oracle().dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    fn noised(&self, x_pi: &DVector<f64>, t: f64, noise: &DVector<f64>, noise_coef_time: f64) -> Result<DVector<f64>> {
        let s = self.oracle().schedule();
        Ok(x_pi * s.signal(t)? + noise * s.coefficients(noise_coef_time)?.noise)
    }

    fn lower_noise_time(&self, t_low: f64, t_high: f64) -> f64 {
        match self.config.interpolation {
            Interpolation::TimeMatched => t_low,
            Interpolation::HighNoise => t_high,
        }
    }

    pub fn grad_sds(&self, x_pi: &DVector<f64>, t: f64, y: Condition, noise: &DVector<f64>) -> Result<GradReport> {
        self.check_dim(x_pi)?;
        self.check_dim(noise)?;
        let x_t = self.noised(x_pi, t, noise, t)?;
        let eps = self.oracle().guided_eps(&x_t, t, y, guidance(self.config.cfg_low)?)?;
        let w = self.weight(t)?;
        Ok(GradReport {
            grad: (&eps - noise) * w,
            eps_low: eps,
            eps_high: noise.clone(),
            t_low: t,
            t_high: t,
            weight: w,
        })
    }

    pub fn grad_asd(&self, x_pi: &DVector<f64>, t: f64, y: Condition, noise: &DVector<f64>) -> Result<GradReport> {
        self.check_dim(x_pi)?;
        self.check_dim(noise)?;
        let t_high = (t + self.delta(t)).min(self.t_max());
        let lo = self.noised(x_pi, t, noise, t)?;
        let hi = self.noised(x_pi, t_high, noise, t_high)?;
        let eps_low = self.oracle().guided_eps(&lo, t, y, guidance(self.config.cfg_low)?)?;
        let eps_high = self
            .oracle()
            .guided_eps(&hi, t_high, y, guidance(self.config.cfg_high)?)?;
        let w = self.weight(t)?;
        Ok(GradReport {
            grad: (&eps_low - &eps_high) * w,
            eps_low,
            eps_high,
            t_low: t,
            t_high,
            weight: w,
        })
    }

    pub fn grad_sdi(&self, x_pi: &DVector<f64>, t: f64, y: Condition) -> Result<GradReport> {
        self.check_dim(x_pi)?;
        let t_high = self.t_high_on_grid(t);
        let inverted = ddim_invert(self.oracle(), x_pi, y, t_high, &self.grid).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite("inversion"),
            other => other,
        })?;
        let eps_high = inverted.last_eps().clone();
        let lo = self.noised(x_pi, t, &eps_high, self.lower_noise_time(t, t_high))?;
        let eps_low = self.oracle().guided_eps(&lo, t, y, guidance(self.config.cfg_low)?)?;
        let w = self.weight(t)?;
        Ok(GradReport {
            grad: (&eps_low - &eps_high) * w,
            eps_low,
            eps_high,
            t_low: t,
            t_high,
            weight: w,
        })
    }

    pub fn grad_consistent3d(
        &self,
        x_pi: &DVector<f64>,
        t: f64,
        y: Condition,
        eps_star: &DVector<f64>,
    ) -> Result<GradReport> {
        self.check_dim(x_pi)?;
        self.check_dim(eps_star)?;
        let x_t = self.noised(x_pi, t, eps_star, t)?;
        let eps = self.oracle().guided_eps(&x_t, t, y, guidance(self.config.cfg_low)?)?;
        let w = self.weight(t)?;
        Ok(GradReport {
            grad: (&eps - eps_star) * w,
            eps_low: eps,
            eps_high: eps_star.clone(),
            t_low: t,
            t_high: t,
            weight: w,
        })
    }

    /// Gradient from the cached trajectory alone. `x(t_lo)` is the DDIM
    /// state reached from `x(t_hi)` with the trajectory's own prediction, so
    /// the result does not depend on the current image.
    pub fn grad_sampling_dsd(&self, t: f64, y: Condition, eps_star: &DVector<f64>) -> Result<GradReport> {
        self.check_dim(eps_star)?;
        let t_high = self.t_high_on_grid(t);
        let (state, eps_high) = self.cache.get(eps_star, y, guidance(self.config.cfg_path)?, t_high)?;
        let s = self.oracle().schedule();
        let hi = s.coefficients(t_high)?;
        let x0_high = (&state.x - &eps_high * hi.noise) / hi.signal;
        let lo = self.noised(&x0_high, t, &eps_high, t)?;
        let eps_low = self.oracle().guided_eps(&lo, t, y, guidance(self.config.cfg_low)?)?;
        let w = self.weight(t)?;
        Ok(GradReport {
            grad: (&eps_low - &eps_high) * w,
            eps_low,
            eps_high,
            t_low: t,
            t_high,
            weight: w,
        })
    }

    /// Both states are interpolations between the current image and the
    /// trajectory's prediction at `t_hi`, so a displaced image produces a
    /// restoring gradient.
    pub fn grad_dsd(&self, x_pi: &DVector<f64>, t: f64, y: Condition, eps_star: &DVector<f64>) -> Result<GradReport> {
        self.check_dim(x_pi)?;
        self.check_dim(eps_star)?;
        let t_high = self.t_high_on_grid(t);
        let (_, eps_path) = self.cache.get(eps_star, y, guidance(self.config.cfg_path)?, t_high)?;
        let hi = self.noised(x_pi, t_high, &eps_path, t_high)?;
        let lo = self.noised(x_pi, t, &eps_path, self.lower_noise_time(t, t_high))?;
        let eps_low = self.oracle().guided_eps(&lo, t, y, guidance(self.config.cfg_low)?)?;
        let eps_high = self
            .oracle()
            .guided_eps(&hi, t_high, y, guidance(self.config.cfg_high)?)?;
        let w = self.weight(t)?;
        Ok(GradReport {
            grad: (&eps_low - &eps_high) * w,
            eps_low,
            eps_high,
            t_low: t,
            t_high,
            weight: w,
        })
    }

    fn time_at<R: Rng>(&self, step: usize, rng: &mut R) -> Result<f64> {
        match self.config.time_sampling {
            TimeSampling::Annealed => anneal_time(step, self.config.steps, self.t_max(), Some(self.config.t_min)),
            TimeSampling::Uniform => Ok(rng.random_range(1.0..=self.t_max())),
        }
    }

    fn grad<R: Rng>(
        &self,
        x_pi: &DVector<f64>,
        t: f64,
        y: Condition,
        eps_star: &DVector<f64>,
        rng: &mut R,
    ) -> Result<GradReport> {
        match self.config.variant {
            DistillVariant::Sds => {
                let noise = rng::standard_normal(rng, x_pi.len());
                self.grad_sds(x_pi, t, y, &noise)
            }
            DistillVariant::Asd => {
                let noise = rng::standard_normal(rng, x_pi.len());
                self.grad_asd(x_pi, t, y, &noise)
            }
            DistillVariant::Sdi => self.grad_sdi(x_pi, t, y),
            DistillVariant::Consistent3d => self.grad_consistent3d(x_pi, t, y, eps_star),
            DistillVariant::SamplingDsd => self.grad_sampling_dsd(t, y, eps_star),
            DistillVariant::Dsd => self.grad_dsd(x_pi, t, y, eps_star),
        }
    }

    fn draws(&self, run: RunSeed) -> rng::Stream {
        rng::stream(run.base, run.index, self.config.variant.name())
    }

    /// Optimizes one image. Sampling-based DSD ignores `x_init` and starts
    /// from the trajectory's first data prediction, which makes its
    /// iterates the DDIM predictions when `N = N_ddim` and `lr = 1`.
    pub fn optimize_image(&self, x_init: &DVector<f64>, y: Condition, run: RunSeed) -> Result<RunOutput> {
        self.check_dim(x_init)?;
        let dim = self.oracle().dim();
        let eps_star = rng::eps_star(run.base, run.index, dim);
        let mut draws = self.draws(run);
        let mut x = if self.config.variant == DistillVariant::SamplingDsd {
            let t_max = self.t_max();
            let (state, eps) = self.cache.get(&eps_star, y, guidance(self.config.cfg_path)?, t_max)?;
            let c = self.oracle().schedule().coefficients(t_max)?;
            &state.x / c.signal - eps * c.sigma
        } else {
            x_init.clone()
        };
        let mut trace = Vec::with_capacity(self.config.steps);
        for step in 1..=self.config.steps {
            let t = self.time_at(step, &mut draws)?;
            let report = self.grad(&x, t, y, &eps_star, &mut draws)?;
            x -= &report.grad * self.config.lr;
            check_divergence(&x, step)?;
            trace.push(TraceStep {
                step,
                t,
                grad_norm: report.grad.norm(),
                x: x.clone(),
            });
        }
        Ok(RunOutput { final_x: x, trace })
    }

    /// Optimizes shared scene parameters through randomly drawn views, with
    /// one `ε*` for every view of the run.
    pub fn optimize_scene(&self, scene: &Scene, psi_init: &DVector<f64>, run: RunSeed) -> Result<RunOutput> {
        if psi_init.len() != scene.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: scene.param_dim(),
                got: psi_init.len(),
            });
        }
        if scene.render_dim() != self.oracle().dim() {
            return Err(Error::DimensionMismatch {
                expected: self.oracle().dim(),
                got: scene.render_dim(),
            });
        }
        let eps_star = rng::eps_star(run.base, run.index, scene.render_dim());
        let mut draws = self.draws(run);
        let mut psi = psi_init.clone();
        let views = scene.views();
        let mut trace = Vec::with_capacity(self.config.steps);
        for step in 1..=self.config.steps {
            let t = self.time_at(step, &mut draws)?;
            let view = &views[draws.random_range(0..views.len())];
            let x_pi = view.render(&psi)?;
            let report = self.grad(&x_pi, t, view.condition, &eps_star, &mut draws)?;
            psi -= view.backproject(&report.grad)? * self.config.lr;
            check_divergence(&psi, step)?;
            trace.push(TraceStep {
                step,
                t,
                grad_norm: report.grad.norm(),
                x: psi.clone(),
            });
        }
        Ok(RunOutput { final_x: psi, trace })
    }
}

fn check_divergence(x: &DVector<f64>, step: usize) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::Diverged { step, norm });
    }
    Ok(())
}
