//! Variance-preserving noise schedule and the time grids built on it.
//!
//! The forward process is `x(t) = √ᾱ(t)·x₀ + √(1−ᾱ(t))·ε`, so with
//! `s(t) = √ᾱ(t)` and `σ(t) = √(1−ᾱ(t))/√ᾱ(t)` the identity
//! `s² + (s·σ)² = 1` holds at every time.
//!
//! `ᾱ` follows a cosine shape, `cos²((t/T)·π/2)`, clamped into
//! `[clamp_eps, 1 − clamp_eps]` so neither endpoint is singular.

use crate::error::{Error, Result};

pub const DEFAULT_T_MAX: f64 = 1000.0;
pub const DEFAULT_CLAMP_EPS: f64 = 1e-4;

/// Relative slack used when comparing times against `[0, T]` and grid points.
const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    t_max: f64,
    clamp_eps: f64,
}

/// Everything the samplers need at one time, computed once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub alpha_bar: f64,
    /// `s(t) = √ᾱ`
    pub signal: f64,
    /// `√(1−ᾱ)`
    pub noise: f64,
    /// `σ(t) = √(1−ᾱ)/√ᾱ`
    pub sigma: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            t_max: DEFAULT_T_MAX,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }
}

impl NoiseSchedule {
    pub fn new(t_max: f64, clamp_eps: f64) -> Result<Self> {
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::InvalidParameter(format!("t_max must be positive, got {t_max}")));
        }
        if !(clamp_eps > 0.0 && clamp_eps < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "clamp_eps must lie in (0, 0.5), got {clamp_eps}"
            )));
        }
        Ok(Self { t_max, clamp_eps })
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn clamp_eps(&self) -> f64 {
        self.clamp_eps
    }

    /// Validates `t` and folds round-off just outside `[0, T]` back in.
    pub fn check_time(&self, t: f64) -> Result<f64> {
        let slack = TIME_TOL * self.t_max;
        if !t.is_finite() || t < -slack || t > self.t_max + slack {
            return Err(Error::TimeOutOfRange { t, t_max: self.t_max });
        }
        Ok(t.clamp(0.0, self.t_max))
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        let c = (t / self.t_max * std::f64::consts::FRAC_PI_2).cos();
        Ok((c * c).clamp(self.clamp_eps, 1.0 - self.clamp_eps))
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.coefficients(t)?.sigma)
    }

    /// `s(t) = √ᾱ(t)`.
    pub fn signal(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    pub fn coefficients(&self, t: f64) -> Result<Coefficients> {
        let alpha_bar = self.alpha_bar(t)?;
        let signal = alpha_bar.sqrt();
        let noise = (1.0 - alpha_bar).sqrt();
        Ok(Coefficients {
            alpha_bar,
            signal,
            noise,
            sigma: noise / signal,
        })
    }
}

/// Linear annealing `t = T(1 − i/N)`, floored at `t_min` when one is given.
pub fn anneal_time(index: usize, steps: usize, t_max: f64, t_min: Option<f64>) -> Result<f64> {
    if steps == 0 || index == 0 || index > steps {
        return Err(Error::StepOutOfRange { index, steps });
    }
    let t = t_max * (steps - index) as f64 / steps as f64;
    Ok(match t_min {
        Some(floor) => t.max(floor),
        None => t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridKind {
    /// Uniform DDIM grid `{T(1 − j/N)}` for `j = 0..N`.
    Ddim { steps: usize },
}

/// Strictly descending sampling times in `(0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    kind: GridKind,
    t_max: f64,
}

impl TimeGrid {
    pub fn ddim(t_max: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("a DDIM grid needs at least one step".into()));
        }
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::InvalidParameter(format!("t_max must be positive, got {t_max}")));
        }
        let points = (0..steps).map(|j| t_max * (steps - j) as f64 / steps as f64).collect();
        Ok(Self {
            points,
            kind: GridKind::Ddim { steps },
            t_max,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        match self.kind {
            GridKind::Ddim { steps } => steps,
        }
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    fn tol(&self) -> f64 {
        TIME_TOL * self.t_max
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = self.tol();
        self.points.iter().position(|&p| (p - t).abs() <= tol)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.index_of(t).is_some()
    }

    /// Smallest grid time `≥ t_plus`; anything above `T` lands on `T`.
    pub fn snap_up(&self, t_plus: f64) -> f64 {
        let tol = self.tol();
        self.points
            .iter()
            .rev()
            .copied()
            .find(|&p| p >= t_plus - tol)
            .unwrap_or(self.points[0])
    }

    /// Like [`snap_up`](Self::snap_up) but never returns a time at or below `floor`.
    pub fn snap_above(&self, floor: f64, t_plus: f64) -> f64 {
        let tol = self.tol();
        self.points
            .iter()
            .rev()
            .copied()
            .find(|&p| p >= t_plus - tol && p > floor + tol)
            .unwrap_or(self.points[0])
    }
}

/// Free-function form of [`TimeGrid::snap_up`].
pub fn snap_to_ddim_grid(t_plus: f64, grid: &TimeGrid) -> f64 {
    grid.snap_up(t_plus)
}
