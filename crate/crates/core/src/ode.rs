//! Deterministic DDIM stepping, inversion and a per-seed path cache.
//!
//! In the scaled variable `x̄ = x/√α` the probability-flow ODE reads
//! `dx̄/dσ = ε̂`, and one DDIM step is its Euler discretization in `σ`:
//! `x̄(t') = x̄(t) + (σ(t') − σ(t))·ε̂(t)`.

use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use lru::LruCache;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::oracle::{Condition, Guidance, Oracle};
use crate::schedule::{NoiseSchedule, TimeGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct OdeState {
    pub t: f64,
    pub x: DVector<f64>,
}

impl OdeState {
    pub fn new(t: f64, x: DVector<f64>) -> Self {
        Self { t, x }
    }

    /// `x̄(t) = x(t)/√α(t)`.
    pub fn x_bar(&self, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
        Ok(&self.x / schedule.signal(self.t)?)
    }
}

/// States visited by one solve, in visiting order, each with the noise
/// prediction made there.
#[derive(Debug, Clone, PartialEq)]
pub struct OdePath {
    condition: Condition,
    guidance: Guidance,
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    eps: Vec<DVector<f64>>,
}

impl OdePath {
    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn guidance(&self) -> Guidance {
        self.guidance
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn eps(&self) -> &[DVector<f64>] {
        &self.eps
    }

    fn position(&self, t: f64) -> Option<usize> {
        self.times
            .iter()
            .position(|&p| (p - t).abs() <= 1e-9 * p.abs().max(1.0))
    }

    pub fn state_at(&self, t: f64) -> Option<OdeState> {
        self.position(t)
            .map(|i| OdeState::new(self.times[i], self.states[i].clone()))
    }

    pub fn eps_at(&self, t: f64) -> Option<&DVector<f64>> {
        self.position(t).map(|i| &self.eps[i])
    }

    /// The state the solve started from; for a forward solve this is the seed.
    pub fn first(&self) -> OdeState {
        OdeState::new(self.times[0], self.states[0].clone())
    }

    pub fn last(&self) -> OdeState {
        let i = self.times.len() - 1;
        OdeState::new(self.times[i], self.states[i].clone())
    }

    pub fn last_eps(&self) -> &DVector<f64> {
        &self.eps[self.eps.len() - 1]
    }

    /// One-step data prediction `x̄ − σ ε` at a visited time.
    pub fn prediction_at(&self, schedule: &NoiseSchedule, t: f64) -> Result<DVector<f64>> {
        let i = self.position(t).ok_or(Error::OffGrid { t })?;
        prediction(schedule, self.times[i], &self.states[i], &self.eps[i])
    }

    /// Data prediction at the last visited time.
    pub fn sample(&self, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
        let i = self.times.len() - 1;
        prediction(schedule, self.times[i], &self.states[i], &self.eps[i])
    }
}

fn prediction(schedule: &NoiseSchedule, t: f64, x: &DVector<f64>, eps: &DVector<f64>) -> Result<DVector<f64>> {
    let c = schedule.coefficients(t)?;
    Ok(x / c.signal - eps * c.sigma)
}

fn check_finite(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn ddim_step(schedule: &NoiseSchedule, state: &OdeState, t_next: f64, eps: &DVector<f64>) -> Result<OdeState> {
    let now = schedule.coefficients(state.t)?;
    let next = schedule.coefficients(t_next)?;
    if eps.len() != state.x.len() {
        return Err(Error::DimensionMismatch {
            expected: state.x.len(),
            got: eps.len(),
        });
    }
    check_finite(eps, "eps")?;
    if t_next == state.t {
        return Ok(state.clone());
    }
    let x_bar = &state.x / now.signal + eps * (next.sigma - now.sigma);
    Ok(OdeState::new(t_next, x_bar * next.signal))
}

/// Descending times from `T` to `t_stop`; `t_stop` must be a grid point or 0.
fn forward_times(grid: &TimeGrid, t_stop: f64) -> Result<Vec<f64>> {
    if t_stop == 0.0 {
        let mut times = grid.points().to_vec();
        times.push(0.0);
        return Ok(times);
    }
    let i = grid.index_of(t_stop).ok_or(Error::OffGrid { t: t_stop })?;
    Ok(grid.points()[..=i].to_vec())
}

/// Integrates from `x(T) = seed` down to `t_stop` along `grid`.
pub fn ddim_forward(
    oracle: &Oracle,
    seed: &DVector<f64>,
    y: Condition,
    t_stop: f64,
    grid: &TimeGrid,
    guidance: Guidance,
) -> Result<OdePath> {
    check_grid(oracle, grid)?;
    if seed.len() != oracle.dim() {
        return Err(Error::DimensionMismatch {
            expected: oracle.dim(),
            got: seed.len(),
        });
    }
    check_finite(seed, "seed")?;
    let times = forward_times(grid, t_stop)?;
    walk(oracle, seed.clone(), y, guidance, &times, "forward solve")
}

/// Runs DDIM upward from `x(0) = x0` to `t_stop`, reusing each prediction
/// made at the lower-noise state for the step above it.
pub fn ddim_invert(oracle: &Oracle, x0: &DVector<f64>, y: Condition, t_stop: f64, grid: &TimeGrid) -> Result<OdePath> {
    check_grid(oracle, grid)?;
    if x0.len() != oracle.dim() {
        return Err(Error::DimensionMismatch {
            expected: oracle.dim(),
            got: x0.len(),
        });
    }
    check_finite(x0, "x0")?;
    let mut times = vec![0.0];
    if t_stop != 0.0 {
        let i = grid.index_of(t_stop).ok_or(Error::OffGrid { t: t_stop })?;
        times.extend(grid.points()[i..].iter().rev());
    }
    walk(oracle, x0.clone(), y, Guidance::NONE, &times, "inversion")
}

fn check_grid(oracle: &Oracle, grid: &TimeGrid) -> Result<()> {
    let t_max = oracle.schedule().t_max();
    if (grid.t_max() - t_max).abs() > 1e-9 * t_max {
        return Err(Error::InvalidParameter(format!(
            "grid spans [0, {}] but the schedule spans [0, {t_max}]",
            grid.t_max()
        )));
    }
    Ok(())
}

fn walk(
    oracle: &Oracle,
    start: DVector<f64>,
    y: Condition,
    guidance: Guidance,
    times: &[f64],
    what: &'static str,
) -> Result<OdePath> {
    let schedule = oracle.schedule();
    let mut state = OdeState::new(times[0], start);
    let mut path = OdePath {
        condition: y,
        guidance,
        times: Vec::with_capacity(times.len()),
        states: Vec::with_capacity(times.len()),
        eps: Vec::with_capacity(times.len()),
    };
    for (k, &t) in times.iter().enumerate() {
        if k > 0 {
            state = ddim_step(schedule, &state, t, &path.eps[k - 1])?;
            check_finite(&state.x, what)?;
        }
        let eps = oracle.guided_eps(&state.x, t, y, guidance)?;
        path.times.push(t);
        path.states.push(state.x.clone());
        path.eps.push(eps);
    }
    Ok(path)
}

/// Advances a one-step data prediction directly: `x₀ − σ(t')·(ε' − ε)`.
pub fn x0_update(
    schedule: &NoiseSchedule,
    x0_prev: &DVector<f64>,
    eps_next: &DVector<f64>,
    eps_prev: &DVector<f64>,
    t_next: f64,
) -> Result<DVector<f64>> {
    let n = x0_prev.len();
    for v in [eps_next, eps_prev] {
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
    }
    let sigma = schedule.sigma(t_next)?;
    if sigma == 0.0 {
        return Ok(x0_prev.clone());
    }
    Ok(x0_prev - (eps_next - eps_prev) * sigma)
}

/// Fine uniform-grid Euler solve of the probability-flow ODE, returning `x(0)`.
pub fn reference_integrate(
    oracle: &Oracle,
    seed: &DVector<f64>,
    y: Condition,
    steps: usize,
    guidance: Guidance,
) -> Result<DVector<f64>> {
    let grid = TimeGrid::ddim(oracle.schedule().t_max(), steps)?;
    Ok(ddim_forward(oracle, seed, y, 0.0, &grid, guidance)?.last().x)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct PathKey {
    seed: Vec<u64>,
    condition: Condition,
    steps: usize,
    guidance: u64,
}

#[derive(Debug, Default)]
struct Partial {
    states: Vec<DVector<f64>>,
    eps: Vec<DVector<f64>>,
}

pub const DEFAULT_CACHE_PATHS: usize = 64;

/// Bounded LRU cache of forward solves on one DDIM grid, extended lazily.
///
/// Each entry holds the prefix of one path; a query for a lower time
/// continues from the deepest cached state. Entries are locked
/// individually, so runs on different seeds do not contend.
pub struct PathCache {
    oracle: Arc<Oracle>,
    grid: TimeGrid,
    times: Vec<f64>,
    entries: Mutex<LruCache<PathKey, Arc<Mutex<Partial>>>>,
    evaluations: std::sync::atomic::AtomicU64,
}

impl PathCache {
    pub fn new(oracle: Arc<Oracle>, grid: TimeGrid, capacity: usize) -> Result<Self> {
        check_grid(&oracle, &grid)?;
        let cap = NonZeroUsize::new(capacity)
            .ok_or_else(|| Error::InvalidParameter("cache capacity must be at least 1".into()))?;
        let times = forward_times(&grid, 0.0)?;
        Ok(Self {
            oracle,
            grid,
            times,
            entries: Mutex::new(LruCache::new(cap)),
            evaluations: Default::default(),
        })
    }

    pub fn oracle(&self) -> &Arc<Oracle> {
        &self.oracle
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Noise predictions computed so far, across all entries.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(std::sync::atomic::Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// State and noise prediction at `t` (a grid time or 0) on the path
    /// from `seed`.
    pub fn get(
        &self,
        seed: &DVector<f64>,
        y: Condition,
        guidance: Guidance,
        t: f64,
    ) -> Result<(OdeState, DVector<f64>)> {
        let depth = if t == 0.0 {
            self.times.len() - 1
        } else {
            self.grid.index_of(t).ok_or(Error::OffGrid { t })?
        };
        if seed.len() != self.oracle.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.oracle.dim(),
                got: seed.len(),
            });
        }
        check_finite(seed, "seed")?;
        let key = PathKey {
            seed: seed.iter().map(|v| v.to_bits()).collect(),
            condition: y,
            steps: self.grid.steps(),
            guidance: guidance.scale().to_bits(),
        };
        let entry = {
            let mut map = self.entries.lock().expect("cache lock poisoned");
            map.get_or_insert(key, || Arc::new(Mutex::new(Partial::default())))
                .clone()
        };
        let mut partial = entry.lock().expect("cache entry poisoned");
        let schedule = self.oracle.schedule();
        while partial.states.len() <= depth {
            let k = partial.states.len();
            let x = if k == 0 {
                seed.clone()
            } else {
                let prev = OdeState::new(self.times[k - 1], partial.states[k - 1].clone());
                let next = ddim_step(schedule, &prev, self.times[k], &partial.eps[k - 1])?;
                check_finite(&next.x, "forward solve")?;
                next.x
            };
            let eps = self.oracle.guided_eps(&x, self.times[k], y, guidance)?;
            self.evaluations.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            partial.states.push(x);
            partial.eps.push(eps);
        }
        Ok((
            OdeState::new(self.times[depth], partial.states[depth].clone()),
            partial.eps[depth].clone(),
        ))
    }
}
