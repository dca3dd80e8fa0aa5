//! Exact noise predictors for isotropic Gaussian mixtures.
//!
//! Under the forward process each component `N(μ_k, s_k² I)` becomes
//! `N(√α μ_k, C_k I)` with `C_k = α s_k² + (1 − α)`, so the noise predictor
//! `ε̂ = −√(1−α) ∇ log p_t` has the closed form
//! `√(1−α) Σ_k r_k (x − √α μ_k) / C_k` with `r_k` the posterior
//! responsibilities. Everything here is a pure function of its inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::schedule::{Coefficients, NoiseSchedule};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Unconditional,
    Label(u32),
    View { object: u32, view: u32 },
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Unconditional => write!(f, "uncond"),
            Condition::Label(id) => write!(f, "label:{id}"),
            Condition::View { object, view } => write!(f, "view:{object}:{view}"),
        }
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| p.parse::<u32>().map_err(|_| format!("bad id {p:?} in condition {s:?}"));
        match parts.as_slice() {
            ["uncond"] => Ok(Condition::Unconditional),
            ["label", id] => Ok(Condition::Label(num(id)?)),
            ["view", o, v] => Ok(Condition::View {
                object: num(o)?,
                view: num(v)?,
            }),
            _ => Err(format!("unrecognized condition {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub scale: f64,
}

impl Component {
    pub fn new(weight: f64, mean: DVector<f64>, scale: f64) -> Self {
        Self { weight, mean, scale }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

impl GaussianMixture {
    /// Builds a mixture whose weights already sum to one (within 1e−12).
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidMixture("no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidMixture("dimension must be at least 1".into()));
        }
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.mean.len(),
                });
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::InvalidMixture(format!(
                    "component {k}: weight {} is not positive",
                    c.weight
                )));
            }
            if !(c.scale.is_finite() && c.scale > 0.0) {
                return Err(Error::InvalidMixture(format!(
                    "component {k}: scale {} is not positive",
                    c.scale
                )));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!("component {k}: mean is not finite")));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { dim, components })
    }

    /// Rescales positive weights to sum to one, then validates.
    pub fn normalized(mut components: Vec<Component>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Self::new(components)
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::new(vec![Component::new(1.0, DVector::zeros(dim), 1.0)])
    }

    /// Union of weighted mixtures; `weights` need not be normalized.
    pub fn union(parts: &[(f64, &GaussianMixture)]) -> Result<Self> {
        let mut components = Vec::new();
        for (w, m) in parts {
            for c in &m.components {
                components.push(Component::new(w * c.weight, c.mean.clone(), c.scale));
            }
        }
        Self::normalized(components)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("x"));
        }
        Ok(())
    }

    /// Per-component log of `w_k N(x; √α μ_k, C_k I)` and each `C_k`.
    fn log_terms(&self, x: &DVector<f64>, c: &Coefficients) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim as f64;
        let mut logs = Vec::with_capacity(self.components.len());
        let mut vars = Vec::with_capacity(self.components.len());
        for comp in &self.components {
            let var = c.alpha_bar * comp.scale * comp.scale + (1.0 - c.alpha_bar);
            let mut sq = 0.0;
            for (xi, mi) in x.iter().zip(comp.mean.iter()) {
                let r = xi - c.signal * mi;
                sq += r * r;
            }
            logs.push(comp.weight.ln() - 0.5 * sq / var - 0.5 * d * (LN_2PI + var.ln()));
            vars.push(var);
        }
        (logs, vars)
    }

    pub fn log_marginal_at(&self, x: &DVector<f64>, c: &Coefficients) -> Result<f64> {
        self.check_point(x)?;
        let (logs, _) = self.log_terms(x, c);
        Ok(log_sum_exp(&logs))
    }

    pub fn eps_at(&self, x: &DVector<f64>, c: &Coefficients) -> Result<DVector<f64>> {
        self.check_point(x)?;
        let (logs, vars) = self.log_terms(x, c);
        let lse = log_sum_exp(&logs);
        let mut out = DVector::zeros(self.dim);
        for ((comp, lg), var) in self.components.iter().zip(&logs).zip(&vars) {
            let r = (lg - lse).exp();
            if r == 0.0 {
                continue;
            }
            let k = r / var;
            for ((o, xi), mi) in out.iter_mut().zip(x.iter()).zip(comp.mean.iter()) {
                *o += k * (xi - c.signal * mi);
            }
        }
        Ok(out * c.noise)
    }

    /// Exact data log-density `log p₀(x)` with no diffusion applied.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let c = Coefficients {
            alpha_bar: 1.0,
            signal: 1.0,
            noise: 0.0,
            sigma: 0.0,
        };
        self.log_marginal_at(x, &c)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `eps_uncond + scale·(eps_cond − eps_uncond)`, with the scale-1 and
/// scale-0 cases returned exactly.
pub fn cfg_combine(eps_cond: &DVector<f64>, eps_uncond: &DVector<f64>, scale: f64) -> Result<DVector<f64>> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::DimensionMismatch {
            expected: eps_cond.len(),
            got: eps_uncond.len(),
        });
    }
    if !scale.is_finite() {
        return Err(Error::NonFinite("cfg scale"));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok(eps_uncond + (eps_cond - eps_uncond) * scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    scale: f64,
}

impl Guidance {
    pub const NONE: Guidance = Guidance { scale: 1.0 };

    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::InvalidParameter(format!("cfg scale must be ≥ 0, got {scale}")));
        }
        Ok(Self { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// A schedule plus one mixture per registered condition. The unconditional
/// mixture is the prior-weighted union of every conditional one.
#[derive(Debug, Clone)]
pub struct Oracle {
    schedule: NoiseSchedule,
    dim: usize,
    conditional: BTreeMap<Condition, GaussianMixture>,
    marginal: GaussianMixture,
}

pub struct OracleBuilder {
    schedule: NoiseSchedule,
    entries: Vec<(Condition, f64, GaussianMixture)>,
}

impl OracleBuilder {
    /// Registers a conditional mixture with prior weight `prior` in the
    /// unconditional union.
    pub fn condition(mut self, y: Condition, prior: f64, mixture: GaussianMixture) -> Self {
        self.entries.push((y, prior, mixture));
        self
    }

    pub fn build(self) -> Result<Oracle> {
        let first = self
            .entries
            .first()
            .ok_or_else(|| Error::InvalidMixture("an oracle needs at least one condition".into()))?;
        let dim = first.2.dim();
        let mut conditional = BTreeMap::new();
        for (y, prior, m) in &self.entries {
            if *y == Condition::Unconditional {
                return Err(Error::InvalidMixture(
                    "the unconditional mixture is derived, not registered".into(),
                ));
            }
            if m.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.dim(),
                });
            }
            if !(prior.is_finite() && *prior > 0.0) {
                return Err(Error::InvalidMixture(format!("prior weight for {y} must be positive")));
            }
            if conditional.insert(*y, m.clone()).is_some() {
                return Err(Error::InvalidMixture(format!("condition {y} registered twice")));
            }
        }
        let parts: Vec<(f64, &GaussianMixture)> = self.entries.iter().map(|(_, w, m)| (*w, m)).collect();
        let marginal = GaussianMixture::union(&parts)?;
        Ok(Oracle {
            schedule: self.schedule,
            dim,
            conditional,
            marginal,
        })
    }
}

impl Oracle {
    pub fn builder(schedule: NoiseSchedule) -> OracleBuilder {
        OracleBuilder {
            schedule,
            entries: Vec::new(),
        }
    }

    /// One mixture registered as `Label(0)`; guidance is inert.
    pub fn single(schedule: NoiseSchedule, mixture: GaussianMixture) -> Result<Self> {
        Self::builder(schedule)
            .condition(Condition::Label(0), 1.0, mixture)
            .build()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn conditions(&self) -> impl Iterator<Item = Condition> + '_ {
        self.conditional.keys().copied()
    }

    pub fn mixture(&self, y: Condition) -> Result<&GaussianMixture> {
        match y {
            Condition::Unconditional => Ok(&self.marginal),
            _ => self.conditional.get(&y).ok_or(Error::UnknownCondition(y)),
        }
    }

    pub fn eps_predict(&self, x: &DVector<f64>, t: f64, y: Condition) -> Result<DVector<f64>> {
        let m = self.mixture(y)?;
        let c = self.schedule.coefficients(t)?;
        m.eps_at(x, &c)
    }

    /// Conditional prediction pushed away from the unconditional one by `guidance`.
    pub fn guided_eps(&self, x: &DVector<f64>, t: f64, y: Condition, guidance: Guidance) -> Result<DVector<f64>> {
        let cond = self.eps_predict(x, t, y)?;
        if guidance.scale == 1.0 || y == Condition::Unconditional {
            return Ok(cond);
        }
        let uncond = self.eps_predict(x, t, Condition::Unconditional)?;
        cfg_combine(&cond, &uncond, guidance.scale)
    }

    /// One-step data prediction `x/√α − σ ε̂`.
    pub fn posterior_x0(&self, x: &DVector<f64>, t: f64, y: Condition) -> Result<DVector<f64>> {
        let c = self.schedule.coefficients(t)?;
        let eps = self.mixture(y)?.eps_at(x, &c)?;
        Ok(x / c.signal - eps * c.sigma)
    }

    pub fn log_marginal(&self, x: &DVector<f64>, t: f64, y: Condition) -> Result<f64> {
        let m = self.mixture(y)?;
        let c = self.schedule.coefficients(t)?;
        m.log_marginal_at(x, &c)
    }

    pub fn log_density(&self, x: &DVector<f64>, y: Condition) -> Result<f64> {
        self.mixture(y)?.log_density(x)
    }
}
