//! A linear stand-in for 3D optimization: parameters `ψ ∈ R^D` seen through
//! per-view projections `P_π` with orthonormal rows, and a library of
//! ground-truth objects that defines what each view should look like.
//!
//! Projections share a common plane `B`: `P_π = a·Bᵀ + √(1−a²)·Q_πᵀ` with
//! each `Q_π` a slice of a random frame of the orthogonal complement of `B`. Objects are placed
//! around a circle inside that plane and given random detail off it, so the
//! same object looks alike from every view while every view still sees a
//! different slice of `ψ`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::distill::{DistillConfig, DistillVariant};
use crate::error::{Error, Result};
use crate::ode::ddim_invert;
use crate::oracle::{Component, Condition, GaussianMixture, Oracle};
use crate::rng;
use crate::schedule::{NoiseSchedule, TimeGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub id: usize,
    pub projection: DMatrix<f64>,
    pub condition: Condition,
}

impl View {
    pub fn render(&self, psi: &DVector<f64>) -> Result<DVector<f64>> {
        render(psi, self)
    }

    pub fn backproject(&self, grad_x: &DVector<f64>) -> Result<DVector<f64>> {
        backproject(grad_x, self)
    }
}

/// `x_π = P_π ψ`.
pub fn render(psi: &DVector<f64>, view: &View) -> Result<DVector<f64>> {
    if psi.len() != view.projection.ncols() {
        return Err(Error::DimensionMismatch {
            expected: view.projection.ncols(),
            got: psi.len(),
        });
    }
    Ok(&view.projection * psi)
}

/// `P_πᵀ g`, the exact adjoint of [`render`].
pub fn backproject(grad_x: &DVector<f64>, view: &View) -> Result<DVector<f64>> {
    if grad_x.len() != view.projection.nrows() {
        return Err(Error::DimensionMismatch {
            expected: view.projection.nrows(),
            got: grad_x.len(),
        });
    }
    Ok(view.projection.tr_mul(grad_x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibrarySpec {
    /// `D`, the parameter dimension.
    pub param_dim: usize,
    /// `d`, the rendered dimension.
    pub render_dim: usize,
    pub objects: usize,
    pub views: usize,
    /// Per-view mode scale `s`.
    pub scale: f64,
    pub seed: u64,
    /// Weight `a` of the shared plane in every projection.
    pub shared: f64,
    /// Radius of the circle the objects sit on inside the shared plane.
    pub radius: f64,
    /// Norm scale of each object's component off the shared plane.
    pub detail: f64,
}

impl LibrarySpec {
    pub fn new(param_dim: usize, render_dim: usize, objects: usize, views: usize, scale: f64, seed: u64) -> Self {
        Self {
            param_dim,
            render_dim,
            objects,
            views,
            scale,
            seed,
            shared: 0.9,
            radius: 2.0,
            detail: 0.5,
        }
    }

    /// The standard benchmark instance: 3 objects, `D = 8`, `d = 2`, 6 views.
    pub fn standard(seed: u64) -> Self {
        Self::new(8, 2, 3, 6, 0.1, seed)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.render_dim == 0 || self.objects == 0 || self.views == 0 {
            return bad("render_dim, objects and views must be at least 1".into());
        }
        if self.param_dim < 2 * self.render_dim {
            return bad(format!(
                "param_dim {} must be at least twice render_dim {}",
                self.param_dim, self.render_dim
            ));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if !(0.0..=1.0).contains(&self.shared) {
            return bad(format!("shared must lie in [0, 1], got {}", self.shared));
        }
        if !(self.radius.is_finite() && self.radius >= 0.0 && self.detail.is_finite() && self.detail >= 0.0) {
            return bad("radius and detail must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    spec: LibrarySpec,
    objects: Vec<DVector<f64>>,
    views: Vec<View>,
    oracle: Arc<Oracle>,
}

impl Scene {
    pub fn spec(&self) -> &LibrarySpec {
        &self.spec
    }

    pub fn objects(&self) -> &[DVector<f64>] {
        &self.objects
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    pub fn oracle(&self) -> &Arc<Oracle> {
        &self.oracle
    }

    pub fn param_dim(&self) -> usize {
        self.spec.param_dim
    }

    pub fn render_dim(&self) -> usize {
        self.spec.render_dim
    }

    /// Smallest distance between two objects' renders over all views.
    pub fn min_separation(&self) -> f64 {
        min_separation(&self.objects, &self.views)
    }
}

const MAX_TRIES: u64 = 200;

/// Optimizer steps used by the scene benchmark.
pub const SCENE_STEPS: usize = 600;

/// Settings the scene benchmark runs with. Guidance is 1 everywhere since
/// the unconditional model is the union of all views, and
/// `lr = 4·N_ddim/N` so the shared plane, which every view pushes on, does
/// not overshoot while off-plane detail still converges.
pub fn scene_config(variant: DistillVariant) -> DistillConfig {
    let mut cfg = DistillConfig::new(variant);
    cfg.steps = SCENE_STEPS;
    cfg.cfg_low = 1.0;
    cfg.cfg_path = 1.0;
    cfg.lr = 4.0 * cfg.ddim_steps as f64 / cfg.steps as f64;
    cfg
}

/// Condition for view `v` of the library.
pub fn view_condition(v: usize) -> Condition {
    Condition::View {
        object: 0,
        view: v as u32,
    }
}

fn orthonormal_columns(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

fn min_separation(objects: &[DVector<f64>], views: &[View]) -> f64 {
    let mut best = f64::INFINITY;
    for view in views {
        for j in 0..objects.len() {
            for k in j + 1..objects.len() {
                let d = (&view.projection * (&objects[j] - &objects[k])).norm();
                best = best.min(d);
            }
        }
    }
    best
}

pub fn build_library(spec: &LibrarySpec, schedule: NoiseSchedule) -> Result<Scene> {
    spec.validate()?;
    let (big_d, d, k_obj) = (spec.param_dim, spec.render_dim, spec.objects);
    let need = 10.0 * spec.scale;
    for attempt in 0..MAX_TRIES {
        let mut draws = rng::stream(spec.seed, attempt, "library");
        let mut gauss = |rows: usize, cols: usize| {
            let v = rng::standard_normal(&mut draws, rows * cols);
            DMatrix::from_column_slice(rows, cols, v.as_slice())
        };
        let basis = orthonormal_columns(gauss(big_d, big_d));
        let plane = basis.columns(0, d).into_owned();
        let rest = basis.columns(d, big_d - d).into_owned();

        let b = spec.shared;
        let off = (1.0 - b * b).max(0.0).sqrt();
        // Off-plane parts are consecutive d-column slices of a random frame of
        // the complement, so every parameter direction is seen by some view.
        // Every second pass over the frame flips its sign, which cancels the
        // plane/complement cross terms once views come in full pairs.
        let m = big_d - d;
        let mut frame = DMatrix::zeros(m, m);
        let mut used = m;
        let mut pass = 0usize;
        let mut views = Vec::with_capacity(spec.views);
        for v in 0..spec.views {
            if used + d > m {
                frame = if pass.is_multiple_of(2) {
                    orthonormal_columns(gauss(m, m))
                } else {
                    -frame
                };
                pass += 1;
                used = 0;
            }
            let q = &rest * frame.columns(used, d);
            used += d;
            views.push(View {
                id: v,
                projection: (plane.transpose() * b) + q.transpose() * off,
                condition: view_condition(v),
            });
        }

        let phase = draws_angle(&mut gauss);
        let objects: Vec<DVector<f64>> = (0..k_obj)
            .map(|k| {
                let mut center = DVector::zeros(d);
                if k_obj > 1 {
                    if d == 1 {
                        center[0] = spec.radius * (2.0 * k as f64 / (k_obj - 1) as f64 - 1.0);
                    } else {
                        let angle = phase + std::f64::consts::TAU * k as f64 / k_obj as f64;
                        center[0] = spec.radius * angle.cos();
                        center[1] = spec.radius * angle.sin();
                    }
                }
                let jitter = gauss(d, 1).column(0) * (spec.radius / 8.0);
                let detail = gauss(big_d - d, 1).column(0) * (spec.detail / ((big_d - d) as f64).sqrt());
                &plane * (center + jitter) + &rest * detail
            })
            .collect();

        if k_obj > 1 && min_separation(&objects, &views) < need {
            continue;
        }

        let mut builder = Oracle::builder(schedule);
        for view in &views {
            let comps = objects
                .iter()
                .map(|o| Component::new(1.0 / k_obj as f64, &view.projection * o, spec.scale))
                .collect();
            builder = builder.condition(view.condition, 1.0, GaussianMixture::normalized(comps)?);
        }
        return Ok(Scene {
            spec: spec.clone(),
            objects,
            views,
            oracle: Arc::new(builder.build()?),
        });
    }
    Err(Error::Library(format!(
        "no draw separated {} objects by {need} in every view after {MAX_TRIES} attempts",
        k_obj
    )))
}

fn draws_angle(gauss: &mut impl FnMut(usize, usize) -> DMatrix<f64>) -> f64 {
    let g = gauss(2, 1);
    g[1].atan2(g[0])
}

/// Inverts every object's render in every view to a seed and returns
/// `mean within-object seed distance / mean across-object seed distance`,
/// or `None` when there is only one object.
pub fn seed_dispersion_study(scene: &Scene, grid: &TimeGrid) -> Result<Option<f64>> {
    let k_obj = scene.objects.len();
    if k_obj < 2 {
        return Ok(None);
    }
    let t_max = scene.oracle.schedule().t_max();
    let mut seeds: Vec<(usize, DVector<f64>)> = Vec::new();
    for (k, obj) in scene.objects.iter().enumerate() {
        for view in &scene.views {
            let x0 = view.render(obj)?;
            let path = ddim_invert(&scene.oracle, &x0, view.condition, t_max, grid)?;
            seeds.push((k, path.last().x));
        }
    }
    let (mut within, mut n_within, mut across, mut n_across) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..seeds.len() {
        for j in i + 1..seeds.len() {
            let dist = (&seeds[i].1 - &seeds[j].1).norm();
            if seeds[i].0 == seeds[j].0 {
                within += dist;
                n_within += 1;
            } else {
                across += dist;
                n_across += 1;
            }
        }
    }
    if n_within == 0 {
        return Ok(Some(0.0));
    }
    let across = across / n_across as f64;
    if across == 0.0 {
        return Err(Error::Metric("all inverted seeds coincide".into()));
    }
    Ok(Some(within / n_within as f64 / across))
}
