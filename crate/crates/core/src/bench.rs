//! The fixed mixtures the test suite and the harness benchmark against.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::Result;
use crate::oracle::{Component, Condition, GaussianMixture, Oracle};
use crate::schedule::NoiseSchedule;

/// Mode scale of the two-mode benchmark.
pub const TWO_MODE_SCALE: f64 = 0.1;

/// Starting point shared by every variant on the two-mode benchmark. It sits
/// a quarter of the way to the `+2` mode so that mode-seeking methods have a
/// side to collapse to.
pub const TWO_MODE_INIT: f64 = 0.5;

/// The condition every single-mixture benchmark is registered under.
pub const LABEL: Condition = Condition::Label(0);

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

/// Equal-weight modes at `±2` in 1D with scale 0.1.
pub fn two_mode() -> Result<Oracle> {
    let m = GaussianMixture::new(vec![
        Component::new(0.5, v(&[-2.0]), TWO_MODE_SCALE),
        Component::new(0.5, v(&[2.0]), TWO_MODE_SCALE),
    ])?;
    Oracle::single(NoiseSchedule::default(), m)
}

pub fn two_mode_modes() -> Vec<DVector<f64>> {
    vec![v(&[-2.0]), v(&[2.0])]
}

/// Three unequal modes in 2D.
pub fn three_mode_2d() -> Result<Oracle> {
    let m = GaussianMixture::new(vec![
        Component::new(0.4, v(&[1.5, 0.0]), 0.15),
        Component::new(0.35, v(&[-1.0, 1.2]), 0.2),
        Component::new(0.25, v(&[-0.8, -1.4]), 0.1),
    ])?;
    Oracle::single(NoiseSchedule::default(), m)
}

/// Two labels in 2D, each a mixture of its own. Guidance is live here since
/// the unconditional model is the union of both labels.
pub fn labelled_2d() -> Result<Oracle> {
    let a = GaussianMixture::new(vec![
        Component::new(0.5, v(&[1.0, 1.0]), 0.2),
        Component::new(0.5, v(&[2.0, -0.5]), 0.2),
    ])?;
    let b = GaussianMixture::new(vec![Component::new(1.0, v(&[-1.5, 0.5]), 0.3)])?;
    Oracle::builder(NoiseSchedule::default())
        .condition(Condition::Label(0), 0.6, a)
        .condition(Condition::Label(1), 0.4, b)
        .build()
}

/// `N(0, I)` in `dim` dimensions.
pub fn standard_normal(dim: usize) -> Result<Oracle> {
    Oracle::single(NoiseSchedule::default(), GaussianMixture::standard_normal(dim)?)
}

/// Every named benchmark with the condition to query it under.
pub fn registered() -> Result<Vec<(&'static str, Arc<Oracle>, Condition)>> {
    Ok(vec![
        ("two_mode", Arc::new(two_mode()?), LABEL),
        ("three_mode_2d", Arc::new(three_mode_2d()?), LABEL),
        ("labelled_2d", Arc::new(labelled_2d()?), Condition::Label(0)),
        ("labelled_2d_b", Arc::new(labelled_2d()?), Condition::Label(1)),
        ("gaussian_3d", Arc::new(standard_normal(3)?), LABEL),
    ])
}
