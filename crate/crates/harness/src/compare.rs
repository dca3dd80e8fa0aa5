//! Per-variant metrics over a finals file.
//!
//! `metrics.csv`: `variant, n, diversity, coverage, nll, w2`. Cells that do
//! not apply (diversity of a single sample, NLL of scene parameters, W₂
//! without a same-size reference) are left empty.

use std::path::Path;

use anyhow::Context;
use distill_lab::metrics::{
    fidelity_nll, mode_coverage, pairwise_diversity, wasserstein2, SampleMeta, SampleSet, MAX_W2_SIZE,
};
use distill_lab::oracle::{Condition, Oracle};
use distill_lab::scene::build_library;
use distill_lab::DVector;

use crate::config::ExperimentConfig;
use crate::sweep::FinalRow;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub variant: String,
    pub n: usize,
    pub diversity: Option<f64>,
    pub coverage: usize,
    pub nll: Option<f64>,
    pub w2: Option<f64>,
}

/// Ground-truth modes and the coverage radius: `10·s` of the tightest
/// component, shrunk to half the closest mode separation so that one
/// sample can never count for two modes.
pub struct Modes {
    pub centers: Vec<DVector<f64>>,
    pub tau: f64,
}

fn modes_from(centers: Vec<DVector<f64>>, min_scale: f64) -> Modes {
    let mut sep = f64::INFINITY;
    for (i, a) in centers.iter().enumerate() {
        for b in &centers[i + 1..] {
            sep = sep.min((a - b).norm());
        }
    }
    Modes {
        tau: (10.0 * min_scale).min(0.5 * sep),
        centers,
    }
}

pub fn image_modes(oracle: &Oracle, y: Condition) -> distill_lab::Result<Modes> {
    let m = oracle.mixture(y)?;
    let s = m.components().iter().map(|c| c.scale).fold(f64::INFINITY, f64::min);
    Ok(modes_from(m.components().iter().map(|c| c.mean.clone()).collect(), s))
}

fn set(rows: &[&FinalRow]) -> distill_lab::Result<SampleSet> {
    SampleSet::new(
        rows.iter().map(|r| DVector::from_column_slice(&r.x)).collect(),
        rows.iter()
            .map(|r| SampleMeta {
                variant: r.variant.clone(),
                seed_index: r.seed_index,
            })
            .collect(),
    )
}

/// Metrics of every variant in `finals`, in order of first appearance.
/// Scene parameters are recognized by their dimension; W₂ is taken against
/// the reference rows with the same seed indices.
pub fn compare(cfg: &ExperimentConfig, finals: &[FinalRow], reference: &[FinalRow]) -> anyhow::Result<Vec<MetricRow>> {
    let mut variants: Vec<&str> = Vec::new();
    for r in finals {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let dim = finals.first().map_or(0, |r| r.x.len());
    let scene_dim = cfg.scene.as_ref().map(|s| s.param_dim);
    let image = if !cfg.conditions.is_empty() {
        Some(cfg.oracle()?)
    } else {
        None
    };
    let y = cfg.condition().unwrap_or(Condition::Unconditional);
    let (modes, oracle) = match (&image, scene_dim) {
        (Some(o), _) if o.dim() == dim => (image_modes(o, y)?, Some(o)),
        (_, Some(d)) if d == dim => {
            let spec = cfg.scene.as_ref().expect("scene");
            let scene = build_library(spec, cfg.noise_schedule()?)?;
            (modes_from(scene.objects().to_vec(), spec.scale), None)
        }
        _ => anyhow::bail!("finals have dimension {dim}, which matches neither the mixtures nor the scene"),
    };
    let mut out = Vec::new();
    for v in variants {
        let rows: Vec<&FinalRow> = finals.iter().filter(|r| r.variant == v).collect();
        let s = set(&rows)?;
        let refs: Vec<&FinalRow> = rows
            .iter()
            .filter_map(|r| {
                reference
                    .iter()
                    .find(|q| q.seed_index == r.seed_index && q.x.len() == dim)
            })
            .collect();
        let w2 = if refs.len() == rows.len() && rows.len() <= MAX_W2_SIZE {
            Some(wasserstein2(&s, &set(&refs)?)?)
        } else {
            None
        };
        out.push(MetricRow {
            variant: v.to_string(),
            n: rows.len(),
            diversity: (rows.len() >= 2).then(|| pairwise_diversity(&s)).transpose()?,
            coverage: mode_coverage(&s, &modes.centers, modes.tau)?,
            nll: oracle.map(|o| fidelity_nll(&s, o, y)).transpose()?,
            w2,
        });
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> anyhow::Result<()> {
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v}"));
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["variant", "n", "diversity", "coverage", "nll", "w2"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.n.to_string(),
            cell(r.diversity),
            r.coverage.to_string(),
            cell(r.nll),
            cell(r.w2),
        ])?;
    }
    w.flush()?;
    Ok(())
}
