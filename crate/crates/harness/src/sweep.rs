//! Seed sweeps and the CSV files they leave behind.
//!
//! `manifest.csv`: `run_id, variant, seed_index, config_hash, status, error, trace, wall_ms`
//! `finals.csv`: `run_id, variant, seed_index, x0, x1, ...`
//! `traces/run_<run_id>.csv`: `run_id, variant, seed_index, step, t, grad_norm, x0, x1, ...`
//!
//! Rows come out in job order (variant order of the config, then seed), and
//! floats are written in their shortest round-trip form, so the finals file
//! depends only on the config and the seed range. Wall times appear only in
//! the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use distill_lab::distill::{DistillVariant, Distiller, RunSeed, TraceStep};
use distill_lab::ode::{ddim_forward, ddim_invert, PathCache, DEFAULT_CACHE_PATHS};
use distill_lab::oracle::{Condition, Guidance, Oracle};
use distill_lab::rng;
use distill_lab::scene::{build_library, Scene};
use distill_lab::schedule::TimeGrid;
use distill_lab::DVector;
use rayon::prelude::*;

use crate::config::ExperimentConfig;

/// Caps the worker count of every sweep.
pub const THREADS_ENV: &str = "DISTILL_LAB_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub enum Job {
    /// A direct DDIM sample from the seed's `ε*`.
    Ddim { seed: u64 },
    /// The DDIM inversion of one input point up to `T`.
    Invert { index: u64, point: Vec<f64> },
    /// Distillation of a free image.
    Image { variant: DistillVariant, seed: u64 },
    /// Distillation of the scene parameters through random views.
    Scene { variant: DistillVariant, seed: u64 },
}

impl Job {
    pub fn variant(&self) -> String {
        match self {
            Job::Ddim { .. } => "ddim".into(),
            Job::Invert { .. } => "invert".into(),
            Job::Image { variant, .. } | Job::Scene { variant, .. } => variant.name().into(),
        }
    }

    pub fn seed_index(&self) -> u64 {
        match self {
            Job::Ddim { seed } | Job::Image { seed, .. } | Job::Scene { seed, .. } => *seed,
            Job::Invert { index, .. } => *index,
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}", self.variant(), self.seed_index())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub variant: String,
    pub seed_index: u64,
    pub config_hash: String,
    pub status: RunStatus,
    pub final_x: Option<DVector<f64>>,
    /// Trace path relative to the output directory.
    pub trace: Option<String>,
    pub wall_ms: u128,
    pub steps: Vec<TraceStep>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

pub fn image_jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    cfg.distill
        .variants
        .iter()
        .flat_map(|&variant| cfg.sweep.seeds.clone().map(move |seed| Job::Image { variant, seed }))
        .collect()
}

pub fn scene_jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    cfg.distill
        .variants
        .iter()
        .flat_map(|&variant| cfg.sweep.seeds.clone().map(move |seed| Job::Scene { variant, seed }))
        .collect()
}

pub fn ddim_jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    cfg.sweep.seeds.clone().map(|seed| Job::Ddim { seed }).collect()
}

pub fn invert_jobs(points: Vec<Vec<f64>>) -> Vec<Job> {
    points
        .into_iter()
        .enumerate()
        .map(|(i, point)| Job::Invert { index: i as u64, point })
        .collect()
}

/// Everything the runs share: the oracle, the scene and one path cache per
/// DDIM grid size.
struct Shared {
    base: u64,
    hash: String,
    condition: Condition,
    image: Option<Arc<Oracle>>,
    scene: Option<Scene>,
    caches: BTreeMap<(bool, usize), Arc<PathCache>>,
}

impl Shared {
    fn new(cfg: &ExperimentConfig, jobs: &[Job]) -> anyhow::Result<Self> {
        let needs_scene = jobs.iter().any(|j| matches!(j, Job::Scene { .. }));
        let needs_image = jobs.iter().any(|j| !matches!(j, Job::Scene { .. }));
        let image = if needs_image {
            if cfg.conditions.is_empty() {
                bail!("this command needs at least one [condition.<tag>] block");
            }
            Some(Arc::new(cfg.oracle()?))
        } else {
            None
        };
        let scene = match (&cfg.scene, needs_scene) {
            (Some(spec), true) => Some(build_library(spec, cfg.noise_schedule()?)?),
            (None, true) => bail!("distill3d needs a [scene] block"),
            _ => None,
        };
        let mut caches = BTreeMap::new();
        for &variant in &cfg.distill.variants {
            let n = cfg.distill_config(variant).ddim_steps;
            for (is_scene, oracle) in [(false, image.as_ref()), (true, scene.as_ref().map(|s| s.oracle()))] {
                if let Some(oracle) = oracle {
                    if let std::collections::btree_map::Entry::Vacant(e) = caches.entry((is_scene, n)) {
                        let grid = TimeGrid::ddim(oracle.schedule().t_max(), n)?;
                        e.insert(Arc::new(PathCache::new(oracle.clone(), grid, DEFAULT_CACHE_PATHS)?));
                    }
                }
            }
        }
        Ok(Self {
            base: cfg.seed_base(),
            hash: cfg.hash(),
            condition: cfg.condition().unwrap_or(Condition::Unconditional),
            image,
            scene,
            caches,
        })
    }

    fn run(&self, cfg: &ExperimentConfig, job: &Job) -> distill_lab::Result<(DVector<f64>, Vec<TraceStep>)> {
        match job {
            Job::Ddim { seed } => {
                let oracle = self.image.as_ref().expect("image oracle");
                let d = cfg.distill_config(DistillVariant::SamplingDsd);
                let grid = TimeGrid::ddim(oracle.schedule().t_max(), d.ddim_steps)?;
                let eps = rng::eps_star(self.base, *seed, oracle.dim());
                let path = ddim_forward(oracle, &eps, self.condition, 0.0, &grid, Guidance::new(d.cfg_path)?)?;
                Ok((path.sample(oracle.schedule())?, path_trace(path.times(), path.states())))
            }
            Job::Invert { point, .. } => {
                let oracle = self.image.as_ref().expect("image oracle");
                let d = cfg.distill_config(DistillVariant::SamplingDsd);
                let t_max = oracle.schedule().t_max();
                let grid = TimeGrid::ddim(t_max, d.ddim_steps)?;
                let path = ddim_invert(oracle, &DVector::from_column_slice(point), self.condition, t_max, &grid)?;
                Ok((path.last().x, path_trace(path.times(), path.states())))
            }
            Job::Image { variant, seed } => {
                let oracle = self.image.as_ref().expect("image oracle");
                let d = cfg.distill_config(*variant);
                let cache = self.caches[&(false, d.ddim_steps)].clone();
                let out = Distiller::with_cache(cache, d)?.optimize_image(
                    &cfg.x_init(oracle.dim()),
                    self.condition,
                    RunSeed {
                        base: self.base,
                        index: *seed,
                    },
                )?;
                Ok((out.final_x, out.trace))
            }
            Job::Scene { variant, seed } => {
                let scene = self.scene.as_ref().expect("scene");
                let d = cfg.distill_config(*variant);
                let cache = self.caches[&(true, d.ddim_steps)].clone();
                let out = Distiller::with_cache(cache, d)?.optimize_scene(
                    scene,
                    &cfg.x_init(scene.param_dim()),
                    RunSeed {
                        base: self.base,
                        index: *seed,
                    },
                )?;
                Ok((out.final_x, out.trace))
            }
        }
    }
}

/// Trace rows for a DDIM path; `grad_norm` holds the length of each step.
fn path_trace(times: &[f64], states: &[DVector<f64>]) -> Vec<TraceStep> {
    states
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, x)| TraceStep {
            step: i,
            t: times[i],
            grad_norm: (x - &states[i - 1]).norm(),
            x: x.clone(),
        })
        .collect()
}

/// Worker count: the requested parallelism capped by `DISTILL_LAB_THREADS`.
pub fn thread_count(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(usize::MAX);
    requested.clamp(1, cap.max(1))
}

/// Runs every job, one thread per run, on a pool of `parallel` workers.
/// Failures and panics are confined to their own record.
pub fn run_jobs(cfg: &ExperimentConfig, jobs: &[Job], parallel: usize) -> anyhow::Result<Vec<RunRecord>> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let ctx = Shared::new(cfg, jobs)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(parallel))
        .build()
        .context("building the worker pool")?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let start = Instant::now();
                let result = panic::catch_unwind(AssertUnwindSafe(|| ctx.run(cfg, job)));
                let wall_ms = start.elapsed().as_millis();
                let (status, final_x, steps) = match result {
                    Ok(Ok((x, steps))) => (RunStatus::Ok, Some(x), steps),
                    Ok(Err(e)) => (RunStatus::Failed(e.to_string()), None, Vec::new()),
                    Err(p) => {
                        let msg = p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panic".into());
                        (RunStatus::Failed(format!("panicked: {msg}")), None, Vec::new())
                    }
                };
                let run_id = job.run_id();
                RunRecord {
                    trace: (!steps.is_empty()).then(|| format!("traces/run_{run_id}.csv")),
                    run_id,
                    variant: job.variant(),
                    seed_index: job.seed_index(),
                    config_hash: ctx.hash.clone(),
                    status,
                    final_x,
                    wall_ms,
                    steps,
                }
            })
            .collect()
    }))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn x_header(prefix: &[&str], dim: usize) -> Vec<String> {
    prefix
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|i| format!("x{i}")))
        .collect()
}

pub fn write_finals(path: &Path, records: &[RunRecord]) -> anyhow::Result<()> {
    let dim = records
        .iter()
        .find_map(|r| r.final_x.as_ref().map(|x| x.len()))
        .unwrap_or(0);
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(x_header(&["run_id", "variant", "seed_index"], dim))?;
    for r in records {
        if let Some(x) = &r.final_x {
            let mut row = vec![r.run_id.clone(), r.variant.clone(), r.seed_index.to_string()];
            row.extend(x.iter().map(|v| num(*v)));
            w.write_record(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_manifest(path: &Path, records: &[RunRecord]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "run_id",
        "variant",
        "seed_index",
        "config_hash",
        "status",
        "error",
        "trace",
        "wall_ms",
    ])?;
    for r in records {
        let (status, error) = match &r.status {
            RunStatus::Ok => ("ok", ""),
            RunStatus::Failed(e) => ("failed", e.as_str()),
        };
        w.write_record([
            r.run_id.as_str(),
            r.variant.as_str(),
            &r.seed_index.to_string(),
            r.config_hash.as_str(),
            status,
            error,
            r.trace.as_deref().unwrap_or(""),
            &r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, r: &RunRecord) -> anyhow::Result<()> {
    let dim = r.steps.first().map_or(0, |s| s.x.len());
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(x_header(
        &["run_id", "variant", "seed_index", "step", "t", "grad_norm"],
        dim,
    ))?;
    for s in &r.steps {
        let mut row = vec![
            r.run_id.clone(),
            r.variant.clone(),
            r.seed_index.to_string(),
            s.step.to_string(),
            num(s.t),
            num(s.grad_norm),
        ];
        row.extend(s.x.iter().map(|v| num(*v)));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes traces, finals and the manifest under `dir`.
pub fn write_outputs(dir: &Path, records: &[RunRecord]) -> anyhow::Result<()> {
    let traces = dir.join("traces");
    fs::create_dir_all(&traces).with_context(|| format!("creating {}", traces.display()))?;
    for r in records {
        if let Some(rel) = &r.trace {
            write_trace(&dir.join(rel), r)?;
        }
    }
    write_finals(&dir.join("finals.csv"), records)?;
    write_manifest(&dir.join("manifest.csv"), records)
}

/// Runs the jobs and persists them under `out` (or the config's directory).
pub fn run_sweep(
    cfg: &ExperimentConfig,
    jobs: &[Job],
    out: Option<&Path>,
    parallel: Option<usize>,
) -> anyhow::Result<Vec<RunRecord>> {
    let records = run_jobs(cfg, jobs, parallel.unwrap_or(cfg.sweep.parallel))?;
    let dir: PathBuf = out.map_or_else(|| cfg.output.dir.clone(), Path::to_path_buf);
    write_outputs(&dir, &records)?;
    Ok(records)
}

/// One row of a finals file.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalRow {
    pub run_id: String,
    pub variant: String,
    pub seed_index: u64,
    pub x: Vec<f64>,
}

/// Reads a finals (or trace) CSV: the identifying columns when present and
/// every `x<i>` column in order.
pub fn read_finals(path: &Path) -> anyhow::Result<Vec<FinalRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let xs: Vec<usize> = (0..).map_while(|i| col(&format!("x{i}"))).collect();
    if xs.is_empty() {
        bail!("{}: no x0 column", path.display());
    }
    let (id, variant, seed) = (col("run_id"), col("variant"), col("seed_index"));
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let x = xs
            .iter()
            .map(|&c| rec[c].trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}:{line}: bad number", path.display()))?;
        let seed_index = match seed {
            Some(c) => rec[c]
                .trim()
                .parse()
                .with_context(|| format!("{}:{line}: bad seed_index", path.display()))?,
            None => i as u64,
        };
        rows.push(FinalRow {
            run_id: id.map_or_else(|| format!("row-{i}"), |c| rec[c].to_string()),
            variant: variant.map_or_else(String::new, |c| rec[c].to_string()),
            seed_index,
            x,
        });
    }
    Ok(rows)
}
