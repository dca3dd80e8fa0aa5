use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::compare::{compare, write_metrics};
use crate::config::{parse_config, ExperimentConfig};
use crate::plot::{scatter_svg, trajectory_svg, ScatterPoint, Trajectory};
use crate::sweep::{ddim_jobs, image_jobs, invert_jobs, read_finals, run_sweep, scene_jobs, FinalRow, Job, RunRecord};

#[derive(Debug, Parser)]
#[command(
    name = "distill-lab",
    version,
    about = "Score distillation experiments against exact mixture oracles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment file.
    #[arg(long)]
    pub config: PathBuf,
    /// Seed indices `a..b`, overriding `[sweep] seeds`.
    #[arg(long, value_parser = parse_range)]
    pub seed_range: Option<Range<u64>>,
    /// Output directory, overriding `[output] dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker count, overriding `[sweep] parallel`.
    #[arg(long)]
    pub parallel: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Scatter,
    Trajectory,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// DDIM samples from each seed's prior draw.
    Sample(Common),
    /// DDIM inversion of the points in a CSV with x0, x1, ... columns.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Distill free images of the configured condition.
    Distill2d(Common),
    /// Distill the scene parameters through its views.
    Distill3d(Common),
    /// Per-variant metrics. Without `--input`, runs the sweep first.
    Compare {
        #[command(flatten)]
        common: Common,
        /// A finals CSV to score.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Reference samples for W₂; DDIM samples of the same seeds by default.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Draw a finals CSV as a scatter or trace CSVs as trajectories.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "scatter")]
        kind: PlotKind,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
}

fn parse_range(s: &str) -> Result<Range<u64>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected a..b, got {s:?}"))?;
    let a: u64 = a.trim().parse().map_err(|_| format!("bad start in {s:?}"))?;
    let b: u64 = b.trim().parse().map_err(|_| format!("bad end in {s:?}"))?;
    if a > b {
        return Err(format!("empty range {s:?} runs backwards"));
    }
    Ok(a..b)
}

pub fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    let mut cfg = parse_config(&text).map_err(|e| anyhow::anyhow!("{}:\n{e}", common.config.display()))?;
    if let Some(r) = &common.seed_range {
        cfg.sweep.seeds = r.clone();
    }
    if let Some(p) = common.parallel {
        if p == 0 {
            bail!("--parallel must be at least 1");
        }
        cfg.sweep.parallel = p;
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    Ok(cfg)
}

fn scatter_points(rows: &[FinalRow]) -> Vec<ScatterPoint> {
    rows.iter()
        .map(|r| ScatterPoint {
            label: r.variant.clone(),
            seed_index: r.seed_index,
            x: r.x.clone(),
        })
        .collect()
}

fn write_svg(dir: &Path, name: &str, svg: &str) -> anyhow::Result<PathBuf> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    let path = plots.join(name);
    fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn rows_of(records: &[RunRecord]) -> Vec<FinalRow> {
    records
        .iter()
        .filter_map(|r| {
            r.final_x.as_ref().map(|x| FinalRow {
                run_id: r.run_id.clone(),
                variant: r.variant.clone(),
                seed_index: r.seed_index,
                x: x.iter().copied().collect(),
            })
        })
        .collect()
}

/// Runs a sweep, writes its files and a scatter of the finals when they are
/// plottable. Returns the records.
fn sweep(cfg: &ExperimentConfig, jobs: &[Job]) -> anyhow::Result<Vec<RunRecord>> {
    let records = run_sweep(cfg, jobs, None, None)?;
    if cfg.output.svg {
        // finals of more than two coordinates are simply not drawn
        if let Ok(svg) = scatter_svg(&scatter_points(&rows_of(&records)), "final samples") {
            write_svg(&cfg.output.dir, "finals.svg", &svg)?;
        }
    }
    let failed = records.iter().filter(|r| !r.ok()).count();
    eprintln!(
        "{} runs, {failed} failed; outputs in {}",
        records.len(),
        cfg.output.dir.display()
    );
    Ok(records)
}

fn all_ok(records: &[RunRecord]) -> bool {
    records.iter().all(RunRecord::ok)
}

fn read_trajectory(path: &Path) -> anyhow::Result<Trajectory> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let step = headers
        .iter()
        .position(|h| h == "step")
        .with_context(|| format!("{}: no step column", path.display()))?;
    let label = headers.iter().position(|h| h == "run_id");
    let mut name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let rows = read_finals(path)?;
    let mut points = Vec::with_capacity(rows.len());
    for (rec, row) in r.records().zip(rows) {
        let rec = rec?;
        if let Some(c) = label {
            name = rec[c].to_string();
        }
        points.push((rec[step].trim().parse::<usize>().context("bad step")?, row.x));
    }
    Ok(Trajectory { label: name, points })
}

/// Executes one command. `Ok(false)` means some run failed.
pub fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Sample(c) => {
            let cfg = load_config(&c)?;
            Ok(all_ok(&sweep(&cfg, &ddim_jobs(&cfg))?))
        }
        Command::Invert { common, input } => {
            let cfg = load_config(&common)?;
            let points = read_finals(&input)?.into_iter().map(|r| r.x).collect();
            Ok(all_ok(&sweep(&cfg, &invert_jobs(points))?))
        }
        Command::Distill2d(c) => {
            let cfg = load_config(&c)?;
            Ok(all_ok(&sweep(&cfg, &image_jobs(&cfg))?))
        }
        Command::Distill3d(c) => {
            let cfg = load_config(&c)?;
            Ok(all_ok(&sweep(&cfg, &scene_jobs(&cfg))?))
        }
        Command::Compare {
            common,
            input,
            reference,
        } => {
            let cfg = load_config(&common)?;
            let (finals, ok) = match input {
                Some(p) => (read_finals(&p)?, true),
                None => {
                    let jobs = if cfg.conditions.is_empty() {
                        scene_jobs(&cfg)
                    } else {
                        image_jobs(&cfg)
                    };
                    let records = sweep(&cfg, &jobs)?;
                    (rows_of(&records), all_ok(&records))
                }
            };
            let reference = match reference {
                Some(p) => read_finals(&p)?,
                None if !cfg.conditions.is_empty() => {
                    let seeds: Vec<u64> = {
                        let mut s: Vec<u64> = finals.iter().map(|r| r.seed_index).collect();
                        s.sort_unstable();
                        s.dedup();
                        s
                    };
                    let jobs: Vec<Job> = seeds.into_iter().map(|seed| Job::Ddim { seed }).collect();
                    rows_of(&crate::sweep::run_jobs(&cfg, &jobs, cfg.sweep.parallel)?)
                }
                None => Vec::new(),
            };
            fs::create_dir_all(&cfg.output.dir)?;
            let rows = compare(&cfg, &finals, &reference)?;
            write_metrics(&cfg.output.dir.join("metrics.csv"), &rows)?;
            if cfg.output.svg {
                if let Ok(svg) = scatter_svg(&scatter_points(&finals), "final samples by variant") {
                    write_svg(&cfg.output.dir, "compare.svg", &svg)?;
                }
            }
            for r in &rows {
                let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:<14} n={:<4} diversity={} coverage={} nll={} w2={}",
                    r.variant,
                    r.n,
                    f(r.diversity),
                    r.coverage,
                    f(r.nll),
                    f(r.w2)
                );
            }
            Ok(ok)
        }
        Command::Plot { common, kind, input } => {
            let cfg = load_config(&common)?;
            let svg = match kind {
                PlotKind::Scatter => {
                    let mut rows = Vec::new();
                    for p in &input {
                        rows.extend(read_finals(p)?);
                    }
                    scatter_svg(&scatter_points(&rows), "final samples")?
                }
                PlotKind::Trajectory => {
                    let traces = input
                        .iter()
                        .map(|p| read_trajectory(p))
                        .collect::<anyhow::Result<Vec<_>>>()?;
                    trajectory_svg(&traces, "trajectories")?
                }
            };
            let name = match kind {
                PlotKind::Scatter => "scatter.svg",
                PlotKind::Trajectory => "trajectory.svg",
            };
            let path = write_svg(&cfg.output.dir, name, &svg)?;
            eprintln!("wrote {}", path.display());
            Ok(true)
        }
    }
}
