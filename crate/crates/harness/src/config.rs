//! The experiment file: `[section]` headers followed by `key = value` lines,
//! `#` comments, and repeated `component = w, mu..., s` lines inside
//! `[condition.<tag>]` blocks. A key may also be written fully qualified as
//! `section.key = value` anywhere in the file.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::ops::Range;
use std::path::PathBuf;
use std::str::FromStr;

use distill_lab::distill::{DeltaRule, DistillConfig, DistillVariant, Interpolation, TimeSampling, WeightRule};
use distill_lab::oracle::{Component, Condition, GaussianMixture, Oracle};
use distill_lab::scene::LibrarySpec;
use distill_lab::schedule::{NoiseSchedule, DEFAULT_CLAMP_EPS, DEFAULT_T_MAX};
use distill_lab::DVector;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

/// Every problem found in one pass over the file.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleBlock {
    pub t_max: f64,
    pub clamp_eps: f64,
    pub t_min: f64,
}

impl Default for ScheduleBlock {
    fn default() -> Self {
        Self {
            t_max: DEFAULT_T_MAX,
            clamp_eps: DEFAULT_CLAMP_EPS,
            t_min: 0.02 * DEFAULT_T_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBlock {
    pub condition: Condition,
    pub prior: f64,
    pub components: Vec<Component>,
}

/// Optimizer settings. In `[distill]` every field is filled in; in a
/// `[variant.<name>]` block only the overridden ones are.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillSettings {
    pub steps: Option<usize>,
    pub ddim_steps: Option<usize>,
    pub lr: Option<f64>,
    pub cfg_low: Option<f64>,
    pub cfg_high: Option<f64>,
    pub cfg_path: Option<f64>,
    pub w_rule: Option<WeightRule>,
    pub delta: Option<DeltaRule>,
    pub interpolation: Option<Interpolation>,
    pub time_sampling: Option<TimeSampling>,
}

impl DistillSettings {
    fn overlay(&self, cfg: &mut DistillConfig) {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.ddim_steps {
            cfg.ddim_steps = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.cfg_low {
            cfg.cfg_low = v;
        }
        if let Some(v) = self.cfg_high {
            cfg.cfg_high = v;
        }
        if let Some(v) = self.cfg_path {
            cfg.cfg_path = v;
        }
        if let Some(v) = self.w_rule {
            cfg.weight = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.interpolation {
            cfg.interpolation = v;
        }
        if let Some(v) = self.time_sampling {
            cfg.time_sampling = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillBlock {
    pub variants: Vec<DistillVariant>,
    /// Condition used by `sample`, `invert` and `distill2d`.
    pub condition: Option<Condition>,
    /// Starting point; a single value is broadcast to every coordinate.
    pub x_init: Vec<f64>,
    pub settings: DistillSettings,
}

impl Default for DistillBlock {
    fn default() -> Self {
        let d = DistillConfig::new(DistillVariant::Dsd);
        Self {
            variants: DistillVariant::ALL.to_vec(),
            condition: None,
            x_init: vec![0.0],
            settings: DistillSettings {
                steps: Some(d.steps),
                ddim_steps: Some(d.ddim_steps),
                lr: Some(d.lr),
                cfg_low: Some(d.cfg_low),
                cfg_high: Some(d.cfg_high),
                cfg_path: Some(d.cfg_path),
                w_rule: Some(d.weight),
                delta: Some(d.delta),
                interpolation: Some(d.interpolation),
                time_sampling: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepBlock {
    pub seeds: Range<u64>,
    pub parallel: usize,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            seeds: 0..1,
            parallel: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputBlock {
    pub dir: PathBuf,
    /// Whether `plots/*.svg` are written next to the CSV files.
    pub svg: bool,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            svg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub schedule: ScheduleBlock,
    pub conditions: Vec<ConditionBlock>,
    pub distill: DistillBlock,
    pub variants: BTreeMap<DistillVariant, DistillSettings>,
    pub scene: Option<LibrarySpec>,
    pub sweep: SweepBlock,
    pub output: OutputBlock,
}

struct Parser {
    errors: Vec<ConfigError>,
}

fn parse_value<T: FromStr>(raw: &str) -> Option<T> {
    raw.trim().parse().ok()
}

fn floats(raw: &str) -> Option<Vec<f64>> {
    raw.split(',').map(parse_value::<f64>).collect()
}

fn parse_range(raw: &str) -> Option<Range<u64>> {
    let (a, b) = raw.trim().split_once("..")?;
    let (a, b) = (parse_value::<u64>(a)?, parse_value::<u64>(b)?);
    (a <= b).then_some(a..b)
}

/// CSV is always written; the list only decides about SVG.
fn parse_formats(raw: &str) -> Option<bool> {
    let mut names: Vec<&str> = raw.split(',').map(str::trim).collect();
    names.sort_unstable();
    match names.as_slice() {
        ["csv"] => Some(false),
        ["csv", "svg"] => Some(true),
        _ => None,
    }
}

fn parse_weight(raw: &str) -> Option<WeightRule> {
    match raw.trim() {
        "sigma_low" => Some(WeightRule::SigmaLow),
        "one" => Some(WeightRule::One),
        _ => None,
    }
}

fn parse_delta(raw: &str) -> Option<DeltaRule> {
    match raw.trim() {
        "grid" => Some(DeltaRule::GridSpacing),
        other => parse_value::<f64>(other).map(|factor| DeltaRule::Proportional { factor }),
    }
}

fn parse_interpolation(raw: &str) -> Option<Interpolation> {
    match raw.trim() {
        "time_matched" => Some(Interpolation::TimeMatched),
        "high_noise" => Some(Interpolation::HighNoise),
        _ => None,
    }
}

fn parse_time_sampling(raw: &str) -> Option<TimeSampling> {
    match raw.trim() {
        "annealed" => Some(TimeSampling::Annealed),
        "uniform" => Some(TimeSampling::Uniform),
        _ => None,
    }
}

fn parse_variants(raw: &str) -> Option<Vec<DistillVariant>> {
    let list: Option<Vec<DistillVariant>> = raw.split(',').map(|p| p.trim().parse().ok()).collect();
    let list = list?;
    let mut seen = list.clone();
    seen.sort();
    seen.dedup();
    (!list.is_empty() && seen.len() == list.len()).then_some(list)
}

enum Section {
    Schedule,
    Condition(usize),
    Distill,
    Variant(DistillVariant),
    Scene,
    Sweep,
    Output,
}

impl Parser {
    fn err(&mut self, line: usize, message: impl Into<String>) {
        self.errors.push(ConfigError {
            line,
            message: message.into(),
        });
    }

    fn value<T>(&mut self, line: usize, key: &str, raw: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Option<T> {
        let v = f(raw);
        if v.is_none() {
            self.err(line, format!("`{key}` expects {what}, got `{}`", raw.trim()));
        }
        v
    }

    fn settings_key(&mut self, s: &mut DistillSettings, line: usize, key: &str, raw: &str) -> bool {
        match key {
            "steps" => s.steps = self.value(line, key, raw, "an integer", parse_value),
            "ddim_steps" => s.ddim_steps = self.value(line, key, raw, "an integer", parse_value),
            "lr" => s.lr = self.value(line, key, raw, "a number", parse_value),
            "cfg_low" => s.cfg_low = self.value(line, key, raw, "a number", parse_value),
            "cfg_high" => s.cfg_high = self.value(line, key, raw, "a number", parse_value),
            "cfg_path" => s.cfg_path = self.value(line, key, raw, "a number", parse_value),
            "w_rule" => s.w_rule = self.value(line, key, raw, "sigma_low or one", parse_weight),
            "delta" => s.delta = self.value(line, key, raw, "a factor or `grid`", parse_delta),
            "interpolation" => {
                s.interpolation = self.value(line, key, raw, "time_matched or high_noise", parse_interpolation)
            }
            "time_sampling" => s.time_sampling = self.value(line, key, raw, "annealed or uniform", parse_time_sampling),
            _ => return false,
        }
        true
    }
}

fn section_name(section: &Section, cfg: &ExperimentConfig) -> String {
    match section {
        Section::Schedule => "schedule".into(),
        Section::Condition(i) => format!("condition.{}", cfg.conditions[*i].condition),
        Section::Distill => "distill".into(),
        Section::Variant(v) => format!("variant.{v}"),
        Section::Scene => "scene".into(),
        Section::Sweep => "sweep".into(),
        Section::Output => "output".into(),
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let mut p = Parser { errors: Vec::new() };
    let mut cfg = ExperimentConfig {
        schedule: ScheduleBlock::default(),
        conditions: Vec::new(),
        distill: DistillBlock::default(),
        variants: BTreeMap::new(),
        scene: None,
        sweep: SweepBlock::default(),
        output: OutputBlock::default(),
    };
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut headers: BTreeMap<String, usize> = BTreeMap::new();
    let mut current: Option<Section> = None;
    let mut scene_line = 0;

    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(header) = content.strip_prefix('[') {
            let Some(name) = header.strip_suffix(']').map(str::trim) else {
                p.err(line, format!("unterminated section header `{content}`"));
                current = None;
                continue;
            };
            current = open_section(&mut p, &mut cfg, name, line, &mut scene_line);
            if current.is_some() {
                if let Some(first) = headers.insert(name.to_string(), line) {
                    p.err(line, format!("section [{name}] already opened on line {first}"));
                }
            }
            continue;
        }
        let Some((lhs, rhs)) = content.split_once('=') else {
            p.err(line, format!("expected `key = value`, got `{content}`"));
            continue;
        };
        let lhs = lhs.trim();
        // a qualified key opens its section for this line only
        let (section, key) = match lhs.rsplit_once('.') {
            Some((sec, key)) if !sec.is_empty() => {
                let Some(s) = open_section(&mut p, &mut cfg, sec, line, &mut scene_line) else {
                    continue;
                };
                (s, key)
            }
            _ => match &current {
                Some(Section::Condition(i)) => (Section::Condition(*i), lhs),
                Some(Section::Variant(v)) => (Section::Variant(*v), lhs),
                Some(Section::Schedule) => (Section::Schedule, lhs),
                Some(Section::Distill) => (Section::Distill, lhs),
                Some(Section::Scene) => (Section::Scene, lhs),
                Some(Section::Sweep) => (Section::Sweep, lhs),
                Some(Section::Output) => (Section::Output, lhs),
                None => {
                    p.err(line, format!("`{lhs}` appears before any section header"));
                    continue;
                }
            },
        };
        let name = section_name(&section, &cfg);
        if key != "component" {
            if let Some(first) = seen.insert((name.clone(), key.to_string()), line) {
                p.err(
                    line,
                    format!("duplicate key `{key}` in [{name}] (first set on line {first})"),
                );
                continue;
            }
        }
        let known = match section {
            Section::Schedule => match key {
                "t_max" => {
                    if let Some(v) = p.value(line, key, rhs, "a number", parse_value) {
                        cfg.schedule.t_max = v;
                    }
                    true
                }
                "clamp_eps" => {
                    if let Some(v) = p.value(line, key, rhs, "a number", parse_value) {
                        cfg.schedule.clamp_eps = v;
                    }
                    true
                }
                "t_min" => {
                    if let Some(v) = p.value(line, key, rhs, "a number", parse_value) {
                        cfg.schedule.t_min = v;
                    }
                    true
                }
                _ => false,
            },
            Section::Condition(i) => match key {
                "prior" => {
                    if let Some(v) = p.value(line, key, rhs, "a number", parse_value) {
                        cfg.conditions[i].prior = v;
                    }
                    true
                }
                "component" => {
                    match floats(rhs) {
                        Some(v) if v.len() >= 3 => {
                            let mean = DVector::from_column_slice(&v[1..v.len() - 1]);
                            cfg.conditions[i]
                                .components
                                .push(Component::new(v[0], mean, v[v.len() - 1]));
                        }
                        _ => p.err(
                            line,
                            format!("`component` expects `weight, mean..., scale`, got `{}`", rhs.trim()),
                        ),
                    }
                    true
                }
                _ => false,
            },
            Section::Distill => match key {
                "variants" => {
                    if let Some(v) = p.value(line, key, rhs, "a comma list of distinct variant names", parse_variants) {
                        cfg.distill.variants = v;
                    }
                    true
                }
                "condition" => {
                    if let Some(v) = p.value(line, key, rhs, "a condition tag", parse_value) {
                        cfg.distill.condition = Some(v);
                    }
                    true
                }
                "x_init" => {
                    if let Some(v) = p.value(line, key, rhs, "a comma list of numbers", floats) {
                        cfg.distill.x_init = v;
                    }
                    true
                }
                _ => {
                    let mut s = cfg.distill.settings.clone();
                    let known = p.settings_key(&mut s, line, key, rhs);
                    // keep the default when the value does not parse
                    merge_defaults(&mut s, &cfg.distill.settings);
                    cfg.distill.settings = s;
                    known
                }
            },
            Section::Variant(v) => {
                let mut s = cfg.variants.get(&v).cloned().unwrap_or_default();
                let known = p.settings_key(&mut s, line, key, rhs);
                cfg.variants.insert(v, s);
                known
            }
            Section::Scene => {
                let spec = cfg.scene.as_mut().expect("scene section opened");
                match key {
                    "param_dim" => set(&mut p, line, key, rhs, "an integer", &mut spec.param_dim),
                    "render_dim" => set(&mut p, line, key, rhs, "an integer", &mut spec.render_dim),
                    "objects" => set(&mut p, line, key, rhs, "an integer", &mut spec.objects),
                    "views" => set(&mut p, line, key, rhs, "an integer", &mut spec.views),
                    "scale" => set(&mut p, line, key, rhs, "a number", &mut spec.scale),
                    "seed" => set(&mut p, line, key, rhs, "an integer", &mut spec.seed),
                    "shared" => set(&mut p, line, key, rhs, "a number", &mut spec.shared),
                    "radius" => set(&mut p, line, key, rhs, "a number", &mut spec.radius),
                    "detail" => set(&mut p, line, key, rhs, "a number", &mut spec.detail),
                    _ => false,
                }
            }
            Section::Sweep => match key {
                "seeds" => {
                    if let Some(v) = p.value(line, key, rhs, "a range `a..b` with a ≤ b", parse_range) {
                        cfg.sweep.seeds = v;
                    }
                    true
                }
                "parallel" => {
                    match p.value(line, key, rhs, "a positive integer", parse_value::<usize>) {
                        Some(0) => p.err(line, "`parallel` must be at least 1"),
                        Some(v) => cfg.sweep.parallel = v,
                        None => {}
                    }
                    true
                }
                _ => false,
            },
            Section::Output => match key {
                "dir" => {
                    cfg.output.dir = PathBuf::from(rhs.trim());
                    true
                }
                "formats" => {
                    if let Some(svg) = p.value(line, key, rhs, "`csv` or `csv, svg`", parse_formats) {
                        cfg.output.svg = svg;
                    }
                    true
                }
                _ => false,
            },
        };
        if !known {
            p.err(line, format!("unknown key `{key}` in [{name}]"));
        }
    }
    if p.errors.is_empty() {
        validate(&cfg, scene_line, &mut p);
    }
    if p.errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(p.errors))
    }
}

fn set<T: FromStr>(p: &mut Parser, line: usize, key: &str, raw: &str, what: &str, slot: &mut T) -> bool {
    if let Some(v) = p.value(line, key, raw, what, parse_value) {
        *slot = v;
    }
    true
}

fn merge_defaults(s: &mut DistillSettings, defaults: &DistillSettings) {
    s.steps = s.steps.or(defaults.steps);
    s.ddim_steps = s.ddim_steps.or(defaults.ddim_steps);
    s.lr = s.lr.or(defaults.lr);
    s.cfg_low = s.cfg_low.or(defaults.cfg_low);
    s.cfg_high = s.cfg_high.or(defaults.cfg_high);
    s.cfg_path = s.cfg_path.or(defaults.cfg_path);
    s.w_rule = s.w_rule.or(defaults.w_rule);
    s.delta = s.delta.or(defaults.delta);
    s.interpolation = s.interpolation.or(defaults.interpolation);
}

fn open_section(
    p: &mut Parser,
    cfg: &mut ExperimentConfig,
    name: &str,
    line: usize,
    scene_line: &mut usize,
) -> Option<Section> {
    let section = match name {
        "schedule" => Section::Schedule,
        "distill" => Section::Distill,
        "sweep" => Section::Sweep,
        "output" => Section::Output,
        "scene" => {
            if cfg.scene.is_none() {
                cfg.scene = Some(LibrarySpec::standard(0));
                *scene_line = line;
            }
            Section::Scene
        }
        _ => {
            if let Some(tag) = name.strip_prefix("condition.") {
                match tag.parse::<Condition>() {
                    Ok(Condition::Unconditional) => {
                        p.err(
                            line,
                            "the unconditional mixture is derived from the conditional ones and cannot be set",
                        );
                        return None;
                    }
                    Ok(c) => {
                        let i = match cfg.conditions.iter().position(|b| b.condition == c) {
                            Some(i) => i,
                            None => {
                                cfg.conditions.push(ConditionBlock {
                                    condition: c,
                                    prior: 1.0,
                                    components: Vec::new(),
                                });
                                cfg.conditions.len() - 1
                            }
                        };
                        Section::Condition(i)
                    }
                    Err(_) => {
                        p.err(line, format!("bad condition tag `{tag}` (use label:N or view:O:V)"));
                        return None;
                    }
                }
            } else if let Some(v) = name.strip_prefix("variant.") {
                match v.parse::<DistillVariant>() {
                    Ok(v) => Section::Variant(v),
                    Err(_) => {
                        p.err(line, format!("unknown variant `{v}`"));
                        return None;
                    }
                }
            } else {
                p.err(line, format!("unknown section [{name}]"));
                return None;
            }
        }
    };
    Some(section)
}

fn validate(cfg: &ExperimentConfig, scene_line: usize, p: &mut Parser) {
    if let Err(e) = cfg.noise_schedule() {
        p.err(0, format!("[schedule]: {e}"));
        return;
    }
    if cfg.conditions.is_empty() && cfg.scene.is_none() {
        p.err(0, "no [condition.<tag>] block and no [scene]; nothing to distill");
    }
    let mut dim = None;
    for c in &cfg.conditions {
        if let Err(e) = GaussianMixture::new(c.components.clone()) {
            p.err(0, format!("[condition.{}]: {e}", c.condition));
        }
        if !(c.prior.is_finite() && c.prior > 0.0) {
            p.err(0, format!("[condition.{}]: prior must be positive", c.condition));
        }
        if let Some(first) = c.components.first() {
            match dim {
                None => dim = Some(first.mean.len()),
                Some(d) if d != first.mean.len() => p.err(
                    0,
                    format!(
                        "[condition.{}]: dimension {} differs from {d}",
                        c.condition,
                        first.mean.len()
                    ),
                ),
                _ => {}
            }
        }
    }
    if let Some(y) = cfg.distill.condition {
        if y != Condition::Unconditional && !cfg.conditions.iter().any(|c| c.condition == y) {
            p.err(
                0,
                format!("[distill] condition {y} is not defined by any [condition.<tag>] block"),
            );
        }
    }
    if let Some(d) = dim {
        let n = cfg.distill.x_init.len();
        if n != 1 && n != d {
            p.err(0, format!("[distill] x_init has {n} values; expected 1 or {d}"));
        }
    }
    if let Some(spec) = &cfg.scene {
        let scene_dims_ok = cfg.distill.x_init.len() == 1 || cfg.distill.x_init.len() == spec.param_dim;
        if !scene_dims_ok && cfg.conditions.is_empty() {
            p.err(
                0,
                format!(
                    "[distill] x_init must have 1 or {} values for the scene",
                    spec.param_dim
                ),
            );
        }
        if spec.shared < 0.0 || spec.shared > 1.0 || spec.scale <= 0.0 || spec.param_dim < 2 * spec.render_dim {
            p.err(
                scene_line,
                "[scene] needs scale > 0, shared in [0, 1] and param_dim ≥ 2·render_dim",
            );
        }
    }
    for &v in &cfg.distill.variants {
        let c = cfg.distill_config(v);
        if let Err(e) = c.validate(cfg.schedule.t_max) {
            p.err(0, format!("settings for {v}: {e}"));
        }
    }
}

fn fmt_f64(x: f64) -> String {
    // `{}` is the shortest representation that parses back to the same value
    format!("{x}")
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(", ")
}

fn weight_name(w: WeightRule) -> &'static str {
    match w {
        WeightRule::SigmaLow => "sigma_low",
        WeightRule::One => "one",
    }
}

fn delta_text(d: DeltaRule) -> String {
    match d {
        DeltaRule::Proportional { factor } => fmt_f64(factor),
        DeltaRule::GridSpacing => "grid".into(),
    }
}

fn interpolation_name(i: Interpolation) -> &'static str {
    match i {
        Interpolation::TimeMatched => "time_matched",
        Interpolation::HighNoise => "high_noise",
    }
}

fn time_sampling_name(t: TimeSampling) -> &'static str {
    match t {
        TimeSampling::Annealed => "annealed",
        TimeSampling::Uniform => "uniform",
    }
}

fn write_settings(out: &mut String, s: &DistillSettings) {
    let mut kv = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            let _ = writeln!(out, "{k} = {v}");
        }
    };
    kv("steps", s.steps.map(|v| v.to_string()));
    kv("ddim_steps", s.ddim_steps.map(|v| v.to_string()));
    kv("lr", s.lr.map(fmt_f64));
    kv("cfg_low", s.cfg_low.map(fmt_f64));
    kv("cfg_high", s.cfg_high.map(fmt_f64));
    kv("cfg_path", s.cfg_path.map(fmt_f64));
    kv("w_rule", s.w_rule.map(|v| weight_name(v).to_string()));
    kv("delta", s.delta.map(delta_text));
    kv(
        "interpolation",
        s.interpolation.map(|v| interpolation_name(v).to_string()),
    );
    kv(
        "time_sampling",
        s.time_sampling.map(|v| time_sampling_name(v).to_string()),
    );
}

impl ExperimentConfig {
    pub fn noise_schedule(&self) -> distill_lab::Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.t_max, self.schedule.clamp_eps)
    }

    /// The oracle defined by the `[condition.*]` blocks.
    pub fn oracle(&self) -> distill_lab::Result<Oracle> {
        let mut b = Oracle::builder(self.noise_schedule()?);
        for c in &self.conditions {
            b = b.condition(c.condition, c.prior, GaussianMixture::new(c.components.clone())?);
        }
        b.build()
    }

    /// The condition distilled in 2D: the configured one, or the first
    /// registered condition.
    pub fn condition(&self) -> Option<Condition> {
        self.distill
            .condition
            .or_else(|| self.conditions.first().map(|c| c.condition))
    }

    /// Fully resolved optimizer settings for one variant.
    pub fn distill_config(&self, variant: DistillVariant) -> DistillConfig {
        let mut cfg = DistillConfig::new(variant);
        cfg.t_min = self.schedule.t_min;
        self.distill.settings.overlay(&mut cfg);
        if let Some(s) = self.variants.get(&variant) {
            s.overlay(&mut cfg);
        }
        cfg
    }

    pub fn x_init(&self, dim: usize) -> DVector<f64> {
        match self.distill.x_init.as_slice() {
            [v] => DVector::from_element(dim, *v),
            xs => DVector::from_column_slice(xs),
        }
    }

    /// The sections that define the experiment itself, in canonical form.
    pub fn experiment_text(&self) -> String {
        let mut out = String::new();
        let s = &self.schedule;
        let _ = writeln!(out, "[schedule]");
        let _ = writeln!(out, "t_max = {}", fmt_f64(s.t_max));
        let _ = writeln!(out, "clamp_eps = {}", fmt_f64(s.clamp_eps));
        let _ = writeln!(out, "t_min = {}", fmt_f64(s.t_min));
        for c in &self.conditions {
            let _ = writeln!(out, "\n[condition.{}]", c.condition);
            let _ = writeln!(out, "prior = {}", fmt_f64(c.prior));
            for k in &c.components {
                let mut v = vec![k.weight];
                v.extend(k.mean.iter());
                v.push(k.scale);
                let _ = writeln!(out, "component = {}", fmt_list(&v));
            }
        }
        let _ = writeln!(out, "\n[distill]");
        let names: Vec<&str> = self.distill.variants.iter().map(|v| v.name()).collect();
        let _ = writeln!(out, "variants = {}", names.join(", "));
        if let Some(y) = self.distill.condition {
            let _ = writeln!(out, "condition = {y}");
        }
        let _ = writeln!(out, "x_init = {}", fmt_list(&self.distill.x_init));
        write_settings(&mut out, &self.distill.settings);
        for (v, s) in &self.variants {
            let _ = writeln!(out, "\n[variant.{v}]");
            write_settings(&mut out, s);
        }
        if let Some(spec) = &self.scene {
            let _ = writeln!(out, "\n[scene]");
            let _ = writeln!(out, "param_dim = {}", spec.param_dim);
            let _ = writeln!(out, "render_dim = {}", spec.render_dim);
            let _ = writeln!(out, "objects = {}", spec.objects);
            let _ = writeln!(out, "views = {}", spec.views);
            let _ = writeln!(out, "scale = {}", fmt_f64(spec.scale));
            let _ = writeln!(out, "seed = {}", spec.seed);
            let _ = writeln!(out, "shared = {}", fmt_f64(spec.shared));
            let _ = writeln!(out, "radius = {}", fmt_f64(spec.radius));
            let _ = writeln!(out, "detail = {}", fmt_f64(spec.detail));
        }
        out
    }

    /// Canonical text of the whole file; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut out = self.experiment_text();
        let _ = writeln!(out, "\n[sweep]");
        let _ = writeln!(out, "seeds = {}..{}", self.sweep.seeds.start, self.sweep.seeds.end);
        let _ = writeln!(out, "parallel = {}", self.sweep.parallel);
        let _ = writeln!(out, "\n[output]");
        let _ = writeln!(out, "dir = {}", self.output.dir.display());
        let _ = writeln!(out, "formats = {}", if self.output.svg { "csv, svg" } else { "csv" });
        out
    }

    /// SHA-256 of the experiment sections, hex encoded. Seed ranges,
    /// parallelism and output paths do not enter it, so they never change
    /// any run's random draws.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.experiment_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First eight bytes of the hash, the base key of every run's streams.
    pub fn seed_base(&self) -> u64 {
        let digest = Sha256::digest(self.experiment_text().as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }
}
