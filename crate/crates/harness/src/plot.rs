//! Self-contained SVG scatter and trajectory plots.
//!
//! Every marker carries its exact values as `data-*` attributes (shortest
//! round-trip floats), so the document can be checked against the CSV it
//! was drawn from. Output depends only on the input.

use std::fmt::Write as _;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlotError {
    #[error("cannot plot {0}-dimensional points; only 1 and 2 are supported")]
    UnsupportedDimension(usize),
    #[error("mixed dimensions {0} and {1}")]
    MixedDimensions(usize, usize),
}

/// A labelled point of a scatter plot.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub label: String,
    pub seed_index: u64,
    pub x: Vec<f64>,
}

/// One run's path; `points[i]` is `(step, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub label: String,
    pub points: Vec<(usize, Vec<f64>)>,
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Linear map from a data interval to a pixel interval.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, from: f64, to: f64) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (-1.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 1.0, hi + 1.0);
        }
        let pad = 0.05 * (hi - lo);
        Self {
            lo: lo - pad,
            hi: hi + pad,
            from,
            to,
        }
    }

    fn px(&self, v: f64) -> f64 {
        let px = self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from);
        // pixel positions are rounded so tiny float noise cannot change bytes
        (px * 100.0).round() / 100.0
    }
}

fn check_dim<'a>(dims: impl Iterator<Item = usize> + 'a) -> Result<Option<usize>, PlotError> {
    let mut found = None;
    for d in dims {
        if d == 0 || d > 2 {
            return Err(PlotError::UnsupportedDimension(d));
        }
        match found {
            None => found = Some(d),
            Some(f) if f != d => return Err(PlotError::MixedDimensions(f, d)),
            _ => {}
        }
    }
    Ok(found)
}

fn labels<'a>(names: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for n in names {
        if !out.iter().any(|o| o == n) {
            out.push(n.to_string());
        }
    }
    out
}

fn color(labels: &[String], label: &str) -> &'static str {
    let i = labels.iter().position(|l| l == label).unwrap_or(0);
    PALETTE[i % PALETTE.len()]
}

fn open(out: &mut String, kind: &str, title: &str, x: &Axis, y: &Axis, x_name: &str, y_name: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-kind="{kind}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (l, r, b, t) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(
        out,
        r##"<g class="axes" stroke="#444" fill="none"><line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{l}" y1="{b}" x2="{l}" y2="{t}"/></g>"##
    );
    let _ = writeln!(
        out,
        r##"<g class="ticks" font-family="sans-serif" font-size="10" fill="#444"><text x="{l}" y="{}" text-anchor="start">{}</text><text x="{r}" y="{}" text-anchor="end">{}</text><text x="{}" y="{b}" text-anchor="end">{}</text><text x="{}" y="{}" text-anchor="end">{}</text></g>"##,
        b + 14.0,
        fmt_tick(x.lo),
        b + 14.0,
        fmt_tick(x.hi),
        l - 4.0,
        fmt_tick(y.lo),
        l - 4.0,
        t + 4.0,
        fmt_tick(y.hi),
    );
    let _ = writeln!(
        out,
        r#"<g class="axis-labels" font-family="sans-serif" font-size="11"><text x="{}" y="{}" text-anchor="middle">{x_name}</text><text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{y_name}</text></g>"#,
        (l + r) / 2.0,
        HEIGHT - 8.0,
        (t + b) / 2.0,
        (t + b) / 2.0,
    );
}

fn legend(out: &mut String, labels: &[String]) {
    let _ = writeln!(out, r#"<g class="legend" font-family="sans-serif" font-size="10">"#);
    for (i, l) in labels.iter().enumerate() {
        let y = MARGIN + 12.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<circle cx="{}" cy="{}" r="3" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            WIDTH - MARGIN - 70.0,
            y,
            color(labels, l),
            WIDTH - MARGIN - 62.0,
            y + 3.0,
            escape(l)
        );
    }
    let _ = writeln!(out, "</g>");
}

fn fmt_tick(v: f64) -> String {
    format!("{v:.3}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Final samples coloured by label. 2D points are drawn as they are; 1D
/// points go on the horizontal axis with one row per label.
pub fn scatter_svg(points: &[ScatterPoint], title: &str) -> Result<String, PlotError> {
    let dim = check_dim(points.iter().map(|p| p.x.len()))?.unwrap_or(2);
    let labels = labels(points.iter().map(|p| p.label.as_str()));
    let lane = |p: &ScatterPoint| labels.iter().position(|l| *l == p.label).unwrap_or(0) as f64;
    let y_of = |p: &ScatterPoint| if dim == 2 { p.x[1] } else { lane(p) };
    let xa = Axis::fit(points.iter().map(|p| p.x[0]), MARGIN, WIDTH - MARGIN);
    let ya = if dim == 2 {
        Axis::fit(points.iter().map(y_of), HEIGHT - MARGIN, MARGIN)
    } else {
        Axis::fit(
            [-0.5, labels.len().max(1) as f64 - 0.5].into_iter(),
            HEIGHT - MARGIN,
            MARGIN,
        )
    };
    let mut out = String::new();
    open(
        &mut out,
        "scatter",
        title,
        &xa,
        &ya,
        "x0",
        if dim == 2 { "x1" } else { "label" },
    );
    let _ = writeln!(out, r#"<g class="points">"#);
    for p in points {
        let y_attr = if dim == 2 {
            format!(r#" data-y="{}""#, num(p.x[1]))
        } else {
            String::new()
        };
        let _ = writeln!(
            out,
            r#"<circle cx="{}" cy="{}" r="3" fill="{}" fill-opacity="0.7" data-label="{}" data-seed="{}" data-x="{}"{y_attr}/>"#,
            xa.px(p.x[0]),
            ya.px(y_of(p)),
            color(&labels, &p.label),
            escape(&p.label),
            p.seed_index,
            num(p.x[0]),
        );
    }
    let _ = writeln!(out, "</g>");
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Optimization paths. 1D paths are drawn against the step; 2D paths in the
/// plane.
pub fn trajectory_svg(trajectories: &[Trajectory], title: &str) -> Result<String, PlotError> {
    let dim = check_dim(trajectories.iter().flat_map(|t| t.points.iter().map(|(_, x)| x.len())))?.unwrap_or(1);
    let labels = labels(trajectories.iter().map(|t| t.label.as_str()));
    let coords = |(step, x): &(usize, Vec<f64>)| if dim == 2 { (x[0], x[1]) } else { (*step as f64, x[0]) };
    let all = || trajectories.iter().flat_map(|t| t.points.iter().map(coords));
    let xa = Axis::fit(all().map(|c| c.0), MARGIN, WIDTH - MARGIN);
    let ya = Axis::fit(all().map(|c| c.1), HEIGHT - MARGIN, MARGIN);
    let mut out = String::new();
    let (xn, yn) = if dim == 2 { ("x0", "x1") } else { ("step", "x0") };
    open(&mut out, "trajectory", title, &xa, &ya, xn, yn);
    for t in trajectories {
        let c = color(&labels, &t.label);
        let _ = writeln!(
            out,
            r#"<g class="trajectory" data-label="{}" data-points="{}">"#,
            escape(&t.label),
            t.points.len()
        );
        let path: Vec<String> = t
            .points
            .iter()
            .map(|p| {
                let (x, y) = coords(p);
                format!("{},{}", xa.px(x), ya.px(y))
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{c}" stroke-width="1" points="{}"/>"#,
            path.join(" ")
        );
        for p in &t.points {
            let (x, y) = coords(p);
            let y_attr = if dim == 2 {
                format!(r#" data-y="{}""#, num(p.1[1]))
            } else {
                String::new()
            };
            let _ = writeln!(
                out,
                r#"<circle cx="{}" cy="{}" r="1.5" fill="{c}" data-step="{}" data-x="{}"{y_attr}/>"#,
                xa.px(x),
                ya.px(y),
                p.0,
                num(p.1[0]),
            );
        }
        let _ = writeln!(out, "</g>");
    }
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts() -> Vec<ScatterPoint> {
        (0..5)
            .map(|i| ScatterPoint {
                label: if i % 2 == 0 { "dsd".into() } else { "sds".into() },
                seed_index: i,
                x: vec![i as f64 * 0.3 - 0.5, 1.0 / (i as f64 + 1.0)],
            })
            .collect()
    }

    #[test]
    fn empty_scatter_has_axes() {
        let svg = scatter_svg(&[], "empty").unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains(r#"class="axes""#));
        assert!(!svg.contains("data-x"));
        assert_eq!(trajectory_svg(&[], "empty").unwrap().matches("<polyline").count(), 0);
    }

    #[test]
    fn output_is_a_function_of_the_input() {
        assert_eq!(scatter_svg(&pts(), "a").unwrap(), scatter_svg(&pts(), "a").unwrap());
    }

    #[test]
    fn markers_carry_exact_values() {
        let svg = scatter_svg(&pts(), "a").unwrap();
        assert!(svg.contains(r#"data-x="0.09999999999999998""#), "{svg}");
        assert_eq!(svg.matches("data-seed=").count(), 5);
    }

    #[test]
    fn higher_dimensions_are_rejected() {
        let p = ScatterPoint {
            label: "a".into(),
            seed_index: 0,
            x: vec![0.0; 3],
        };
        assert_eq!(scatter_svg(&[p], "a"), Err(PlotError::UnsupportedDimension(3)));
    }

    #[test]
    fn one_dimensional_trajectory_is_drawn_against_steps() {
        let t = Trajectory {
            label: "dsd".into(),
            points: (1..=4).map(|s| (s, vec![s as f64 * 0.5])).collect(),
        };
        let svg = trajectory_svg(&[t], "t").unwrap();
        assert_eq!(svg.matches("data-step=").count(), 4);
        assert!(svg.contains(r#"data-step="4" data-x="2""#));
    }

    #[test]
    fn labels_are_escaped() {
        let p = ScatterPoint {
            label: "a<b".into(),
            seed_index: 0,
            x: vec![1.0],
        };
        let svg = scatter_svg(&[p], "x & y").unwrap();
        assert!(svg.contains("a&lt;b") && svg.contains("x &amp; y"));
    }
}
