//! Static SVG line charts built from metrics or verification CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::csvio::{read_metrics, write_series};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    /// Initial-state Q estimate against training step.
    Qcurve,
    /// Evaluation return against training step.
    Return,
    /// Final Q estimate against alpha, one point per input run.
    AlphaSweep,
    /// Observed error and its bound from a verification CSV.
    ErrorBound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
    /// Horizontal reference lines.
    pub references: Vec<(String, f64)>,
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

fn finite(points: impl Iterator<Item = (f64, f64)>) -> Vec<(f64, f64)> {
    points
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect()
}

fn add_reference(refs: &mut Vec<(String, f64)>, value: f64) {
    if value.is_finite() && !refs.iter().any(|(_, v)| (v - value).abs() < 1e-9) {
        refs.push((format!("true value {value:.2}"), value));
    }
}

#[derive(Deserialize)]
struct VerifyRow {
    param: f64,
    observed: f64,
    bound: f64,
}

/// Reads the inputs and assembles the figure; any input without plottable
/// points is an error naming that file.
pub fn build_figure(kind: PlotKind, inputs: &[PathBuf]) -> Result<Figure> {
    if inputs.is_empty() {
        return Err(LabError::Config(
            "plot needs at least one input file".into(),
        ));
    }
    let mut series = Vec::new();
    let mut references = Vec::new();
    let mut sweep = Vec::new();
    for path in inputs {
        match kind {
            PlotKind::Qcurve | PlotKind::Return => {
                let rows = read_metrics(path)?;
                let points = finite(rows.iter().map(|r| {
                    let y = match kind {
                        PlotKind::Qcurve => r.q_estimate.unwrap_or(f64::NAN),
                        _ => r.eval_return,
                    };
                    (r.step as f64, y)
                }));
                if points.is_empty() {
                    return Err(LabError::EmptySeries(path.clone()));
                }
                if kind == PlotKind::Qcurve {
                    for r in &rows {
                        add_reference(&mut references, r.true_value);
                    }
                }
                series.push(Series {
                    name: stem(path),
                    points,
                });
            }
            PlotKind::AlphaSweep => {
                let rows = read_metrics(path)?;
                let last = rows.iter().rev().find_map(|r| {
                    r.q_estimate
                        .filter(|q| q.is_finite())
                        .map(|q| (r.alpha, q, r.true_value))
                });
                let Some((alpha, q, truth)) = last else {
                    return Err(LabError::EmptySeries(path.clone()));
                };
                sweep.push((alpha, q));
                add_reference(&mut references, truth);
            }
            PlotKind::ErrorBound => {
                let mut reader =
                    csv::Reader::from_path(path).map_err(|e| LabError::csv(path, e))?;
                let rows: Vec<VerifyRow> = reader
                    .deserialize()
                    .collect::<Result<_, _>>()
                    .map_err(|e| LabError::csv(path, e))?;
                let observed = finite(rows.iter().map(|r| (r.param, r.observed)));
                if observed.is_empty() {
                    return Err(LabError::EmptySeries(path.clone()));
                }
                let name = stem(path);
                series.push(Series {
                    name: format!("{name} observed"),
                    points: observed,
                });
                series.push(Series {
                    name: format!("{name} bound"),
                    points: finite(rows.iter().map(|r| (r.param, r.bound))),
                });
            }
        }
    }
    if kind == PlotKind::AlphaSweep {
        sweep.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.push(Series {
            name: "final Q estimate".into(),
            points: sweep,
        });
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let (title, x_label, y_label) = match kind {
        PlotKind::Qcurve => ("Initial-state Q estimate", "training step", "Q estimate"),
        PlotKind::Return => ("Evaluation return", "training step", "return"),
        PlotKind::AlphaSweep => ("Final Q estimate by alpha", "alpha", "Q estimate"),
        PlotKind::ErrorBound => ("Observed error and bound", "instance parameter", "value"),
    };
    let log_x = kind == PlotKind::AlphaSweep
        && series.iter().flat_map(|s| &s.points).all(|(x, _)| *x > 0.0);
    Ok(Figure {
        title: title.into(),
        x_label: x_label.into(),
        y_label: y_label.into(),
        log_x,
        series,
        references,
    })
}

/// Renders the SVG and writes the plotted series next to it as CSV.
pub fn plot(kind: PlotKind, inputs: &[PathBuf], out: &Path) -> Result<Figure> {
    let figure = build_figure(kind, inputs)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    std::fs::write(out, render_svg(&figure)).map_err(|e| LabError::io(out, e))?;
    // reference lines are written as their two endpoints across the x range
    let xs = figure.series.iter().flat_map(|s| &s.points).map(|p| p.0);
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
        (l.min(x), h.max(x))
    });
    let series: Vec<(String, Vec<(f64, f64)>)> = figure
        .series
        .iter()
        .map(|s| (s.name.clone(), s.points.clone()))
        .chain(
            figure
                .references
                .iter()
                .map(|(n, v)| (n.clone(), vec![(lo, *v), (hi, *v)])),
        )
        .collect();
    write_series(&out.with_extension("csv"), &series)?;
    Ok(figure)
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() >= 1e5 || v.abs() < 1e-3 {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Roughly five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
        (l.min(v), h.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.1;
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

pub fn render_svg(fig: &Figure) -> String {
    let tx = |x: f64| if fig.log_x { x.log10() } else { x };
    let points = || fig.series.iter().flat_map(|s| &s.points);
    let (x0, x1) = range(points().map(|p| tx(p.0)));
    let (y0, y1) = range(
        points()
            .map(|p| p.1)
            .chain(fig.references.iter().map(|r| r.1)),
    );
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (tx(x) - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&fig.title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    for t in ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e5e5e5"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            label(t)
        );
    }
    for t in ticks(x0, x1) {
        let x = LEFT + (t - x0) / (x1 - x0) * pw;
        let shown = if fig.log_x { 10f64.powf(t) } else { t };
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e5e5e5"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 18.0,
            label(shown)
        );
    }
    let x_axis = if fig.log_x {
        format!("{} (log scale)", fig.x_label)
    } else {
        fig.x_label.clone()
    };
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&x_axis)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&fig.y_label)
    );

    let mut legend = Vec::new();
    for (i, s) in fig.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
            path.join(" ")
        );
        if s.points.len() == 1 {
            let (x, y) = s.points[0];
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        legend.push((s.name.clone(), color, false));
    }
    for (name, value) in &fig.references {
        let y = sy(*value);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#555" stroke-dasharray="6 4"/>"##,
            LEFT + pw
        );
        legend.push((name.clone(), "#555", true));
    }
    let lx = LEFT + pw + 14.0;
    for (i, (name, color, dashed)) in legend.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let dash = if *dashed {
            r#" stroke-dasharray="6 4""#
        } else {
            ""
        };
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 22.0,
            lx + 28.0,
            y + 4.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn figure() -> Figure {
        Figure {
            title: "t <&>".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_x: false,
            series: vec![Series {
                name: "a".into(),
                points: vec![(0.0, 1.0), (50.0, 2.5)],
            }],
            references: vec![("true value 3.00".into(), 3.0)],
        }
    }

    #[test]
    fn rendering_is_deterministic_and_escaped() {
        let a = render_svg(&figure());
        assert_eq!(a, render_svg(&figure()));
        assert!(a.contains("t &lt;&amp;&gt;"));
        assert!(a.contains("stroke-dasharray"));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }

    #[test]
    fn ticks_are_round_and_cover_the_range() {
        assert_eq!(ticks(0.0, 100.0), vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
        let t = ticks(-0.37, 0.81);
        assert!(t.iter().all(|v| (-0.37..=0.81).contains(v)));
        assert!(t.len() >= 4);
    }

    #[test]
    fn degenerate_ranges_are_padded() {
        let (lo, hi) = range([2.0, 2.0].into_iter());
        assert!(lo < 2.0 && hi > 2.0);
    }
}
