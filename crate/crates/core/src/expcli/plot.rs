//! Self-contained SVG line charts with shaded ±SD bands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::expcli::aggregate::{read_aggregate_csv, AggregateSeries};
use crate::trainloop::Mode;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 56.0;
const MARGIN_B: f64 = 78.0;

pub struct Line<'a> {
    pub label: String,
    pub color: &'static str,
    pub series: &'a AggregateSeries,
    pub column: &'static str,
}

pub struct Panel<'a> {
    pub title: &'static str,
    pub lines: Vec<Line<'a>>,
}

struct Prepared {
    label: String,
    color: &'static str,
    points: Vec<(f64, f64, Option<f64>)>,
}

fn prepare(line: &Line<'_>) -> Result<Prepared> {
    let col = line
        .series
        .columns
        .get(line.column)
        .ok_or_else(|| Error::Plot(format!("missing column {}_mean", line.column)))?;
    if line.series.steps.is_empty() {
        return Err(Error::Plot(format!("no rows for column {}", line.column)));
    }
    let points = line
        .series
        .steps
        .iter()
        .zip(col.mean.iter().zip(&col.sd))
        .filter(|(_, (m, _))| m.is_finite())
        .map(|(&s, (&m, &sd))| (s as f64, m, sd.filter(|v| v.is_finite())))
        .collect();
    Ok(Prepared { label: line.label.clone(), color: line.color, points })
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-300);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step =
        [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= target as f64).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_panel(svg: &mut String, panel: &Panel<'_>, x0: f64) -> Result<()> {
    let lines: Vec<Prepared> = panel.lines.iter().map(prepare).collect::<Result<_>>()?;
    let pts = || lines.iter().flat_map(|l| l.points.iter());
    if pts().next().is_none() {
        return Err(Error::Plot(format!("panel '{}' has no finite data", panel.title)));
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, m, sd) in pts() {
        let s = sd.unwrap_or(0.0);
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(m - s);
        ymax = ymax.max(m + s);
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    if ymax - ymin < 1e-12 * ymax.abs().max(1e-300) {
        let pad = ymax.abs().max(1e-12) * 0.05;
        ymin -= pad;
        ymax += pad;
    } else {
        let pad = (ymax - ymin) * 0.05;
        ymin -= pad;
        ymax += pad;
    }
    let pw = PANEL_W - MARGIN_L - MARGIN_R;
    let ph = PANEL_H - MARGIN_T - MARGIN_B;
    let left = x0 + MARGIN_L;
    let sx = |x: f64| left + (x - xmin) / (xmax - xmin) * pw;
    let sy = |y: f64| MARGIN_T + (1.0 - (y - ymin) / (ymax - ymin)) * ph;

    writeln!(svg, r#"<g class="panel">"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
        left + pw / 2.0,
        MARGIN_T - 12.0,
        escape(panel.title)
    )
    .unwrap();
    writeln!(
        svg,
        r##"<rect x="{left:.2}" y="{MARGIN_T:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#444" stroke-width="1"/>"##
    )
    .unwrap();
    for t in nice_ticks(ymin, ymax, 5) {
        let y = sy(t);
        writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{left:.2}" y2="{y:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"##,
            left - 4.0,
            left - 6.0,
            y + 3.5,
            fmt_tick(t)
        )
        .unwrap();
    }
    for t in nice_ticks(xmin, xmax, 5) {
        let x = sx(t);
        writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"##,
            MARGIN_T + ph,
            MARGIN_T + ph + 4.0,
            MARGIN_T + ph + 16.0,
            fmt_tick(t)
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">step</text>"#,
        left + pw / 2.0,
        MARGIN_T + ph + 32.0
    )
    .unwrap();

    for line in &lines {
        let banded: Vec<_> = line.points.iter().filter_map(|&(x, m, sd)| sd.map(|s| (x, m, s))).collect();
        if banded.len() >= 2 {
            let mut d = String::new();
            for &(x, m, s) in &banded {
                write!(d, "{:.2},{:.2} ", sx(x), sy(m + s)).unwrap();
            }
            for &(x, m, s) in banded.iter().rev() {
                write!(d, "{:.2},{:.2} ", sx(x), sy(m - s)).unwrap();
            }
            writeln!(
                svg,
                r#"<polygon class="band" points="{}" fill="{}" fill-opacity="0.18" stroke="none"/>"#,
                d.trim_end(),
                line.color
            )
            .unwrap();
        }
    }
    for (i, line) in lines.iter().enumerate() {
        let mut d = String::new();
        for &(x, m, _) in &line.points {
            write!(d, "{:.2},{:.2} ", sx(x), sy(m)).unwrap();
        }
        writeln!(
            svg,
            r#"<polyline class="series" data-label="{}" points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            escape(&line.label),
            d.trim_end(),
            line.color
        )
        .unwrap();
        let ly = MARGIN_T + ph + 46.0 + 12.0 * i as f64;
        writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
            left,
            left + 18.0,
            line.color,
            left + 24.0,
            ly + 3.5,
            escape(&line.label)
        )
        .unwrap();
    }
    writeln!(svg, "</g>").unwrap();
    Ok(())
}

/// Renders panels side by side into one SVG document.
pub fn render_figure(title: &str, panels: &[Panel<'_>]) -> Result<String> {
    if panels.is_empty() {
        return Err(Error::Plot("figure without panels".into()));
    }
    let legend_rows = panels.iter().map(|p| p.lines.len()).max().unwrap_or(0);
    let width = PANEL_W * panels.len() as f64;
    let height = PANEL_H + 12.0 * legend_rows.saturating_sub(1) as f64;
    let mut svg = String::new();
    writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="15">{}</text>"#,
        width / 2.0,
        escape(title)
    )
    .unwrap();
    for (i, panel) in panels.iter().enumerate() {
        render_panel(&mut svg, panel, PANEL_W * i as f64)?;
    }
    writeln!(svg, "</svg>").unwrap();
    Ok(svg)
}

const BLUE: &str = "#1f77b4";
const ORANGE: &str = "#d62728";
const GREEN: &str = "#2ca02c";

fn line<'a>(label: &str, color: &'static str, series: &'a AggregateSeries, column: &'static str) -> Line<'a> {
    Line { label: label.to_string(), color, series, column }
}

pub fn figure1(control: &AggregateSeries) -> Result<String> {
    render_figure(
        "Control: per-step statistics (mean ± SD)",
        &[
            Panel { title: "KL divergence (distillation loss)", lines: vec![line("control", BLUE, control, "kl")] },
            Panel { title: "Cross-entropy (trait loss)", lines: vec![line("control", BLUE, control, "ce")] },
            Panel { title: "Gradient cosine similarity", lines: vec![line("control", BLUE, control, "cosine")] },
        ],
    )
}

pub fn figure2a(control: &AggregateSeries, projection: &AggregateSeries) -> Result<String> {
    render_figure(
        "Gradient projection vs control (mean ± SD)",
        &[
            Panel {
                title: "KL divergence (distillation loss)",
                lines: vec![line("control", BLUE, control, "kl"), line("projection", ORANGE, projection, "kl")],
            },
            Panel {
                title: "Cross-entropy (trait loss)",
                lines: vec![line("control", BLUE, control, "ce"), line("projection", ORANGE, projection, "ce")],
            },
            Panel {
                title: "Gradient cosine similarity",
                lines: vec![
                    line("control", BLUE, control, "cosine"),
                    line("projection, before", ORANGE, projection, "cosine_before_proj"),
                    line("projection, after", GREEN, projection, "cosine_after_proj"),
                ],
            },
        ],
    )
}

pub fn figure2b(control: &AggregateSeries, liminal: &AggregateSeries) -> Result<String> {
    render_figure(
        "Liminal training vs control (mean ± SD)",
        &[
            Panel {
                title: "KL divergence (distillation loss)",
                lines: vec![line("control", BLUE, control, "kl"), line("liminal", ORANGE, liminal, "kl")],
            },
            Panel {
                title: "Cross-entropy (trait loss)",
                lines: vec![line("control", BLUE, control, "ce"), line("liminal", ORANGE, liminal, "ce")],
            },
            Panel {
                title: "Gradient cosine similarity",
                lines: vec![line("control", BLUE, control, "cosine"), line("liminal", ORANGE, liminal, "cosine")],
            },
            Panel { title: "Regularizer weight λ", lines: vec![line("liminal", ORANGE, liminal, "lambda_kl")] },
        ],
    )
}

fn write_svg(path: &Path, svg: &str) -> Result<PathBuf> {
    fs::write(path, svg).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Reads `aggregate-<mode>.csv` files under `out` and writes whichever of
/// fig1.svg, fig2a.svg and fig2b.svg their inputs allow.
pub fn cmd_plot(out: &Path) -> Result<Vec<PathBuf>> {
    let load = |mode: Mode| -> Result<Option<AggregateSeries>> {
        let path = out.join(format!("aggregate-{mode}.csv"));
        if !path.is_file() {
            return Ok(None);
        }
        let series = read_aggregate_csv(&path).map_err(|e| Error::Plot(format!("{}: {e}", path.display())))?;
        if series.steps.is_empty() {
            return Err(Error::Plot(format!("{} has no rows", path.display())));
        }
        Ok(Some(series))
    };
    let control =
        load(Mode::Control)?.ok_or_else(|| Error::Plot(format!("{} has no aggregate-control.csv", out.display())))?;
    let mut written = vec![write_svg(&out.join("fig1.svg"), &figure1(&control)?)?];
    if let Some(p) = load(Mode::Projection)? {
        written.push(write_svg(&out.join("fig2a.svg"), &figure2a(&control, &p)?)?);
    }
    if let Some(l) = load(Mode::Liminal)? {
        written.push(write_svg(&out.join("fig2b.svg"), &figure2b(&control, &l)?)?);
    }
    Ok(written)
}
