//! Dependency-free SVG figures: sample scatters, grid heatmaps, and line
//! plots. Output is a pure function of the input, so identical data gives
//! byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use super::landscape::{Bounds, LandscapeGrid};
use crate::{Error, Result, Vec2};

const WIDTH: f64 = 600.0;
const HEIGHT: f64 = 560.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_TOP: f64 = 40.0;
const PLOT: f64 = 460.0;

/// Series colours, cycled in order.
pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Heatmap ramp stops (viridis), interpolated linearly in RGB between the
/// grid minimum and maximum.
pub const RAMP: [[u8; 3]; 5] = [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]];

#[derive(Debug, Clone, PartialEq)]
pub struct PointSeries {
    pub label: String,
    pub points: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Figure {
    /// One circle per point; `markers` are drawn as crosses.
    Scatter {
        title: String,
        bounds: Bounds,
        series: Vec<PointSeries>,
        markers: Vec<Vec2>,
    },
    /// One filled cell per lattice node.
    Heatmap { title: String, grid: LandscapeGrid },
    Line {
        title: String,
        x_label: String,
        y_label: String,
        series: Vec<LineSeries>,
    },
}

/// Renders `figure` and writes it to `path`, creating parent directories.
pub fn emit_figure(figure: &Figure, path: &Path) -> Result<()> {
    let svg = render_svg(figure)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Renders `figure` as an SVG document.
pub fn render_svg(figure: &Figure) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r##"<rect class="background" x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##
    );
    match figure {
        Figure::Scatter {
            title,
            bounds,
            series,
            markers,
        } => {
            bounds.validate()?;
            title_line(&mut out, title);
            let frame = Frame::new(bounds.xmin, bounds.xmax, bounds.ymin, bounds.ymax);
            frame.axes(&mut out);
            for (i, s) in series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                let _ = writeln!(out, r#"<g class="series" fill="{color}" fill-opacity="0.5">"#);
                for p in &s.points {
                    check_finite(&[p.x(), p.y()])?;
                    let (px, py) = frame.map(p.x(), p.y());
                    let _ = writeln!(out, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.5"/>"#);
                }
                out.push_str("</g>\n");
            }
            for m in markers {
                check_finite(&[m.x(), m.y()])?;
                let (px, py) = frame.map(m.x(), m.y());
                let _ = writeln!(
                    out,
                    r##"<path class="marker" d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="#000000" stroke-width="2"/>"##,
                    px - 5.0,
                    py - 5.0,
                    px + 5.0,
                    py + 5.0,
                    px - 5.0,
                    py + 5.0,
                    px + 5.0,
                    py - 5.0
                );
            }
            legend(&mut out, series.iter().map(|s| s.label.as_str()));
        }
        Figure::Heatmap { title, grid } => {
            grid.bounds.validate()?;
            check_finite(&grid.values)?;
            let (nx, ny) = (grid.resolution.nx, grid.resolution.ny);
            if nx == 0 || ny == 0 || grid.values.len() != nx * ny {
                return Err(Error::Dimension {
                    what: "heatmap values",
                    expected: nx * ny,
                    got: grid.values.len(),
                });
            }
            title_line(&mut out, &format!("{title} ({})", grid.kind.name()));
            let b = &grid.bounds;
            let frame = Frame::new(b.xmin, b.xmax, b.ymin, b.ymax);
            let (lo, hi) = grid.min_max();
            let (cw, ch) = (PLOT / nx as f64, PLOT / ny as f64);
            out.push_str("<g class=\"cells\">\n");
            for iy in 0..ny {
                for ix in 0..nx {
                    let color = ramp_color(grid.at(ix, iy), lo, hi);
                    // row 0 holds ymin, drawn at the bottom
                    let x = MARGIN_LEFT + ix as f64 * cw;
                    let y = MARGIN_TOP + PLOT - (iy + 1) as f64 * ch;
                    let _ = writeln!(
                        out,
                        r#"<rect class="cell" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                        cw + 0.01,
                        ch + 0.01
                    );
                }
            }
            out.push_str("</g>\n");
            frame.axes(&mut out);
            colorbar(&mut out, lo, hi);
        }
        Figure::Line {
            title,
            x_label,
            y_label,
            series,
        } => {
            let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
            let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
            check_finite(&xs)?;
            check_finite(&ys)?;
            title_line(&mut out, title);
            let (x0, x1) = padded_range(&xs);
            let (y0, y1) = padded_range(&ys);
            let frame = Frame::new(x0, x1, y0, y1);
            frame.axes(&mut out);
            let _ = writeln!(
                out,
                r#"<text class="x-label" x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                MARGIN_LEFT + PLOT / 2.0,
                MARGIN_TOP + PLOT + 40.0,
                escape(x_label)
            );
            let _ = writeln!(
                out,
                r#"<text class="y-label" x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
                MARGIN_TOP + PLOT / 2.0,
                MARGIN_TOP + PLOT / 2.0,
                escape(y_label)
            );
            for (i, s) in series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                let pts: Vec<String> = s
                    .points
                    .iter()
                    .map(|&(x, y)| {
                        let (px, py) = frame.map(x, y);
                        format!("{px:.2},{py:.2}")
                    })
                    .collect();
                let _ = writeln!(
                    out,
                    r#"<polyline class="series" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                    pts.join(" ")
                );
            }
            legend(&mut out, series.iter().map(|s| s.label.as_str()));
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Axis ticks at multiples of a 1-2-5 step, roughly `target` of them,
/// strictly increasing and inside `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(lo.is_finite() && hi.is_finite() && hi > lo) || target == 0 {
        return Vec::new();
    }
    let raw = (hi - lo) / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

/// Hex colour for `v` on [`RAMP`] between `lo` and `hi`; a flat grid maps to
/// the first stop.
pub fn ramp_color(v: f64, lo: f64, hi: f64) -> String {
    let u = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    let pos = u * (RAMP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(RAMP.len() - 2);
    let f = pos - i as f64;
    let c: Vec<u8> = (0..3)
        .map(|k| (RAMP[i][k] as f64 + f * (RAMP[i + 1][k] as f64 - RAMP[i][k] as f64)).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (
            MARGIN_LEFT + (x - self.x0) / (self.x1 - self.x0) * PLOT,
            MARGIN_TOP + PLOT - (y - self.y0) / (self.y1 - self.y0) * PLOT,
        )
    }

    fn axes(&self, out: &mut String) {
        let _ = writeln!(
            out,
            r##"<rect class="frame" x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{PLOT}" height="{PLOT}" fill="none" stroke="#000000"/>"##
        );
        for t in nice_ticks(self.x0, self.x1, 6) {
            let (px, _) = self.map(t, self.y0);
            let _ = writeln!(
                out,
                r#"<text class="tick-x" x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                MARGIN_TOP + PLOT + 18.0,
                tick_label(t)
            );
        }
        for t in nice_ticks(self.y0, self.y1, 6) {
            let (_, py) = self.map(self.x0, t);
            let _ = writeln!(
                out,
                r#"<text class="tick-y" x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                MARGIN_LEFT - 8.0,
                py + 4.0,
                tick_label(t)
            );
        }
    }
}

fn tick_label(t: f64) -> String {
    let s = format!("{t:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn padded_range(vals: &[f64]) -> (f64, f64) {
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

fn title_line(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<text class="title" x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        MARGIN_LEFT + PLOT / 2.0,
        escape(title)
    );
}

fn legend<'a>(out: &mut String, labels: impl Iterator<Item = &'a str>) {
    for (i, label) in labels.enumerate() {
        let y = MARGIN_TOP + 10.0 + 18.0 * i as f64;
        let x = MARGIN_LEFT + PLOT - 140.0;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<rect class="legend-key" x="{x:.2}" y="{:.2}" width="10" height="10" fill="{color}"/>"#,
            y - 9.0
        );
        let _ = writeln!(out, r#"<text class="legend" x="{:.2}" y="{y:.2}">{}</text>"#, x + 16.0, escape(label));
    }
}

fn colorbar(out: &mut String, lo: f64, hi: f64) {
    let x = MARGIN_LEFT + PLOT + 14.0;
    let steps = 50;
    let h = PLOT / steps as f64;
    for k in 0..steps {
        let v = lo + (hi - lo) * (k as f64 + 0.5) / steps as f64;
        let y = MARGIN_TOP + PLOT - (k + 1) as f64 * h;
        let _ = writeln!(
            out,
            r#"<rect class="ramp" x="{x:.2}" y="{y:.2}" width="14" height="{:.2}" fill="{}"/>"#,
            h + 0.01,
            ramp_color(v, lo, hi)
        );
    }
    let _ = writeln!(out, r#"<text class="ramp-max" x="{x:.2}" y="{:.2}">{}</text>"#, MARGIN_TOP - 4.0, fmt_sig(hi));
    let _ = writeln!(
        out,
        r#"<text class="ramp-min" x="{x:.2}" y="{:.2}">{}</text>"#,
        MARGIN_TOP + PLOT + 14.0,
        fmt_sig(lo)
    );
}

fn fmt_sig(v: f64) -> String {
    format!("{v:.3e}")
}

fn check_finite(vals: &[f64]) -> Result<()> {
    match vals.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::Numeric(format!("non-finite figure value {v}"))),
        None => Ok(()),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
