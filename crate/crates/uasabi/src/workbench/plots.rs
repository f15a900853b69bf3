//! Deterministic SVG renderings of the study diagnostics. Coordinates
//! are emitted with fixed precision so identical inputs give identical
//! bytes.

use super::study::MethodResult;
use super::WorkbenchError;
use crate::calibration::{EcdfBand, RecoverySummary};
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 50.0;

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"15\">{title}</text>\n",
        WIDTH / 2.0
    )
}

fn axes(frame: &Frame, x_label: &str, y_label: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN),
        fmt(HEIGHT - MARGIN),
        fmt(WIDTH - MARGIN),
        fmt(HEIGHT - MARGIN)
    ));
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN),
        fmt(MARGIN),
        fmt(MARGIN),
        fmt(HEIGHT - MARGIN)
    ));
    for frac in [0.0, 0.5, 1.0] {
        let x = frame.x_min + frac * (frame.x_max - frame.x_min);
        let y = frame.y_min + frac * (frame.y_max - frame.y_min);
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"11\">{}</text>\n",
            fmt(frame.px(x)),
            fmt(HEIGHT - MARGIN + 18.0),
            fmt(x)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"11\">{}</text>\n",
            fmt(MARGIN - 6.0),
            fmt(frame.py(y) + 4.0),
            fmt(y)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\">{x_label}</text>\n",
        fmt(WIDTH / 2.0),
        fmt(HEIGHT - 10.0)
    ));
    out.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        fmt(HEIGHT / 2.0),
        fmt(HEIGHT / 2.0)
    ));
    out
}

fn polyline(frame: &Frame, points: &[(f64, f64)], color: &str) -> String {
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{},{}", fmt(frame.px(x)), fmt(frame.py(y))))
        .collect();
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
        coords.join(" ")
    )
}

/// ECDF-minus-uniform difference curve with its simultaneous band.
pub fn plot_ecdf_difference(band: &EcdfBand, title: &str) -> String {
    let h = band.halfwidth.max(band.sup_norm) * 1.3;
    let frame = Frame {
        x_min: 0.0,
        x_max: 1.0,
        y_min: -h,
        y_max: h,
    };
    let mut out = svg_open(title);
    out.push_str(&axes(&frame, "fractional rank", "ECDF - uniform"));
    out.push_str(&polyline(
        &frame,
        &[(0.0, band.halfwidth), (1.0, band.halfwidth)],
        "#888888",
    ));
    out.push_str(&polyline(
        &frame,
        &[(0.0, -band.halfwidth), (1.0, -band.halfwidth)],
        "#888888",
    ));
    // Step curve: hold the previous difference until the next rank.
    let mut points = vec![(0.0, 0.0)];
    let mut prev = 0.0;
    for (&g, &diff) in band.grid.iter().zip(&band.diffs) {
        points.push((g, prev));
        points.push((g, diff));
        prev = diff;
    }
    points.push((1.0, 0.0));
    let color = if band.inside { "#1a7f37" } else { "#c62828" };
    out.push_str(&polyline(&frame, &points, color));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"40\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\">sup={} band={} {}</text>\n",
        fmt(WIDTH / 2.0),
        fmt(band.sup_norm),
        fmt(band.halfwidth),
        if band.inside { "inside" } else { "outside" }
    ));
    out.push_str("</svg>\n");
    out
}

/// Posterior median (with a MAD whisker) against the ground truth.
pub fn plot_recovery(summary: &RecoverySummary, title: &str) -> String {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in &summary.rows {
        lo = lo.min(row.truth).min(row.median - row.deviation);
        hi = hi.max(row.truth).max(row.median + row.deviation);
    }
    let pad = 0.05 * (hi - lo).max(1e-12);
    let frame = Frame {
        x_min: lo - pad,
        x_max: hi + pad,
        y_min: lo - pad,
        y_max: hi + pad,
    };
    let mut out = svg_open(title);
    out.push_str(&axes(&frame, "ground truth", "posterior median"));
    out.push_str(&polyline(
        &frame,
        &[(frame.x_min, frame.x_min), (frame.x_max, frame.x_max)],
        "#888888",
    ));
    for row in &summary.rows {
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#1565c0\" \
             stroke-width=\"1\"/>\n",
            fmt(frame.px(row.truth)),
            fmt(frame.py(row.median - row.deviation)),
            fmt(frame.px(row.truth)),
            fmt(frame.py(row.median + row.deviation))
        ));
        out.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"#1565c0\"/>\n",
            fmt(frame.px(row.truth)),
            fmt(frame.py(row.median))
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Horizontal bar chart of per-method wall times.
pub fn plot_runtime(entries: &[(String, f64)]) -> String {
    let max = entries.iter().map(|e| e.1).fold(1e-9, f64::max);
    let mut out = svg_open("wall time per method (seconds)");
    let bar_h = (HEIGHT - 2.0 * MARGIN) / entries.len().max(1) as f64;
    for (i, (label, seconds)) in entries.iter().enumerate() {
        let y = MARGIN + i as f64 * bar_h;
        let w = seconds / max * (WIDTH - 2.0 * MARGIN - 80.0);
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#1565c0\"/>\n",
            fmt(MARGIN + 80.0),
            fmt(y + 0.15 * bar_h),
            fmt(w.max(0.5)),
            fmt(0.7 * bar_h)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"12\">{label}</text>\n",
            fmt(MARGIN + 72.0),
            fmt(y + 0.5 * bar_h + 4.0)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            fmt(MARGIN + 84.0 + w.max(0.5)),
            fmt(y + 0.5 * bar_h + 4.0),
            fmt(*seconds)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Writes one calibration and one recovery plot per method and
/// parameter, plus the runtime chart. Returns the file names written.
pub fn emit_plots(dir: &Path, results: &[MethodResult]) -> Result<Vec<String>, WorkbenchError> {
    if results.is_empty() {
        return Err(WorkbenchError::Domain(
            "no method results to plot".into(),
        ));
    }
    let mut names = Vec::new();
    let mut write = |name: String, contents: String| -> Result<(), WorkbenchError> {
        let path = dir.join(&name);
        std::fs::write(&path, contents)
            .map_err(|e| WorkbenchError::io(path.display().to_string(), e))?;
        names.push(name);
        Ok(())
    };
    for result in results {
        let label = result.method.label();
        for (d, band) in result.bands.iter().enumerate() {
            write(
                format!("ecdf_{label}_p{d}.svg"),
                plot_ecdf_difference(band, &format!("{label}: rank ECDF difference (omega_{})", d + 1)),
            )?;
        }
        for (d, summary) in result.recovery.iter().enumerate() {
            write(
                format!("recovery_{label}_p{d}.svg"),
                plot_recovery(summary, &format!("{label}: recovery (omega_{})", d + 1)),
            )?;
        }
    }
    let entries: Vec<(String, f64)> = results
        .iter()
        .map(|r| (r.method.label().to_string(), r.seconds))
        .collect();
    write("runtime.svg".into(), plot_runtime(&entries))?;
    Ok(names)
}
