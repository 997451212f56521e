//! Minimal hand-rolled SVG line charts (no plotting dependency).
//!
//! The chart is a *pure rendering* of an already-written CSV: it never
//! touches the numeric pipeline, so emitting it cannot alter any artifact.
//! CSVs remain the contract; the SVG is a convenience for eyeballing runs.

use crate::error::SddgError;

/// One named line.
pub struct Series {
    pub label: String,
    /// `(x, y)` points in drawing order.
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 42.0;
const MARGIN_BOTTOM: f64 = 54.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn px(v: f64) -> String {
    format!("{v:.2}")
}

/// Tick label without trailing noise (integers render bare).
fn fmt_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// A "nice" step (1, 2, or 5 times a power of ten) giving roughly `target`
/// intervals over `span`.
fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.abs().log10().floor());
    let norm = raw / mag;
    let factor = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    factor * mag
}

/// Render a line chart with a linear x axis and a log₁₀ y axis. Points with
/// non-positive or non-finite y are skipped (their polyline breaks there);
/// series without a single drawable point are omitted.
pub fn log_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;

    // Data ranges over drawable points only.
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() && y > 0.0 {
                x_min = x_min.min(x);
                x_max = x_max.max(x);
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
        }
    }
    if !x_min.is_finite() {
        // Nothing drawable: an empty chart with a note, still valid SVG.
        return format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"14\">{title}: no positive data to draw</text>\n</svg>\n",
            WIDTH / 2.0,
            HEIGHT / 2.0
        );
    }
    if x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    // Snap the y range outward to whole decades (log scale).
    let mut exp_lo = y_min.log10().floor() as i32;
    let mut exp_hi = y_max.log10().ceil() as i32;
    if exp_lo == exp_hi {
        exp_lo -= 1;
        exp_hi += 1;
    }
    let (ly_lo, ly_hi) = (exp_lo as f64, exp_hi as f64);

    let to_x = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let to_y = |y: f64| MARGIN_TOP + (ly_hi - y.log10()) / (ly_hi - ly_lo) * plot_h;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        WIDTH / 2.0
    ));

    // Decade grid lines and y tick labels.
    for e in exp_lo..=exp_hi {
        let y = to_y(10f64.powi(e));
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>\n",
            px(MARGIN_LEFT),
            px(y),
            px(WIDTH - MARGIN_RIGHT),
            px(y)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">1e{e}</text>\n",
            px(MARGIN_LEFT - 6.0),
            px(y + 4.0)
        ));
    }

    // X ticks on a nice step.
    let step = nice_step(x_max - x_min, 5);
    let mut tick = (x_min / step).ceil() * step;
    while tick <= x_max + 1e-9 * step {
        let x = to_x(tick);
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#dddddd\"/>\n",
            px(x),
            px(MARGIN_TOP),
            px(HEIGHT - MARGIN_BOTTOM)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            px(x),
            px(HEIGHT - MARGIN_BOTTOM + 16.0),
            fmt_tick(tick)
        ));
        tick += step;
    }

    // Axes frame.
    out.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333333\"/>\n",
        px(MARGIN_LEFT),
        px(MARGIN_TOP),
        px(plot_w),
        px(plot_h)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{x_label}</text>\n",
        px(MARGIN_LEFT + plot_w / 2.0),
        px(HEIGHT - 14.0)
    ));
    out.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 18 {0})\">{y_label}</text>\n",
        px(MARGIN_TOP + plot_h / 2.0)
    ));

    // Series: polylines broken at undrawable points.
    let mut legend_y = MARGIN_TOP + 14.0;
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut segment: Vec<String> = Vec::new();
        let mut segments: Vec<Vec<String>> = Vec::new();
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() && y > 0.0 {
                segment.push(format!("{},{}", px(to_x(x)), px(to_y(y))));
            } else if !segment.is_empty() {
                segments.push(std::mem::take(&mut segment));
            }
        }
        if !segment.is_empty() {
            segments.push(segment);
        }
        if segments.is_empty() {
            continue;
        }
        for seg in &segments {
            if seg.len() == 1 {
                let (x, y) = seg[0].split_once(',').expect("point format");
                out.push_str(&format!(
                    "<circle cx=\"{x}\" cy=\"{y}\" r=\"2.5\" fill=\"{color}\"/>\n"
                ));
            } else {
                out.push_str(&format!(
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
                     points=\"{}\"/>\n",
                    seg.join(" ")
                ));
            }
        }
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n<text x=\"{3}\" y=\"{4}\" font-size=\"11\">{5}</text>\n",
            px(WIDTH - MARGIN_RIGHT - 150.0),
            px(legend_y - 4.0),
            px(WIDTH - MARGIN_RIGHT - 130.0),
            px(WIDTH - MARGIN_RIGHT - 124.0),
            px(legend_y),
            s.label
        ));
        legend_y += 16.0;
    }

    out.push_str("</svg>\n");
    out
}

/// Render the training-curve chart from the emitted CSV text
/// (`round,rel_error,…` as written by the trainer). Reading the artifact
/// rather than any in-memory state keeps the chart a pure view of the CSV.
pub fn training_curve_svg(csv: &str) -> Result<String, SddgError> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| SddgError::InvalidConfig("training curve CSV is empty".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let round_col = cols.iter().position(|c| *c == "round").ok_or_else(|| {
        SddgError::InvalidConfig("training curve CSV lacks a 'round' column".into())
    })?;
    let err_col = cols.iter().position(|c| *c == "rel_error").ok_or_else(|| {
        SddgError::InvalidConfig("training curve CSV lacks a 'rel_error' column".into())
    })?;
    let mut points = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |col: usize, what: &str| -> Result<f64, SddgError> {
            fields
                .get(col)
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| {
                    SddgError::InvalidConfig(format!(
                        "training curve CSV row {} has no parsable {what}",
                        ln + 2
                    ))
                })
        };
        points.push((parse(round_col, "round")?, parse(err_col, "rel_error")?));
    }
    let series =
        [Series { label: "relative 2-norm error".to_string(), points }];
    Ok(log_line_chart("Training curve", "round", "relative 2-norm error", &series))
}
