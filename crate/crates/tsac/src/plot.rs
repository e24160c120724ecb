//! Learning-curve plots as standalone SVG files.
//!
//! Each chart shows, per labeled run group, the IQM across seeds at every
//! step with a translucent bootstrap confidence band (seeds permitting).
//! Output is plain deterministic SVG text: identical inputs give identical
//! bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

use crate::evalstats::{bootstrap_ci, iqm};
use crate::metrics::MetricsRow;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("no rows to plot")]
    Empty,
    #[error("run `{run}` has ragged step grids across seeds")]
    RaggedSteps { run: String },
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 46.0;
const PALETTE: [&str; 6] = [
    "#6a1b9a", "#e69f00", "#56b4e9", "#009e73", "#d55e00", "#cc79a7",
];

/// Which column of the metrics table to chart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    IqmReturn,
    IqmSuccess,
}

impl Metric {
    fn pick(self, row: &MetricsRow) -> f64 {
        match self {
            Metric::IqmReturn => row.iqm_return,
            Metric::IqmSuccess => row.iqm_success,
        }
    }

    pub fn axis_label(self) -> &'static str {
        match self {
            Metric::IqmReturn => "IQM return",
            Metric::IqmSuccess => "IQM success",
        }
    }
}

/// One labeled group of runs (seeds) to overlay.
pub struct RunGroup {
    pub label: String,
    pub rows: Vec<MetricsRow>,
}

struct Curve {
    label: String,
    steps: Vec<u64>,
    mid: Vec<f64>,
    band: Option<(Vec<f64>, Vec<f64>)>,
}

/// Renders one SVG chart of `metric` for the given groups: per group the
/// IQM across seeds at every step, with a percentile-bootstrap band once at
/// least two seeds are present.
pub fn render_chart(groups: &[RunGroup], metric: Metric) -> Result<String, PlotError> {
    let mut curves = Vec::new();
    for group in groups {
        let mut by_seed: BTreeMap<u64, Vec<(u64, f64)>> = BTreeMap::new();
        for row in &group.rows {
            by_seed
                .entry(row.seed)
                .or_default()
                .push((row.step, metric.pick(row)));
        }
        if by_seed.is_empty() {
            continue;
        }
        let mut grids = by_seed.values().map(|v| {
            let mut steps: Vec<u64> = v.iter().map(|(s, _)| *s).collect();
            steps.sort_unstable();
            steps
        });
        let grid = grids.next().expect("nonempty");
        if grids.any(|g| g != grid) {
            return Err(PlotError::RaggedSteps {
                run: group.label.clone(),
            });
        }
        let n_seeds = by_seed.len();
        let mut mid = Vec::with_capacity(grid.len());
        let mut lo = Vec::with_capacity(grid.len());
        let mut hi = Vec::with_capacity(grid.len());
        for (idx, step) in grid.iter().enumerate() {
            let vals: Vec<f64> = by_seed
                .values()
                .map(|rows| {
                    let mut sorted = rows.clone();
                    sorted.sort_unstable_by_key(|(s, _)| *s);
                    sorted[idx].1
                })
                .collect();
            mid.push(iqm(&vals).expect("at least one seed"));
            if n_seeds >= 2 {
                let (l, h) =
                    bootstrap_ci(&vals, 400, 0.95, 0x9d0 + *step).expect("enough seeds");
                lo.push(l);
                hi.push(h);
            }
        }
        curves.push(Curve {
            label: group.label.clone(),
            steps: grid,
            mid,
            band: (n_seeds >= 2).then_some((lo, hi)),
        });
    }
    if curves.is_empty() || curves.iter().all(|c| c.steps.is_empty()) {
        return Err(PlotError::Empty);
    }

    // Data ranges.
    let x_max = curves
        .iter()
        .flat_map(|c| c.steps.iter().copied())
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for c in &curves {
        for v in &c.mid {
            y_min = y_min.min(*v);
            y_max = y_max.max(*v);
        }
        if let Some((lo, hi)) = &c.band {
            for v in lo.iter().chain(hi) {
                y_min = y_min.min(*v);
                y_max = y_max.max(*v);
            }
        }
    }
    if y_min == y_max {
        y_min -= 1.0;
        y_max += 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    let (y_min, y_max) = (y_min - pad, y_max + pad);

    let px = |step: f64| MARGIN_L + (step / x_max) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |v: f64| HEIGHT - MARGIN_B - (v - y_min) / (y_max - y_min) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    // Axes.
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#444\"/>",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"#444\"/>",
        HEIGHT - MARGIN_B
    );
    // Ticks and labels.
    for t in 0..=4 {
        let frac = t as f64 / 4.0;
        let x = px(frac * x_max);
        let y = HEIGHT - MARGIN_B;
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.2}\" y1=\"{y}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#444\"/>",
            y + 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{x:.2}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" fill=\"#222\">{}</text>",
            y + 18.0,
            format_step(frac * x_max)
        );
        let v = y_min + frac * (y_max - y_min);
        let yv = py(v);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{yv:.2}\" x2=\"{MARGIN_L}\" y2=\"{yv:.2}\" stroke=\"#444\"/>",
            MARGIN_L - 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\" fill=\"#222\">{v:.3}</text>",
            MARGIN_L - 8.0,
            yv + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" fill=\"#222\">environment steps</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" font-size=\"12\" fill=\"#222\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        metric.axis_label()
    );

    for (idx, curve) in curves.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        if let Some((lo, hi)) = &curve.band {
            let mut points = String::new();
            for (s, v) in curve.steps.iter().zip(hi) {
                let _ = write!(points, "{:.2},{:.2} ", px(*s as f64), py(*v));
            }
            for (s, v) in curve.steps.iter().zip(lo).rev() {
                let _ = write!(points, "{:.2},{:.2} ", px(*s as f64), py(*v));
            }
            let _ = writeln!(
                svg,
                "<polygon points=\"{}\" fill=\"{color}\" opacity=\"0.18\"/>",
                points.trim_end()
            );
        }
        let mut points = String::new();
        for (s, v) in curve.steps.iter().zip(&curve.mid) {
            let _ = write!(points, "{:.2},{:.2} ", px(*s as f64), py(*v));
        }
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            points.trim_end()
        );
        // Legend entry.
        let ly = MARGIN_T + 16.0 * idx as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{ly:.2}\" x2=\"{}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"3\"/>",
            MARGIN_L + 8.0,
            MARGIN_L + 30.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"12\" fill=\"#222\">{}</text>",
            MARGIN_L + 36.0,
            ly + 4.0,
            xml_escape(&curve.label)
        );
    }
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}

fn format_step(step: f64) -> String {
    if step >= 1000.0 {
        format!("{:.0}k", step / 1000.0)
    } else {
        format!("{step:.0}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
