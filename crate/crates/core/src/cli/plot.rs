//! Self-contained SVG line charts: per-seed trailing rolling mean, then the
//! mean across seeds with a ±1 std band.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::{read_metrics, StepMetrics};

pub const DEFAULT_WINDOW: usize = 5;

pub type Column = fn(&StepMetrics) -> Option<f64>;

struct SeriesSpec {
    label: &'static str,
    column: Column,
    /// Sparse columns (evaluations) are plotted at their own points without smoothing.
    smooth: bool,
}

struct ChartSpec {
    file: &'static str,
    title: &'static str,
    y_label: &'static str,
    series: &'static [SeriesSpec],
}

const CHARTS: [ChartSpec; 4] = [
    ChartSpec {
        file: "accuracy.svg",
        title: "Accuracy",
        y_label: "accuracy",
        series: &[
            SeriesSpec {
                label: "train_accuracy",
                column: |m| Some(m.train_accuracy),
                smooth: true,
            },
            SeriesSpec {
                label: "eval_avg_at_k",
                column: |m| m.eval_avg_at_k,
                smooth: false,
            },
        ],
    },
    ChartSpec {
        file: "response_length.svg",
        title: "Mean response length",
        y_label: "tokens",
        series: &[SeriesSpec {
            label: "mean_response_length",
            column: |m| Some(m.mean_response_length),
            smooth: true,
        }],
    },
    ChartSpec {
        file: "routing.svg",
        title: "Routing fractions",
        y_label: "fraction of rollouts",
        series: &[
            SeriesSpec {
                label: "grpo_frac",
                column: |m| Some(m.grpo_frac),
                smooth: true,
            },
            SeriesSpec {
                label: "sdpo_frac",
                column: |m| Some(m.sdpo_frac),
                smooth: true,
            },
            SeriesSpec {
                label: "teacher_avail_frac",
                column: |m| Some(m.teacher_avail_frac),
                smooth: true,
            },
        ],
    },
    ChartSpec {
        file: "teacher_entropy.svg",
        title: "Mean teacher entropy",
        y_label: "nats",
        series: &[SeriesSpec {
            label: "mean_teacher_entropy",
            column: |m| m.mean_teacher_entropy,
            smooth: true,
        }],
    },
];

const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

/// Mean and ±1 std across seeds at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandPoint {
    pub step: usize,
    pub mean: f64,
    pub std: f64,
}

/// Trailing mean over the last `window` points (fewer at the start).
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Sample standard deviation; zero for a single value.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Aggregates one column across seeds over the steps every seed logged.
pub fn band(runs: &[Vec<StepMetrics>], column: Column, window: usize, smooth: bool) -> Vec<BandPoint> {
    let mut per_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in runs {
        let (steps, raw): (Vec<usize>, Vec<f64>) = run.iter().filter_map(|m| column(m).map(|v| (m.step, v))).unzip();
        let values = if smooth { rolling_mean(&raw, window) } else { raw };
        for (s, v) in steps.into_iter().zip(values) {
            per_step.entry(s).or_default().push(v);
        }
    }
    per_step
        .into_iter()
        .filter(|(_, vs)| vs.len() == runs.len())
        .map(|(step, vs)| BandPoint {
            step,
            mean: vs.iter().sum::<f64>() / vs.len() as f64,
            std: sample_std(&vs),
        })
        .collect()
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, step: f64) -> f64 {
        let plot_w = WIDTH - LEFT - RIGHT;
        LEFT + (step - self.x0) / (self.x1 - self.x0) * plot_w
    }

    fn y(&self, v: f64) -> f64 {
        let plot_h = HEIGHT - TOP - BOTTOM;
        TOP + plot_h - (v - self.y0) / (self.y1 - self.y0) * plot_h
    }
}

fn frame(bands: &[Vec<BandPoint>]) -> Option<Frame> {
    let pts: Vec<&BandPoint> = bands.iter().flatten().collect();
    if pts.is_empty() {
        return None;
    }
    let x0 = pts.iter().map(|p| p.step).min()? as f64;
    let mut x1 = pts.iter().map(|p| p.step).max()? as f64;
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let mut y0 = pts.iter().map(|p| p.mean - p.std).fold(f64::INFINITY, f64::min);
    let mut y1 = pts.iter().map(|p| p.mean + p.std).fold(f64::NEG_INFINITY, f64::max);
    let pad = if y1 > y0 {
        0.05 * (y1 - y0)
    } else {
        0.5f64.max(0.1 * y0.abs())
    };
    y0 -= pad;
    y1 += pad;
    Some(Frame { x0, x1, y0, y1 })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render(chart: &ChartSpec, bands: &[Vec<BandPoint>], seeds: usize, window: usize) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"##
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="22" font-size="15" text-anchor="middle">{} ({} seed{}, {}-step rolling mean)</text>"##,
        WIDTH / 2.0,
        escape(chart.title),
        seeds,
        if seeds == 1 { "" } else { "s" },
        window
    );
    let Some(f) = frame(bands) else {
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{}" text-anchor="middle" fill="#666">no data</text>"##,
            WIDTH / 2.0,
            HEIGHT / 2.0
        );
        svg.push_str("</svg>\n");
        return svg;
    };
    let (px0, px1, py0, py1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        svg,
        r##"<rect x="{px0}" y="{py0}" width="{}" height="{}" fill="none" stroke="#333"/>"##,
        px1 - px0,
        py1 - py0
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let step = f.x0 + t * (f.x1 - f.x0);
        let v = f.y0 + t * (f.y1 - f.y0);
        let (x, y) = (f.x(step), f.y(v));
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{py1}" x2="{x:.2}" y2="{:.2}" stroke="#333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{:.0}</text>"##,
            py1 + 5.0,
            py1 + 18.0,
            step
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{px0}" y2="{y:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"##,
            px0 - 5.0,
            px0 - 8.0,
            y + 4.0,
            v
        );
    }
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" text-anchor="middle">step</text>"##,
        (px0 + px1) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"##,
        (py0 + py1) / 2.0,
        (py0 + py1) / 2.0,
        escape(chart.y_label)
    );

    for (k, (spec, pts)) in chart.series.iter().zip(bands).enumerate() {
        let color = COLORS[k % COLORS.len()];
        if !pts.is_empty() {
            let upper = pts
                .iter()
                .map(|p| format!("{:.2},{:.2}", f.x(p.step as f64), f.y(p.mean + p.std)));
            let lower = pts
                .iter()
                .rev()
                .map(|p| format!("{:.2},{:.2}", f.x(p.step as f64), f.y(p.mean - p.std)));
            let poly: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(
                svg,
                r##"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"##,
                poly.join(" ")
            );
            let line: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.2},{:.2}", f.x(p.step as f64), f.y(p.mean)))
                .collect();
            let _ = writeln!(
                svg,
                r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"##,
                line.join(" ")
            );
            if !spec.smooth {
                for p in pts {
                    let _ = writeln!(
                        svg,
                        r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"##,
                        f.x(p.step as f64),
                        f.y(p.mean)
                    );
                }
            }
        }
        let ly = py0 + 10.0 + 20.0 * k as f64;
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/><text x="{:.2}" y="{:.2}">{}</text>"##,
            px1 + 10.0,
            px1 + 30.0,
            px1 + 35.0,
            ly + 4.0,
            escape(spec.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the four charts for a set of runs (one metrics file per seed).
pub fn plot_runs(runs: &[Vec<StepMetrics>], out_dir: &Path, window: usize) -> Result<Vec<PathBuf>> {
    if runs.is_empty() || runs.iter().any(|r| r.is_empty()) {
        return Err(Error::InvalidInput(
            "plot needs at least one non-empty metrics file".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    CHARTS
        .iter()
        .map(|chart| {
            let bands: Vec<Vec<BandPoint>> = chart
                .series
                .iter()
                .map(|s| band(runs, s.column, window, s.smooth))
                .collect();
            let path = out_dir.join(chart.file);
            std::fs::write(&path, render(chart, &bands, runs.len(), window)).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

pub fn plot_files(metrics: &[PathBuf], out_dir: &Path, window: usize) -> Result<Vec<PathBuf>> {
    let runs = metrics.iter().map(|p| read_metrics(p)).collect::<Result<Vec<_>>>()?;
    plot_runs(&runs, out_dir, window)
}
