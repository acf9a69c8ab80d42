//! SVG line charts with 95% interval error bars, plus the CSV behind each one.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Method, Regime};
use crate::error::{Error, Result};
use crate::eval::{self, summarize, EvalReport};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: (f64, f64, f64, f64) = (64.0, 24.0, 40.0, 52.0); // left, right, top, bottom
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// One plotted point: `(condition, mean, ci_low, ci_high)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub method: String,
    pub metric: String,
    pub condition: f64,
    pub mean: f64,
    #[serde(rename = "ci-low")]
    pub ci_low: f64,
    #[serde(rename = "ci-high")]
    pub ci_high: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PlotFiles {
    pub noise: Option<(PathBuf, PathBuf)>,
    pub partial: Option<(PathBuf, PathBuf)>,
    pub elbo: Option<(PathBuf, PathBuf)>,
}

impl PlotFiles {
    pub fn all(&self) -> Vec<PathBuf> {
        [&self.noise, &self.partial, &self.elbo]
            .into_iter()
            .flatten()
            .flat_map(|(a, b)| [a.clone(), b.clone()])
            .collect()
    }
}

/// Rows of `metric` per method and condition. Intervals need two seeds;
/// with one, the interval collapses onto the mean.
pub fn plot_rows(report: &EvalReport, regime: Regime, methods: &[Method], metric: &str) -> Result<Vec<PlotRow>> {
    let mut conditions: Vec<f64> = report.records.iter().map(|r| r.condition).collect();
    conditions.sort_by(f64::total_cmp);
    conditions.dedup();
    let mut rows = Vec::new();
    for m in methods {
        for &c in &conditions {
            let v = report.values(m.name(), regime.name(), c, metric);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("non-finite {metric} for {m} at {c}")));
            }
            let (mean, lo, hi) = match v.len() {
                0 => continue,
                1 => (v[0], v[0], v[0]),
                _ => {
                    let s = summarize(&v)?;
                    (s.mean, s.ci_low(), s.ci_high())
                }
            };
            rows.push(PlotRow {
                method: m.name().into(),
                metric: metric.into(),
                condition: c,
                mean,
                ci_low: lo,
                ci_high: hi,
            });
        }
    }
    Ok(rows)
}

/// Writes every figure the given reports support.
pub fn write_plots(reports: &[(Regime, EvalReport)], methods: &[Method], dir: &Path) -> Result<PlotFiles> {
    std::fs::create_dir_all(dir)?;
    let mut files = PlotFiles::default();
    for (regime, report) in reports {
        let (xlabel, stem) = match regime {
            Regime::Noise => ("observation noise std", "tracking-error-noise"),
            Regime::Partial => ("observed proportion P", "tracking-error-partial"),
        };
        let rows = plot_rows(report, *regime, methods, "tracking_error")?;
        if rows.is_empty() {
            return Err(Error::Format(format!("{regime} report has no rows for the selected methods")));
        }
        let svg = document(1, &chart("Tracking error", xlabel, "mean Euclidean error", &rows, 0.0, 0.0));
        let pair = write_pair(dir, stem, &svg, &rows)?;
        match regime {
            Regime::Noise => files.noise = Some(pair),
            Regime::Partial => files.partial = Some(pair),
        }
        if *regime == Regime::Partial && report.records.iter().any(|r| r.elbo.is_some()) {
            let mut all = Vec::new();
            let mut panels = String::new();
            for (i, (metric, title)) in [("log_lik", "Log-likelihood term"), ("kl", "KL to prior"), ("elbo", "ELBO")]
                .iter()
                .enumerate()
            {
                let rows = plot_rows(report, *regime, methods, metric)?;
                panels.push_str(&chart(title, xlabel, "nats per step", &rows, i as f64 * WIDTH, 0.0));
                all.extend(rows);
            }
            files.elbo = Some(write_pair(dir, "elbo-partial", &document(3, &panels), &all)?);
        }
    }
    Ok(files)
}

fn write_pair(dir: &Path, stem: &str, svg: &str, rows: &[PlotRow]) -> Result<(PathBuf, PathBuf)> {
    let svg_path = dir.join(format!("{stem}.svg"));
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&svg_path, svg)?;
    eval::write_rows(&csv_path, rows)?;
    Ok((svg_path, csv_path))
}

/// Wraps `panels` side-by-side charts in an SVG document.
fn document(panels: usize, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">\n{body}</svg>\n",
        panels as f64 * WIDTH
    )
}

/// Tick values covering `[lo, hi]` at a 1-2-5 step.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn label(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// One chart as a `<g>` group translated to `(dx, dy)`.
fn chart(title: &str, xlabel: &str, ylabel: &str, rows: &[PlotRow], dx: f64, dy: f64) -> String {
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
    let xs = rows.iter().map(|r| r.condition);
    let (mut x0, mut x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (mut y0, mut y1) = (
        rows.iter().map(|r| r.ci_low).fold(f64::INFINITY, f64::min),
        rows.iter().map(|r| r.ci_high).fold(f64::NEG_INFINITY, f64::max),
    );
    if rows.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let xpad = ((x1 - x0) * 0.05).max(0.05);
    let ypad = ((y1 - y0) * 0.08).max(1e-3 * y1.abs().max(1.0));
    (x0, x1, y0, y1) = (x0 - xpad, x1 + xpad, y0 - ypad, y1 + ypad);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut g = String::new();
    let _ = writeln!(g, "<g transform=\"translate({dx},{dy})\">");
    let _ = writeln!(g, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(g, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{title}</text>", WIDTH / 2.0);
    let _ = writeln!(g, "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>");
    for t in ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(g, "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#444\"/>", mt + ph, mt + ph + 4.0);
        let _ = writeln!(g, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", mt + ph + 16.0, label(t));
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(g, "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{ml}\" y2=\"{y:.1}\" stroke=\"#444\"/>", ml - 4.0);
        let _ = writeln!(g, "<line x1=\"{ml}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>", ml + pw);
        let _ = writeln!(g, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", ml - 6.0, y + 4.0, label(t));
    }
    let _ = writeln!(g, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xlabel}</text>", ml + pw / 2.0, HEIGHT - 12.0);
    let _ = writeln!(
        g,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{ylabel}</text>",
        mt + ph / 2.0,
        mt + ph / 2.0
    );

    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for (i, m) in methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<&PlotRow> = rows.iter().filter(|r| r.method == *m).collect();
        let path: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", sx(r.condition), sy(r.mean))).collect();
        let _ = writeln!(g, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>", path.join(" "));
        for r in &pts {
            let (x, y) = (sx(r.condition), sy(r.mean));
            if r.ci_high > r.ci_low {
                let (ylo, yhi) = (sy(r.ci_low), sy(r.ci_high));
                let _ = writeln!(
                    g,
                    "<path class=\"error-bar\" d=\"M{x:.1},{ylo:.1}V{yhi:.1}M{:.1},{ylo:.1}h6M{:.1},{yhi:.1}h6\" stroke=\"{color}\"/>",
                    x - 3.0,
                    x - 3.0
                );
            }
            let _ = writeln!(g, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"2.5\" fill=\"{color}\"/>");
        }
        let ly = mt + 12.0 + 14.0 * i as f64;
        let lx = ml + pw - 80.0;
        let _ = writeln!(
            g,
            "<g class=\"legend-entry\"><line x1=\"{lx:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{:.1}\" y=\"{ly:.1}\">{m}</text></g>",
            ly - 4.0,
            lx + 16.0,
            ly - 4.0,
            lx + 20.0
        );
    }
    g.push_str("</g>\n");
    g
}
