//! Training-log CSV and standalone SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use crate::bench::eval::{csv_error, write_csv};
use crate::error::{Error, Result};
use crate::mdcycle::LogRow;

pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    write_csv(path, log)
}

pub fn parse_log(reader: impl std::io::Read, name: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| row.map_err(|e| csv_error(name, e))).collect()
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_log(file, path)
}

/// Per-iteration means of `f` over the rows of each iteration, in order.
pub fn per_iteration(log: &[LogRow], f: impl Fn(&LogRow) -> f64) -> Vec<(f64, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for row in log {
        match out.last_mut() {
            Some((it, sum, n)) if *it == row.iteration => {
                *sum += f(row);
                *n += 1;
            }
            _ => out.push((row.iteration, f(row), 1)),
        }
    }
    out.into_iter().map(|(it, s, n)| (it as f64, s / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    match (lo.is_finite(), hi > lo) {
        (false, _) => (0.0, 1.0),
        (true, true) => (lo, hi),
        (true, false) => (lo - 0.5, lo + 0.5),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// SVG 1.1 chart with axes, five ticks per axis and one polyline per
/// non-empty series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter().copied());
    let (x0, x1) = span(all().map(|p| p.0));
    let (y0, y1) = span(all().map(|p| p.1));
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<line class="axis" x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line class="axis" x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        W / 2.0,
        escape(title),
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 12.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>
<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            px(xv),
            H - M + 16.0,
            tick(xv),
            M - 4.0,
            py(yv) + 4.0,
            tick(yv)
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if !ser.points.is_empty() {
            let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            W - M - 120.0,
            M + 14.0 * i as f64,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Writes `log.csv`, `reward.svg` and `alpha_rate.svg` into `dir`.
pub fn emit_plots(log: &[LogRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_log(&dir.join("log.csv"), log)?;
    let reward = Series {
        name: "mean reward".into(),
        points: per_iteration(log, |r| r.mean_reward),
    };
    let alpha = Series {
        name: "alpha rate".into(),
        points: per_iteration(log, |r| r.alpha as f64),
    };
    for (file, title, ylabel, ser) in [
        ("reward.svg", "Mean reward", "reward", reward),
        ("alpha_rate.svg", "Mimicry gate rate", "alpha rate", alpha),
    ] {
        let path = dir.join(file);
        std::fs::write(&path, line_chart(title, "iteration", ylabel, &[ser])).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
