//! Loss-curve rendering from metrics CSVs as standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use super::{moving_average, Result, TrainError, METRICS_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: f64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
    pub tokens_per_s: f64,
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    let bad = |m: String| TrainError::Config(m);
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => return Err(bad(format!("metrics header {other:?} != {METRICS_HEADER:?}"))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("metrics line {}: expected 6 fields", n + 2)));
        }
        let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad(format!("metrics line {}: bad number {:?}", n + 2, f[i])));
        rows.push(MetricRow {
            step: f[0].trim().parse().map_err(|_| bad(format!("metrics line {}: bad step", n + 2)))?,
            epoch: num(1)?,
            loss: num(2)?,
            lr: num(3)?,
            seconds: num(4)?,
            tokens_per_s: num(5)?,
        });
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    parse_metrics(&std::fs::read_to_string(path)?)
}

const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];

/// Line chart of loss against step, one series per entry, each smoothed
/// with a trailing window of `smooth` steps.
pub fn render_svg(series: &[(String, Vec<MetricRow>)], smooth: usize) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (64.0, 160.0, 24.0, 48.0);
    let curves: Vec<(&str, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(name, rows)| {
            let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
            let k = smooth.max(1).min(losses.len().max(1));
            let avg = moving_average(&losses, k);
            let pts = avg.iter().enumerate().map(|(i, &l)| (rows[i + k - 1].step as f64, l)).collect();
            (name.as_str(), pts)
        })
        .collect();
    let all = curves.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        if y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    y0 = y0.min(0.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * i as f64 / 5.0;
        let fy = y0 + (y1 - y0) * i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#, sx(fx), h - bottom + 16.0, fx);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, left - 6.0, sy(fy) + 4.0, fy);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            left + pw,
            sy(fy),
            sy(fy)
        );
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">loss (mean of {smooth})</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> =
            pts.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = top + 16.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
