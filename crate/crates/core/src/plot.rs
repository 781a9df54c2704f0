//! Minimal SVG line charts for the study CSVs. NMSE is shown in dB.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::harness::{CommRow, ImagingSummaryRow};

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn db(v: f64) -> f64 {
    10.0 * v.max(1e-30).log10()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per series with axes, ticks and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, esc(title));
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, sx(xv), H - BOTTOM + 18.0, xv);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, LEFT - 6.0, sy(yv) + 4.0, yv);
        let _ = writeln!(s, r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, LEFT + pw, sy(yv), sy(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 10.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        TOP + ph / 2.0,
        esc(y_label)
    );
    for (i, se) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<String> =
            se.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(s, r#"<polyline class="curve" fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, esc(&se.label));
    }
    s.push_str("</svg>\n");
    s
}

/// NMSE in dB against SNR, one chart per round and neighborhood size and
/// one curve per scheme. Returns `(file stem, svg)` pairs.
pub fn comm_charts(rows: &[CommRow]) -> Vec<(String, String)> {
    let mut groups: BTreeMap<(String, usize), BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.round.clone(), r.n_tx)).or_default().entry(r.scheme.clone()).or_default().push((r.snr_db, db(r.mean_nmse)));
    }
    groups
        .into_iter()
        .map(|((round, n), curves)| {
            let series: Vec<Series> = curves.into_iter().map(|(label, points)| Series { label, points }).collect();
            let title = format!("{round} round, {n} transmitting neighbors");
            (format!("comm_{round}_n{n}"), line_chart(&title, "channel SNR (dB)", "semantic NMSE (dB)", &series))
        })
        .collect()
}

/// Mean velocity NMSE in dB over iterations, one chart per topology.
pub fn imaging_charts(rows: &[ImagingSummaryRow]) -> Vec<(String, String)> {
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.topology.clone()).or_default().entry(r.scheme.clone()).or_default().push((r.iteration as f64, db(r.mean_nmse)));
    }
    groups
        .into_iter()
        .map(|(topo, curves)| {
            let series: Vec<Series> = curves.into_iter().map(|(label, points)| Series { label, points }).collect();
            (format!("imaging_{topo}"), line_chart(&format!("{topo} topology"), "iteration", "mean velocity NMSE (dB)", &series))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_curve_per_scheme() {
        let row = |scheme: &str, snr: f64| CommRow {
            schema_version: 1,
            round: "gradient".into(),
            n_tx: 2,
            scheme: scheme.into(),
            snr_db: snr,
            samples: 3,
            mean_nmse: 0.1,
            halfwidth: 0.0,
            max_power: 1.0,
        };
        let rows = vec![row("perfect", 0.0), row("perfect", 10.0), row("jscc_si", 0.0), row("jscc_si", 10.0)];
        let charts = comm_charts(&rows);
        assert_eq!(charts.len(), 1);
        assert_eq!(charts[0].1.matches(r#"class="curve""#).count(), 2);
        assert!(charts[0].1.contains("jscc_si"));
    }
}
