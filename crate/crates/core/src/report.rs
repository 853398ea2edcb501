//! Run summary and the SVG scatter of the projected bias vectors.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{ClusterAssignment, ClusterSize, Label};

pub const NOISE_COLOR: &str = "#9e9e9e";
const PALETTE: [&str; 10] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#393b79"];

pub fn cluster_color(id: usize) -> &'static str {
    PALETTE[id % PALETTE.len()]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub records: usize,
    pub mined_pairs: usize,
    pub selected_pairs: usize,
    pub negatives: usize,
    pub bias_vectors: usize,
    pub clusters: usize,
    pub noise: usize,
    pub patterns: usize,
    pub prompts: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau: Option<f64>,
    pub tau_p: Option<f64>,
    pub mu: Option<f64>,
    pub eps: Option<f64>,
    pub min_pts: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub counts: Counts,
    pub thresholds: Thresholds,
    pub feasible: Option<bool>,
    pub mean_ratio: Option<f64>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub top2_explained_variance_ratio: f64,
    pub cluster_sizes: Vec<ClusterSize>,
}

/// Share of total variance held by the first two components.
pub fn top2(ratios: &[f64]) -> f64 {
    ratios.iter().take(2).sum()
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const PLOT: (f64, f64, f64, f64) = (50.0, 30.0, 520.0, 420.0);

/// One colored group per cluster, noise in gray, and a legend row per
/// cluster plus one for noise.
pub fn render_svg(assignment: &ClusterAssignment) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (x0, y0, w, h) = PLOT;
    let _ = writeln!(s, r##"<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#444"/>"##);
    let ev = &assignment.explained_variance_ratio;
    let axis = |k: usize| ev.get(k).map_or(format!("PC{}", k + 1), |r| format!("PC{} ({:.1}%)", k + 1, 100.0 * r));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x0 + w / 2.0, y0 + h + 30.0, axis(0));
    let _ = writeln!(s, r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#, y0 + h / 2.0, y0 + h / 2.0, axis(1));

    if assignment.points.is_empty() {
        let _ = writeln!(s, r##"<text class="empty" x="{}" y="{}" text-anchor="middle" fill="#666">empty: no bias vectors to plot</text>"##, x0 + w / 2.0, y0 + h / 2.0);
    } else {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &assignment.points {
            for d in 0..2 {
                lo[d] = lo[d].min(p.coords[d]);
                hi[d] = hi[d].max(p.coords[d]);
            }
        }
        let span = |d: usize| if hi[d] > lo[d] { hi[d] - lo[d] } else { 1.0 };
        let px = |c: [f64; 2]| (x0 + 10.0 + (c[0] - lo[0]) / span(0) * (w - 20.0), y0 + h - 10.0 - (c[1] - lo[1]) / span(1) * (h - 20.0));
        // noise first so clusters draw on top
        let _ = writeln!(s, r#"<g class="noise" fill="{NOISE_COLOR}" fill-opacity="0.6">"#);
        for p in assignment.points.iter().filter(|p| p.label == Label::Noise) {
            let (x, y) = px(p.coords);
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2"/>"#);
        }
        s.push_str("</g>\n");
        for c in &assignment.clusters {
            let _ = writeln!(s, r#"<g class="cluster" data-cluster="{}" fill="{}" fill-opacity="0.8">"#, c.id, cluster_color(c.id));
            for p in assignment.points.iter().filter(|p| p.label == Label::Cluster(c.id)) {
                let (x, y) = px(p.coords);
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5"/>"#);
            }
            s.push_str("</g>\n");
        }
    }

    let lx = x0 + w + 20.0;
    let _ = writeln!(s, r#"<g class="legend">"#);
    let rows = assignment
        .clusters
        .iter()
        .map(|c| (cluster_color(c.id), format!("cluster {} (n={})", c.id, c.size)))
        .chain(std::iter::once((NOISE_COLOR, format!("noise (n={})", assignment.noise))));
    for (k, (color, label)) in rows.enumerate() {
        let y = y0 + 10.0 + 20.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend-row"><rect x="{lx}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{label}</text></g>"#,
            y - 9.0,
            lx + 16.0,
            y
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}
