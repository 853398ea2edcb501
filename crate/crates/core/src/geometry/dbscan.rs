//! Density clustering in the projected plane, plus a k-distance knee
//! heuristic for picking the radius.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_PTS: usize = 5;
/// Above this many points, the k-distance curve is built from a strided subset.
pub const EPS_QUERY_CAP: usize = 5000;

/// Cluster membership; serialized as an integer with -1 for noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Noise,
    Cluster(usize),
}

impl Label {
    pub fn as_i64(self) -> i64 {
        match self {
            Label::Noise => -1,
            Label::Cluster(c) => c as i64,
        }
    }

    pub fn cluster(self) -> Option<usize> {
        match self {
            Label::Noise => None,
            Label::Cluster(c) => Some(c),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i64(self.as_i64())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        match v {
            -1 => Ok(Label::Noise),
            c if c >= 0 => Ok(Label::Cluster(c as usize)),
            other => Err(serde::de::Error::custom(format!("invalid cluster label {other}"))),
        }
    }
}

/// Uniform grid with cell side `eps`; a radius query touches the 3x3 block.
struct Grid<'a> {
    points: &'a [[f64; 2]],
    eps: f64,
    side: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [[f64; 2]], eps: f64) -> Self {
        // a hair wider than eps so rounding in the division never skips a cell
        let side = eps * (1.0 + 1e-9);
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, side)).or_default().push(i);
        }
        Self { points, eps, side, cells }
    }

    fn key(p: &[f64; 2], side: f64) -> (i64, i64) {
        ((p[0] / side).floor() as i64, (p[1] / side).floor() as i64)
    }

    /// Indices within `eps` of point `i`, itself included, in ascending order.
    fn neighbors(&self, i: usize) -> Vec<usize> {
        let p = &self.points[i];
        let (cx, cy) = Self::key(p, self.side);
        let eps2 = self.eps * self.eps;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy)) {
                    out.extend(bucket.iter().copied().filter(|&j| dist2(p, &self.points[j]) <= eps2));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// DBSCAN with Euclidean distance. A point is core when at least `min_pts`
/// points (itself included) lie within `eps`. Border points join the first
/// cluster that reaches them; clusters are numbered by first appearance.
pub fn dbscan(points: &[[f64; 2]], eps: f64, min_pts: usize) -> Result<Vec<Label>> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidConfig(format!("eps must be positive and finite, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::InvalidConfig("min_pts must be at least 1".into()));
    }
    if let Some(i) = points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite coordinate at point {i}")));
    }
    let grid = Grid::new(points, eps);
    let mut labels: Vec<Option<Label>> = vec![None; points.len()];
    let mut next = 0usize;
    for p in 0..points.len() {
        if labels[p].is_some() {
            continue;
        }
        let nb = grid.neighbors(p);
        if nb.len() < min_pts {
            labels[p] = Some(Label::Noise);
            continue;
        }
        let c = Label::Cluster(next);
        next += 1;
        labels[p] = Some(c);
        let mut queue: VecDeque<usize> = nb.into_iter().filter(|&q| q != p).collect();
        while let Some(q) = queue.pop_front() {
            match labels[q] {
                Some(Label::Cluster(_)) => continue,
                Some(Label::Noise) => labels[q] = Some(c),
                None => {
                    labels[q] = Some(c);
                    let nq = grid.neighbors(q);
                    if nq.len() >= min_pts {
                        queue.extend(nq.into_iter().filter(|&r| !matches!(labels[r], Some(Label::Cluster(_)))));
                    }
                }
            }
        }
    }
    // clusters are created in scan order, so ids already follow first appearance
    Ok(labels.into_iter().map(|l| l.unwrap_or(Label::Noise)).collect())
}

/// Radius from the knee of the sorted k-distance curve: the point farthest
/// below the chord joining its ends. Falls back to the median k-distance
/// when the curve has no knee.
pub fn estimate_eps(points: &[[f64; 2]], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if points.len() < k + 1 {
        return Err(Error::Insufficient(format!("eps estimation with k = {k} needs at least {} points, got {}", k + 1, points.len())));
    }
    let n = points.len();
    let queries: Vec<usize> = if n <= EPS_QUERY_CAP {
        (0..n).collect()
    } else {
        (0..EPS_QUERY_CAP).map(|t| t * n / EPS_QUERY_CAP).collect()
    };
    let mut kd: Vec<f64> = queries
        .par_iter()
        .map(|&q| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != q).map(|j| dist2(&points[q], &points[j])).collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            kth.sqrt()
        })
        .collect();
    kd.sort_by(f64::total_cmp);
    let median = kd[kd.len() / 2];
    let (first, last) = (kd[0], kd[kd.len() - 1]);
    let span = last - first;
    if kd.len() < 3 || !(span > 1e-12 * last.abs().max(1.0)) {
        return positive(median, &kd);
    }
    let m = (kd.len() - 1) as f64;
    let (best, gap) = kd
        .iter()
        .enumerate()
        .map(|(i, &y)| (i, i as f64 / m - (y - first) / span))
        .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
    if gap <= 1e-9 {
        return positive(median, &kd);
    }
    positive(kd[best], &kd)
}

fn positive(eps: f64, kd: &[f64]) -> Result<f64> {
    if eps > 0.0 {
        return Ok(eps);
    }
    // duplicate-heavy data: take the smallest positive k-distance instead
    kd.iter()
        .copied()
        .find(|&d| d > 0.0)
        .ok_or_else(|| Error::Insufficient("all k-distances are zero".into()))
}
