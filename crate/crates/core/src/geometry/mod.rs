//! Projection of bias vectors to the plane and density clustering there.

pub mod dbscan;
pub mod pca;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use dbscan::{dbscan, estimate_eps, Label, DEFAULT_MIN_PTS};
pub use pca::{pca_fit, pca_fit_with, pca_transform, solvers, PcaModel, PcaSolver};

use crate::biasrep::BiasVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Fixed radius; estimated from the k-distance knee when absent.
    pub eps: Option<f64>,
    pub min_pts: usize,
    /// Clusters holding fewer than this fraction of the points (and never
    /// fewer than `min_pts`) are folded into noise.
    pub min_cluster_frac: f64,
    pub solver: String,
}

pub const DEFAULT_MIN_CLUSTER_FRAC: f64 = 0.01;

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            eps: None,
            min_pts: DEFAULT_MIN_PTS,
            min_cluster_frac: DEFAULT_MIN_CLUSTER_FRAC,
            solver: "auto".into(),
        }
    }
}

impl ClusterConfig {
    pub fn check(&self) -> Result<()> {
        if self.min_pts == 0 {
            return Err(Error::InvalidConfig("min_pts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_cluster_frac) {
            return Err(Error::InvalidConfig(format!("min_cluster_frac must be in [0, 1], got {}", self.min_cluster_frac)));
        }
        if let Some(e) = self.eps {
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::InvalidConfig(format!("eps must be positive, got {e}")));
            }
        }
        Ok(())
    }
}

/// Relabels clusters smaller than `min_size` as noise and renumbers the rest
/// by first appearance. Returns the new labels and how many clusters were
/// dropped.
pub fn fold_small_clusters(labels: &[Label], min_size: usize) -> (Vec<Label>, usize) {
    let count = labels.iter().filter_map(|l| l.cluster()).max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; count];
    labels.iter().filter_map(|l| l.cluster()).for_each(|c| sizes[c] += 1);
    let mut remap: Vec<Option<usize>> = vec![None; count];
    let mut next = 0;
    let out = labels
        .iter()
        .map(|l| match *l {
            Label::Cluster(c) if sizes[c] >= min_size => {
                let id = *remap[c].get_or_insert_with(|| {
                    next += 1;
                    next - 1
                });
                Label::Cluster(id)
            }
            _ => Label::Noise,
        })
        .collect();
    let dropped = sizes.iter().filter(|&&s| s < min_size).count();
    (out, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPoint {
    pub i: u32,
    pub j: u32,
    pub coords: [f64; 2],
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSize {
    pub id: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub eps: f64,
    pub eps_estimated: bool,
    pub min_pts: usize,
    pub min_cluster_size: usize,
    /// Clusters found by DBSCAN before small ones were folded into noise.
    pub raw_clusters: usize,
    pub solver: String,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub points: Vec<ClusterPoint>,
    pub clusters: Vec<ClusterSize>,
    pub noise: usize,
}

impl ClusterAssignment {
    pub fn labels(&self) -> Vec<Label> {
        self.points.iter().map(|p| p.label).collect()
    }

    /// Row indices of each cluster's members, in cluster-id order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters.len()];
        for (row, p) in self.points.iter().enumerate() {
            if let Label::Cluster(c) = p.label {
                out[c].push(row);
            }
        }
        out
    }

    /// Every vector as noise at the origin, for inputs too small or too flat
    /// to project.
    pub fn unclustered(vectors: &[BiasVector], cfg: &ClusterConfig) -> Self {
        Self {
            eps: cfg.eps.unwrap_or(0.0),
            eps_estimated: false,
            min_pts: cfg.min_pts,
            min_cluster_size: cfg.min_pts,
            raw_clusters: 0,
            solver: cfg.solver.clone(),
            explained_variance: Vec::new(),
            explained_variance_ratio: Vec::new(),
            points: vectors
                .iter()
                .map(|v| ClusterPoint {
                    i: v.pair.0,
                    j: v.pair.1,
                    coords: [0.0, 0.0],
                    label: Label::Noise,
                })
                .collect(),
            clusters: Vec::new(),
            noise: vectors.len(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::parse("clusters file", e))
    }
}

/// Fits a 2-component PCA to the bias vectors, then runs DBSCAN on the
/// projection.
pub fn reduce_and_cluster(vectors: &[BiasVector], cfg: &ClusterConfig) -> Result<ClusterAssignment> {
    cfg.check()?;
    let solver = solvers().get(&cfg.solver)?();
    let rows: Vec<&[f32]> = vectors.iter().map(|v| v.values.as_slice()).collect();
    let model = pca_fit_with(&rows, 2, solver.as_ref())?;
    let coords: Vec<[f64; 2]> = pca_transform(&model, &rows)?.into_iter().map(|c| [c[0], c[1]]).collect();
    let (eps, estimated) = match cfg.eps {
        Some(e) => (e, false),
        None => (estimate_eps(&coords, cfg.min_pts.saturating_sub(1).max(1))?, true),
    };
    let raw = dbscan(&coords, eps, cfg.min_pts)?;
    let min_cluster_size = cfg.min_pts.max((cfg.min_cluster_frac * coords.len() as f64).ceil() as usize);
    let (labels, dropped) = fold_small_clusters(&raw, min_cluster_size);
    let count = labels.iter().filter_map(|l| l.cluster()).max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; count];
    labels.iter().filter_map(|l| l.cluster()).for_each(|c| sizes[c] += 1);
    Ok(ClusterAssignment {
        eps,
        eps_estimated: estimated,
        min_pts: cfg.min_pts,
        min_cluster_size,
        raw_clusters: count + dropped,
        solver: model.solver.clone(),
        explained_variance: model.explained_variance,
        explained_variance_ratio: model.explained_variance_ratio,
        points: vectors
            .iter()
            .zip(coords)
            .zip(&labels)
            .map(|((v, coords), &label)| ClusterPoint {
                i: v.pair.0,
                j: v.pair.1,
                coords,
                label,
            })
            .collect(),
        noise: labels.iter().filter(|l| **l == Label::Noise).count(),
        clusters: sizes.into_iter().enumerate().map(|(id, size)| ClusterSize { id, size }).collect(),
    })
}
