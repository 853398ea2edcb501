//! Top-k principal components by power iteration with deflation.
//!
//! The covariance is never materialized: both solvers apply it (or its Gram
//! counterpart) implicitly through products with the centered data, so a
//! 5120-wide input costs O(n * d) memory.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

pub const POWER_TOLERANCE: f64 = 1e-9;
pub const POWER_MAX_ITER: usize = 1000;
const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub solver: String,
}

/// Mean-centered view over borrowed rows.
pub struct Centered<'a> {
    rows: Vec<&'a [f32]>,
    mean: Vec<f64>,
}

impl<'a> Centered<'a> {
    fn new(rows: Vec<&'a [f32]>, dim: usize) -> Self {
        let partial: Vec<Vec<f64>> = rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0; dim];
                for r in chunk {
                    for (a, &x) in acc.iter_mut().zip(r.iter()) {
                        *a += f64::from(x);
                    }
                }
                acc
            })
            .collect();
        let mut mean = vec![0.0; dim];
        for p in partial {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        let n = rows.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Self { rows, mean }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn row_dot(&self, i: usize, v: &[f64]) -> f64 {
        self.rows[i]
            .iter()
            .zip(&self.mean)
            .zip(v)
            .map(|((&x, m), vk)| (f64::from(x) - m) * vk)
            .sum()
    }

    /// `X v` (length n).
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n()).into_par_iter().map(|i| self.row_dot(i, v)).collect()
    }

    /// `X^T w` (length d), summed chunk-wise in a fixed order.
    pub fn apply_t(&self, w: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let partial: Vec<Vec<f64>> = (0..self.n())
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|idx| {
                let mut acc = vec![0.0; dim];
                for &i in idx {
                    let wi = w[i];
                    if wi == 0.0 {
                        continue;
                    }
                    for ((a, &x), m) in acc.iter_mut().zip(self.rows[i]).zip(&self.mean) {
                        *a += wi * (f64::from(x) - m);
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; dim];
        for p in partial {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }

    pub fn total_variance(&self) -> f64 {
        let ss: Vec<f64> = (0..self.n())
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|idx| {
                idx.iter()
                    .map(|&i| {
                        self.rows[i]
                            .iter()
                            .zip(&self.mean)
                            .map(|(&x, m)| (f64::from(x) - m).powi(2))
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        ss.iter().sum::<f64>() / (self.n() as f64 - 1.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let c = dot(v, u);
        v.iter_mut().zip(u).for_each(|(x, uk)| *x -= c * uk);
    }
}

/// A unit vector orthogonal to `basis`, taken from the standard basis.
fn complete(dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    (0..dim)
        .map(|e| {
            let mut v = vec![0.0; dim];
            v[e] = 1.0;
            orthogonalize(&mut v, basis);
            v
        })
        .max_by(|a, b| norm(a).total_cmp(&norm(b)))
        .map(|mut v| {
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .unwrap_or_default()
}

fn start_vector(dim: usize) -> Vec<f64> {
    // deterministic, dense, and unlikely to be orthogonal to any eigenvector
    (0..dim).map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_75).fract()).collect()
}

/// Power iteration with deflation for the top `k` eigenpairs of a symmetric
/// PSD operator.
pub fn power_deflation(op: impl Fn(&[f64]) -> Vec<f64>, dim: usize, k: usize, tol: f64, max_iter: usize) -> Vec<(f64, Vec<f64>)> {
    let mut found: Vec<(f64, Vec<f64>)> = Vec::with_capacity(k);
    let mut scale = 0.0f64;
    for _ in 0..k.min(dim) {
        let basis: Vec<Vec<f64>> = found.iter().map(|(_, u)| u.clone()).collect();
        let deflated = |v: &[f64]| {
            let mut w = op(v);
            orthogonalize(&mut w, &basis);
            w
        };
        let mut v = start_vector(dim);
        orthogonalize(&mut v, &basis);
        let n0 = norm(&v);
        if n0 < 1e-12 {
            v = complete(dim, &basis);
        } else {
            v.iter_mut().for_each(|x| *x /= n0);
        }
        let mut degenerate = false;
        for _ in 0..max_iter {
            let mut w = deflated(&v);
            let nw = norm(&w);
            if nw <= 1e-12 * scale.max(f64::MIN_POSITIVE) || nw == 0.0 {
                degenerate = true;
                break;
            }
            w.iter_mut().for_each(|x| *x /= nw);
            let diff = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            v = w;
            if diff < tol {
                break;
            }
        }
        let lambda = if degenerate { 0.0 } else { dot(&v, &deflated(&v)).max(0.0) };
        scale = scale.max(lambda);
        found.push((lambda, v));
    }
    found
}

pub trait PcaSolver: Send + Sync {
    fn name(&self) -> &'static str;
    /// Top-`k` (eigenvalue, unit eigenvector) pairs of the sample covariance,
    /// eigenvalues non-increasing.
    fn top_eigen(&self, data: &Centered<'_>, k: usize) -> Vec<(f64, Vec<f64>)>;
}

/// Iterates on the d x d covariance `X^T X / (n - 1)`.
pub struct CovariancePower;

/// Iterates on the n x n Gram matrix `X X^T / (n - 1)` and maps back with `X^T`.
pub struct GramPower;

/// Gram route when there are fewer rows than columns, covariance otherwise.
pub struct AutoSolver;

impl PcaSolver for CovariancePower {
    fn name(&self) -> &'static str {
        "covariance"
    }

    fn top_eigen(&self, data: &Centered<'_>, k: usize) -> Vec<(f64, Vec<f64>)> {
        let denom = data.n() as f64 - 1.0;
        power_deflation(
            |v| data.apply_t(&data.apply(v)).into_iter().map(|x| x / denom).collect(),
            data.dim(),
            k,
            POWER_TOLERANCE,
            POWER_MAX_ITER,
        )
    }
}

impl PcaSolver for GramPower {
    fn name(&self) -> &'static str {
        "gram"
    }

    fn top_eigen(&self, data: &Centered<'_>, k: usize) -> Vec<(f64, Vec<f64>)> {
        let denom = data.n() as f64 - 1.0;
        let gram = power_deflation(
            |u| data.apply(&data.apply_t(u)).into_iter().map(|x| x / denom).collect(),
            data.n(),
            k,
            POWER_TOLERANCE,
            POWER_MAX_ITER,
        );
        let mut out: Vec<(f64, Vec<f64>)> = Vec::with_capacity(k);
        for (lambda, u) in gram {
            let mut v = data.apply_t(&u);
            let basis: Vec<Vec<f64>> = out.iter().map(|(_, c)| c.clone()).collect();
            orthogonalize(&mut v, &basis);
            let n = norm(&v);
            if lambda > 0.0 && n > 1e-12 {
                v.iter_mut().for_each(|x| *x /= n);
                out.push((lambda, v));
            } else {
                out.push((0.0, complete(data.dim(), &basis)));
            }
        }
        while out.len() < k.min(data.dim()) {
            let basis: Vec<Vec<f64>> = out.iter().map(|(_, c)| c.clone()).collect();
            out.push((0.0, complete(data.dim(), &basis)));
        }
        out
    }
}

impl PcaSolver for AutoSolver {
    fn name(&self) -> &'static str {
        "auto"
    }

    fn top_eigen(&self, data: &Centered<'_>, k: usize) -> Vec<(f64, Vec<f64>)> {
        if data.n() < data.dim() {
            GramPower.top_eigen(data, k)
        } else {
            CovariancePower.top_eigen(data, k)
        }
    }
}

pub fn solvers() -> Registry<fn() -> Box<dyn PcaSolver>> {
    Registry::<fn() -> Box<dyn PcaSolver>>::new("PCA solver")
        .with("auto", || Box::new(AutoSolver))
        .with("covariance", || Box::new(CovariancePower))
        .with("gram", || Box::new(GramPower))
}

fn fix_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

pub fn pca_fit<R: AsRef<[f32]> + Sync>(vectors: &[R], k: usize) -> Result<PcaModel> {
    pca_fit_with(vectors, k, &AutoSolver)
}

pub fn pca_fit_with<R: AsRef<[f32]> + Sync>(vectors: &[R], k: usize, solver: &dyn PcaSolver) -> Result<PcaModel> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if vectors.len() < k + 1 {
        return Err(Error::Insufficient(format!("PCA with k = {k} needs at least {} vectors, got {}", k + 1, vectors.len())));
    }
    let dim = vectors[0].as_ref().len();
    if let Some(bad) = vectors.iter().find(|v| v.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.as_ref().len(),
        });
    }
    if k > dim {
        return Err(Error::InvalidConfig(format!("k = {k} exceeds dimension {dim}")));
    }
    let data = Centered::new(vectors.iter().map(|v| v.as_ref()).collect(), dim);
    let total = data.total_variance();
    if !(total > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let eig = solver.top_eigen(&data, k);
    let mut components = Vec::with_capacity(k);
    let mut variance = Vec::with_capacity(k);
    for (lambda, mut v) in eig {
        fix_sign(&mut v);
        components.push(v);
        variance.push(lambda);
    }
    let ratio = variance.iter().map(|l| (l / total).clamp(0.0, 1.0)).collect();
    Ok(PcaModel {
        mean: data.mean,
        components,
        explained_variance: variance,
        explained_variance_ratio: ratio,
        solver: solver.name().to_string(),
    })
}

pub fn pca_transform<R: AsRef<[f32]> + Sync>(model: &PcaModel, vectors: &[R]) -> Result<Vec<Vec<f64>>> {
    let dim = model.mean.len();
    vectors
        .par_iter()
        .map(|v| {
            let v = v.as_ref();
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            Ok(model
                .components
                .iter()
                .map(|c| v.iter().zip(&model.mean).zip(c).map(|((&x, m), ck)| (f64::from(x) - m) * ck).sum())
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn line_data_is_rank_one() {
        let pts: Vec<Vec<f32>> = (0..10).map(|t| vec![t as f32, 2.0 * t as f32]).collect();
        for name in ["covariance", "gram", "auto"] {
            let m = pca_fit_with(&pts, 2, solvers().get(name).unwrap()().as_ref()).unwrap();
            let s5 = 5f64.sqrt();
            assert!((m.components[0][0] - 1.0 / s5).abs() < 1e-9, "{name}: {:?}", m.components);
            assert!((m.components[0][1] - 2.0 / s5).abs() < 1e-9);
            assert!((m.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
            assert!(m.explained_variance_ratio[1].abs() < 1e-9);
            assert!(dot(&m.components[0], &m.components[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(pca_fit(&[vec![1.0f32, 2.0], vec![3.0, 4.0]], 2), Err(Error::Insufficient(_))));
        assert!(matches!(pca_fit(&vec![vec![1.0f32, 2.0]; 4], 2), Err(Error::ZeroVariance)));
        let m = pca_fit(&[vec![0.0f32, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]], 2).unwrap();
        assert!(matches!(pca_transform(&m, &[vec![1.0f32]]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn transform_of_mean_and_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f32>> = (0..40).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2)]).collect();
        let m = pca_fit(&pts, 2).unwrap();
        let mean: Vec<f32> = m.mean.iter().map(|&x| x as f32).collect();
        let at_mean = pca_transform(&m, &[mean.clone()]).unwrap();
        assert!(at_mean[0].iter().all(|c| c.abs() < 1e-6));
        let shifted: Vec<f32> = m.mean.iter().zip(&m.components[0]).map(|(a, c)| (a + c) as f32).collect();
        let p = pca_transform(&m, &[shifted]).unwrap();
        assert!((p[0][0] - 1.0).abs() < 1e-6 && p[0][1].abs() < 1e-6, "{:?}", p);
    }

    #[test]
    fn projected_variance_matches_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f32>> = (0..200)
            .map(|_| {
                let a: f32 = rng.random_range(-5.0..5.0);
                let b: f32 = rng.random_range(-2.0..2.0);
                vec![a + b, a - b, 0.3 * b, rng.random_range(-0.5..0.5), a * 0.1]
            })
            .collect();
        let m = pca_fit(&pts, 2).unwrap();
        let coords = pca_transform(&m, &pts).unwrap();
        for axis in 0..2 {
            let var = coords.iter().map(|c| c[axis] * c[axis]).sum::<f64>() / (coords.len() as f64 - 1.0);
            let rel = (var - m.explained_variance[axis]).abs() / m.explained_variance[axis];
            assert!(rel < 1e-4, "axis {axis}: {var} vs {}", m.explained_variance[axis]);
        }
        assert!(m.explained_variance_ratio[0] >= m.explained_variance_ratio[1]);
    }

    #[test]
    fn rank_two_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (u, w) = ([1.0f64, 0.5, -0.3, 0.2], [0.1f64, -0.4, 0.7, 0.9]);
        let pts: Vec<Vec<f32>> = (0..30)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
                (0..4).map(|k| (1.0 + a * u[k] + b * w[k]) as f32).collect()
            })
            .collect();
        for name in ["covariance", "gram"] {
            let m = pca_fit_with(&pts, 2, solvers().get(name).unwrap()().as_ref()).unwrap();
            let coords = pca_transform(&m, &pts).unwrap();
            for (p, c) in pts.iter().zip(&coords) {
                for k in 0..4 {
                    let rec = m.mean[k] + c[0] * m.components[0][k] + c[1] * m.components[1][k];
                    assert!((rec - f64::from(p[k])).abs() < 1e-5, "{name}");
                }
            }
        }
    }

    fn random_fixture(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
        // anisotropic scales keep the leading eigenvalues apart
        let scales: Vec<f64> = (0..dim).map(|k| 3.0 / (1.0 + k as f64)).collect();
        let mix: Vec<Vec<f64>> = (0..dim).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        (0..n)
            .map(|_| {
                let z: Vec<f64> = scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect();
                (0..dim).map(|r| (0..dim).map(|c| mix[r][c] * z[c]).sum::<f64>() as f32).collect()
            })
            .collect()
    }

    #[test]
    fn matches_dense_eigensolver() {
        use nalgebra::{DMatrix, SymmetricEigen};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut fixtures = vec![vec![
            vec![2.0f32, 0.0, 1.0],
            vec![0.0, 1.0, 3.0],
            vec![1.0, 1.0, 0.0],
            vec![4.0, 2.0, 1.0],
            vec![3.0, 0.5, 2.5],
            vec![0.5, 3.0, 1.5],
        ]];
        for f in 0..12 {
            let dim = 3 + f % 8;
            let n = [6, 9, 25, 60][f % 4];
            fixtures.push(random_fixture(&mut rng, n, dim));
        }
        for (f, pts) in fixtures.iter().enumerate() {
            let (n, dim) = (pts.len(), pts[0].len());
            let x = DMatrix::from_fn(n, dim, |r, c| f64::from(pts[r][c]));
            let mean = x.row_mean();
            let centered = DMatrix::from_fn(n, dim, |r, c| x[(r, c)] - mean[c]);
            let cov = centered.transpose() * &centered / (n as f64 - 1.0);
            let eig = SymmetricEigen::new(cov.clone());
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let k = 2.min(dim);
            for name in ["covariance", "gram", "auto"] {
                let m = pca_fit_with(pts, k, solvers().get(name).unwrap()().as_ref()).unwrap();
                for c in 0..k {
                    let want = eig.eigenvectors.column(order[c]);
                    let got = &m.components[c];
                    let sign = if got.iter().zip(want.iter()).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
                    for d in 0..dim {
                        assert!((got[d] - sign * want[d]).abs() < 1e-6, "fixture {f} solver {name} component {c}: {got:?} vs {want:?}");
                    }
                    let lambda = eig.eigenvalues[order[c]];
                    assert!((m.explained_variance[c] - lambda).abs() <= 1e-8 * lambda.max(1.0), "fixture {f} {name}");
                }
                let total = cov.trace();
                assert!((m.explained_variance_ratio[0] - eig.eigenvalues[order[0]] / total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn plane_with_one_percent_noise() {
        for (seed, dim, n) in [(1u64, 10usize, 300usize), (2, 64, 500), (3, 512, 400), (4, 128, 2000)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for _ in 0..2 {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                orthogonalize(&mut v, &basis);
                let len = norm(&v);
                basis.push(v.into_iter().map(|x| x / len).collect());
            }
            let offset: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            // signal energy per point is about 1 + 0.25; noise carries 1% of it
            let noise_sd = (0.01 * 1.25 / dim as f64).sqrt() * 3f64.sqrt();
            let pts: Vec<Vec<f32>> = (0..n)
                .map(|_| {
                    let (a, b) = (rng.random_range(-1.0..1.0) * 3f64.sqrt(), rng.random_range(-0.5..0.5) * 3f64.sqrt());
                    (0..dim)
                        .map(|d| (offset[d] + a * basis[0][d] + b * basis[1][d] + noise_sd * rng.random_range(-1.0..1.0)) as f32)
                        .collect()
                })
                .collect();
            let m = pca_fit(&pts, 2).unwrap();
            let top2: f64 = m.explained_variance_ratio.iter().sum();
            assert!(top2 >= 0.96, "dim {dim}: {top2}");
            assert!(top2 < 0.999, "noise should be visible, got {top2}");
            let align = dot(&m.components[0], &basis[0]).abs();
            assert!(align > 0.99, "dim {dim}: {align}");
        }
    }
}
