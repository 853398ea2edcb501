//! Bias representation vectors: the element-wise similar part of a pair's two
//! hidden states.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cale::{self, Matrix};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::pairminer::CounterExamplePair;

/// Mean share of similar elements the extraction aims for.
pub const DEFAULT_TARGET_RATIO: f64 = 0.15;
pub const MU_MAX: f64 = 2.0;
pub const RATIO_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BiasVector {
    pub pair: (u32, u32),
    pub values: Vec<f32>,
    pub nonzero_count: usize,
    pub ratio: f64,
}

/// Elements are similar when `|a - b| / |a + b| < mu`; a zero sum never is.
#[inline]
fn similar(a: f32, b: f32, mu: f64) -> bool {
    let (a, b) = (f64::from(a), f64::from(b));
    let sum = (a + b).abs();
    sum > 0.0 && (a - b).abs() / sum < mu
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("mu must be positive, got {mu}")))
    }
}

pub fn bias_vector(h_i: &[f32], h_j: &[f32], mu: f64) -> Result<BiasVector> {
    check_mu(mu)?;
    if h_i.len() != h_j.len() {
        return Err(Error::DimensionMismatch {
            expected: h_i.len(),
            got: h_j.len(),
        });
    }
    let values: Vec<f32> = h_i
        .iter()
        .zip(h_j)
        .map(|(&a, &b)| {
            if similar(a, b, mu) {
                ((f64::from(a) + f64::from(b)) / 2.0) as f32
            } else {
                0.0
            }
        })
        .collect();
    let nonzero_count = values.iter().filter(|&&v| v != 0.0).count();
    let ratio = if values.is_empty() {
        0.0
    } else {
        nonzero_count as f64 / values.len() as f64
    };
    Ok(BiasVector {
        pair: (0, 0),
        values,
        nonzero_count,
        ratio,
    })
}

fn check_ids(pairs: &[CounterExamplePair], corpus: &Corpus) -> Result<()> {
    for p in pairs {
        for id in [p.i, p.j] {
            corpus.record(id as usize)?;
        }
    }
    Ok(())
}

/// Mean fraction of similar elements across pairs at threshold `mu`.
pub fn mean_ratio(pairs: &[CounterExamplePair], corpus: &Corpus, mu: f64) -> f64 {
    if pairs.is_empty() || corpus.dim() == 0 {
        return 0.0;
    }
    let hits: usize = pairs
        .par_iter()
        .map(|p| {
            let (a, b) = (corpus.hidden(p.i as usize), corpus.hidden(p.j as usize));
            a.iter().zip(b).filter(|(&x, &y)| similar(x, y, mu)).count()
        })
        .sum();
    hits as f64 / (pairs.len() * corpus.dim()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuCalibration {
    pub mu: f64,
    pub mean_ratio: f64,
    pub target_ratio: f64,
    /// False when no mu in (0, 2] brings the ratio within tolerance; `mu`
    /// is then the nearest boundary.
    pub attained: bool,
}

/// Bisection on `mu` in (0, 2]; the mean ratio is non-decreasing in `mu`.
pub fn calibrate_mu(pairs: &[CounterExamplePair], corpus: &Corpus, target_ratio: f64) -> Result<MuCalibration> {
    if pairs.is_empty() {
        return Err(Error::Insufficient("mu calibration needs at least one pair".into()));
    }
    if !(target_ratio > 0.0 && target_ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("target ratio {target_ratio} outside (0, 1)")));
    }
    check_ids(pairs, corpus)?;
    let ratio = |mu| mean_ratio(pairs, corpus, mu);
    let done = |mu: f64, r: f64| MuCalibration {
        mu,
        mean_ratio: r,
        target_ratio,
        attained: (r - target_ratio).abs() <= RATIO_TOLERANCE,
    };

    let mu_min = MU_MAX * 2f64.powi(-40);
    let r_min = ratio(mu_min);
    if r_min >= target_ratio {
        let out = done(mu_min, r_min);
        if !out.attained {
            log::warn!("mu calibration: ratio {r_min:.3} already exceeds target {target_ratio} at the lower boundary");
        }
        return Ok(out);
    }
    let r_max = ratio(MU_MAX);
    if r_max < target_ratio {
        let out = done(MU_MAX, r_max);
        if !out.attained {
            log::warn!("mu calibration: ratio {r_max:.3} stays below target {target_ratio} at mu = {MU_MAX}");
        }
        return Ok(out);
    }
    let (mut lo, mut hi) = ((mu_min, r_min), (MU_MAX, r_max));
    for _ in 0..60 {
        let mid = 0.5 * (lo.0 + hi.0);
        let r = ratio(mid);
        if r < target_ratio {
            lo = (mid, r);
        } else {
            hi = (mid, r);
        }
        if hi.0 - lo.0 < 1e-12 {
            break;
        }
    }
    let best = if (lo.1 - target_ratio).abs() < (hi.1 - target_ratio).abs() { lo } else { hi };
    let out = done(best.0, best.1);
    if !out.attained {
        log::warn!("mu calibration: closest mean ratio {:.4} misses target {target_ratio}", best.1);
    }
    Ok(out)
}

pub fn batch_extract(pairs: &[CounterExamplePair], corpus: &Corpus, mu: f64) -> Result<Vec<BiasVector>> {
    check_mu(mu)?;
    check_ids(pairs, corpus)?;
    pairs
        .par_iter()
        .map(|p| {
            let mut v = bias_vector(corpus.hidden(p.i as usize), corpus.hidden(p.j as usize), mu)?;
            v.pair = (p.i, p.j);
            Ok(v)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub min: f64,
    pub p10: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
    pub mean: f64,
}

pub fn ratio_summary(vectors: &[BiasVector]) -> Option<RatioSummary> {
    if vectors.is_empty() {
        return None;
    }
    let mut r: Vec<f64> = vectors.iter().map(|v| v.ratio).collect();
    r.sort_by(f64::total_cmp);
    let at = |q: f64| r[(q * (r.len() - 1) as f64).round() as usize];
    Some(RatioSummary {
        min: r[0],
        p10: at(0.1),
        median: at(0.5),
        p90: at(0.9),
        max: r[r.len() - 1],
        mean: r.iter().sum::<f64>() / r.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarRow {
    pub row: usize,
    pub i: u32,
    pub j: u32,
    pub ratio: f64,
}

/// Writes vectors as a CALE matrix plus a JSONL sidecar mapping rows to pairs.
pub fn write_vectors(cale_path: &Path, sidecar_path: &Path, vectors: &[BiasVector], dim: usize) -> Result<()> {
    let mut data = Vec::with_capacity(vectors.len() * dim);
    for v in vectors {
        if v.values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.values.len(),
            });
        }
        data.extend_from_slice(&v.values);
    }
    cale::write(cale_path, &Matrix::new(vectors.len(), dim, data)?)?;
    let mut out = Vec::new();
    for (row, v) in vectors.iter().enumerate() {
        let r = SidecarRow {
            row,
            i: v.pair.0,
            j: v.pair.1,
            ratio: v.ratio,
        };
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    fs::File::create(sidecar_path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(sidecar_path, e))
}

pub fn read_vectors(cale_path: &Path, sidecar_path: &Path) -> Result<Vec<BiasVector>> {
    let m = cale::read(cale_path)?;
    let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let rows: Vec<SidecarRow> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::parse(sidecar_path.display().to_string(), e)))
        .collect::<Result<_>>()?;
    if rows.len() != m.rows {
        return Err(Error::CountMismatch {
            records: rows.len(),
            embeddings: m.rows,
        });
    }
    Ok(rows
        .into_iter()
        .map(|r| {
            let values = m.row(r.row).to_vec();
            let nonzero_count = values.iter().filter(|&&v| v != 0.0).count();
            BiasVector {
                pair: (r.i, r.j),
                values,
                nonzero_count,
                ratio: r.ratio,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::record;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_inputs_keep_everything() {
        let v = bias_vector(&[2.0, -4.0], &[2.0, -4.0], 0.01).unwrap();
        assert_eq!(v.values, vec![2.0, -4.0]);
        assert_eq!(v.ratio, 1.0);
    }

    #[test]
    fn cancelling_elements_are_excluded() {
        let v = bias_vector(&[1.0, 0.0], &[-1.0, 0.0], 0.15).unwrap();
        assert_eq!(v.values, vec![0.0, 0.0]);
        assert_eq!(v.nonzero_count, 0);
    }

    #[test]
    fn hand_evaluated_example() {
        // |1 - 1.2| / 2.2 = 0.0909 < 0.15 ; |1 - 2| / 3 = 0.333 >= 0.15
        let v = bias_vector(&[1.0, 1.0], &[1.2, 2.0], 0.15).unwrap();
        assert!((v.values[0] - 1.1).abs() < 1e-6);
        assert_eq!(v.values[1], 0.0);
        assert_eq!(v.nonzero_count, 1);
        assert_eq!(v.ratio, 0.5);
    }

    #[test]
    fn errors() {
        assert!(matches!(bias_vector(&[1.0], &[1.0, 2.0], 0.1), Err(Error::DimensionMismatch { .. })));
        assert!(bias_vector(&[1.0], &[1.0], 0.0).is_err());
    }

    fn pair(i: u32, j: u32) -> CounterExamplePair {
        CounterExamplePair { i, j, score: 0.9, correct_i: true, correct_j: false, negative: None }
    }

    fn corpus_from(rows: &[Vec<f32>]) -> Corpus {
        let recs = (0..rows.len()).map(|i| record(i, "A", "A", 0.5)).collect();
        Corpus::from_rows(recs, rows).unwrap()
    }

    #[test]
    fn batch_extract_preserves_order_and_matches_single() {
        let c = corpus_from(&[vec![1.0, 1.0], vec![1.2, 2.0], vec![3.0, -1.0], vec![2.9, -1.1]]);
        let pairs = [pair(0, 1), pair(2, 3), pair(1, 3)];
        let out = batch_extract(&pairs, &c, 0.15).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.iter().map(|v| v.pair).collect::<Vec<_>>(), vec![(0, 1), (2, 3), (1, 3)]);
        let single = bias_vector(&[1.0, 1.0], &[1.2, 2.0], 0.15).unwrap();
        assert_eq!(out[0].values, single.values);
        assert!(batch_extract(&[], &c, 0.15).unwrap().is_empty());
        assert!(matches!(batch_extract(&[pair(0, 9)], &c, 0.15), Err(Error::OutOfRange { id: 9, .. })));
    }

    #[test]
    fn identical_pairs_make_target_unattainable() {
        let c = corpus_from(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]);
        let cal = calibrate_mu(&[pair(0, 1)], &c, 0.15).unwrap();
        assert!(!cal.attained);
        assert_eq!(cal.mean_ratio, 1.0);
        assert!(cal.mu > 0.0 && cal.mu < 1e-9);
        assert!(calibrate_mu(&[], &c, 0.15).is_err());
    }

    #[test]
    fn uniform_ratios_calibrate_near_target() {
        // Build pairs whose per-element |a-b|/|a+b| is uniform on [0, 1]:
        // with a = 1 + r and b = 1 - r, |a - b| / |a + b| = r.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 64;
        let mut rows = Vec::new();
        for _ in 0..200 {
            let mut a = Vec::with_capacity(dim);
            let mut b = Vec::with_capacity(dim);
            for _ in 0..dim {
                let r: f32 = rng.random_range(0.0..1.0);
                let scale: f32 = rng.random_range(0.5..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                a.push(scale * (1.0 + r));
                b.push(scale * (1.0 - r));
            }
            rows.push(a);
            rows.push(b);
        }
        let c = corpus_from(&rows);
        let pairs: Vec<_> = (0..200).map(|k| pair(2 * k, 2 * k + 1)).collect();
        // direct simulation: fraction of r below 0.15 is itself ~0.15
        let cal = calibrate_mu(&pairs, &c, 0.15).unwrap();
        assert!(cal.attained);
        assert!((cal.mu - 0.15).abs() <= 0.02, "{}", cal.mu);
        assert!((cal.mean_ratio - 0.15).abs() <= 0.02);
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus_from(&[vec![1.0, 1.0], vec![1.2, 2.0], vec![3.0, -1.0]]);
        let vs = batch_extract(&[pair(0, 1), pair(0, 2)], &c, 0.5).unwrap();
        let (a, b) = (dir.path().join("v.cale"), dir.path().join("v.jsonl"));
        write_vectors(&a, &b, &vs, 2).unwrap();
        assert_eq!(read_vectors(&a, &b).unwrap(), vs);
    }

    fn vec_strategy() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        (1usize..24).prop_flat_map(|d| {
            (prop::collection::vec(-10.0f32..10.0, d), prop::collection::vec(-10.0f32..10.0, d))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn symmetric((a, b) in vec_strategy(), mu in 0.001f64..2.0) {
            prop_assert_eq!(bias_vector(&a, &b, mu).unwrap(), bias_vector(&b, &a, mu).unwrap());
        }

        #[test]
        fn scale_covariant((a, b) in vec_strategy(), mu in 0.001f64..2.0, e in -3i32..4, neg in any::<bool>()) {
            // powers of two scale without rounding
            let c = 2f32.powi(e) * if neg { -1.0 } else { 1.0 };
            let sa: Vec<f32> = a.iter().map(|x| x * c).collect();
            let sb: Vec<f32> = b.iter().map(|x| x * c).collect();
            let scaled = bias_vector(&sa, &sb, mu).unwrap();
            let base = bias_vector(&a, &b, mu).unwrap();
            let expect: Vec<f32> = base.values.iter().map(|v| v * c).collect();
            prop_assert_eq!(scaled.values, expect);
        }

        #[test]
        fn monotone_in_mu((a, b) in vec_strategy(), m1 in 0.001f64..2.0, dm in 0.0f64..1.0) {
            let lo = bias_vector(&a, &b, m1).unwrap();
            let hi = bias_vector(&a, &b, m1 + dm).unwrap();
            prop_assert!(hi.nonzero_count >= lo.nonzero_count);
        }

        #[test]
        fn kept_elements_are_means((a, b) in vec_strategy(), mu in 0.001f64..2.0) {
            let v = bias_vector(&a, &b, mu).unwrap();
            for k in 0..a.len() {
                if v.values[k] != 0.0 {
                    let mean = (f64::from(a[k]) + f64::from(b[k])) / 2.0;
                    prop_assert!((f64::from(v.values[k]) - mean).abs() <= mean.abs() * f64::from(f32::EPSILON));
                }
            }
            prop_assert_eq!(v.nonzero_count, v.values.iter().filter(|x| **x != 0.0).count());
        }
    }
}
