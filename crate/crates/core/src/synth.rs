//! Synthetic corpora with planted bias groups and a known answer key.
//!
//! Records come in twins: two records of the same bias group that share a
//! context component but carry different gold answers. Twins are the intended
//! counter-example pairs. In a failing twin one side answers with the group's
//! biased answer instead of its gold, with a low gold probability.
//!
//! Hidden state of a record in twin `t`, group `g`, gold `a`:
//! `context_t + strength * b_g + class_scale * s_a + noise`. Each `b_g` is a
//! unit vector on its own disjoint block of `bias_support * dim` coordinates,
//! so the directions are orthonormal. `context_t`, `s_a` and the noise are
//! isotropic Gaussians with expected norm 1, 1 and `noise_scale`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_corpus, Corpus, InstanceRecord};
use crate::error::{Error, Result};
use crate::geometry::{ClusterAssignment, Label};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_records: usize,
    pub dim: usize,
    pub n_groups: usize,
    /// Norm of each planted bias direction relative to the context component.
    pub bias_strength: f64,
    /// Fraction of twins whose non-biased side is forced to fail.
    pub fail_rate: f64,
    /// Fraction of coordinates each bias direction occupies.
    pub bias_support: f64,
    pub answer_set: Vec<String>,
    pub noise_scale: f64,
    pub class_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_records: 200,
            dim: 64,
            n_groups: 3,
            bias_strength: 5.0,
            fail_rate: 0.2,
            bias_support: 0.125,
            answer_set: ["A", "B", "C", "D"].map(String::from).to_vec(),
            noise_scale: 0.1,
            class_scale: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_records < 2 {
            return bad(format!("n_records must be at least 2, got {}", self.n_records));
        }
        if self.n_groups == 0 || self.n_groups > self.n_records / 2 {
            return bad(format!("n_groups must be in 1..={} for {} records, got {}", self.n_records / 2, self.n_records, self.n_groups));
        }
        if !(self.bias_support > 0.0 && self.bias_support <= 1.0) {
            return bad(format!("bias_support must be in (0, 1], got {}", self.bias_support));
        }
        if self.n_groups * self.support_len() > self.dim {
            return bad(format!("dim {} cannot hold {} disjoint bias blocks of {}", self.dim, self.n_groups, self.support_len()));
        }
        if !(0.0..=1.0).contains(&self.fail_rate) {
            return bad(format!("fail_rate must be in [0, 1], got {}", self.fail_rate));
        }
        for (name, v) in [("bias_strength", self.bias_strength), ("noise_scale", self.noise_scale), ("class_scale", self.class_scale)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        let distinct: HashSet<&str> = self.answer_set.iter().map(|a| a.trim()).collect();
        if distinct.len() < 2 || distinct.len() != self.answer_set.len() || distinct.contains("") {
            return bad("answer_set needs at least 2 distinct non-empty answers".into());
        }
        Ok(())
    }

    pub fn support_len(&self) -> usize {
        ((self.bias_support * self.dim as f64).round() as usize).max(1)
    }

    pub fn biased_answer(&self, group: usize) -> &str {
        &self.answer_set[group % self.answer_set.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    /// Bias group of each record.
    pub groups: Vec<usize>,
    pub biased_answers: Vec<String>,
    /// Intended counter-example pairs, `i < j`, sorted.
    pub twins: Vec<(u32, u32)>,
    /// Records whose generation was forced incorrect.
    pub failed: Vec<u32>,
}

impl GroundTruth {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::parse("ground truth", e))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let sd = scale / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

/// Unit vectors on disjoint random coordinate blocks.
fn block_directions(rng: &mut ChaCha8Rng, dim: usize, k: usize, support: usize) -> Vec<Vec<f64>> {
    let mut coords: Vec<usize> = (0..dim).collect();
    coords.shuffle(rng);
    coords
        .chunks(support)
        .take(k)
        .map(|block| {
            let mut v = vec![0.0; dim];
            for &c in block {
                let z: f64 = StandardNormal.sample(rng);
                v[c] = z;
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect()
}

pub fn generate(spec: &SynthSpec) -> Result<(Corpus, GroundTruth)> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, dim, k) = (spec.n_records, spec.dim, spec.n_groups);
    let answers = &spec.answer_set;
    let bias_dirs = block_directions(&mut rng, dim, k, spec.support_len());
    let class_dirs: Vec<Vec<f64>> = answers.iter().map(|_| gaussian(&mut rng, dim, 1.0)).collect();

    let n_twins = n / 2;
    let mut order: Vec<usize> = (0..n_twins).collect();
    order.shuffle(&mut rng);
    let n_fail = (spec.fail_rate * n_twins as f64).round() as usize;
    let mut failing = vec![false; n_twins];
    order[..n_fail].iter().for_each(|&t| failing[t] = true);

    let mut records = Vec::with_capacity(n);
    let mut hidden = Vec::with_capacity(n * dim);
    let mut groups = Vec::with_capacity(n);
    let mut twins = Vec::with_capacity(n_twins);
    let mut failed = Vec::new();

    let mut emit = |rng: &mut ChaCha8Rng, context: &[f64], g: usize, gold: usize, generated: &str, gold_prob: f64, twin: usize| {
        let id = records.len();
        let noise = gaussian(rng, dim, spec.noise_scale);
        hidden.extend((0..dim).map(|d| (context[d] + spec.bias_strength * bias_dirs[g][d] + spec.class_scale * class_dirs[gold][d] + noise[d]) as f32));
        records.push(InstanceRecord {
            id,
            input_text: format!("Case {id} (scenario {twin}): which option fits best?"),
            gold_output: answers[gold].clone(),
            generated_output: generated.to_string(),
            gold_prob,
        });
        groups.push(g);
    };

    for t in 0..n_twins {
        let g = t % k;
        let biased = answers.iter().position(|a| a == spec.biased_answer(g)).unwrap_or(0);
        let context = gaussian(&mut rng, dim, 1.0);
        let base = 2 * t;
        twins.push((base as u32, base as u32 + 1));
        if failing[t] {
            let mut other = rng.random_range(0..answers.len() - 1);
            if other >= biased {
                other += 1;
            }
            let fail_first = rng.random_bool(0.5);
            let (p_fail, p_ok) = (rng.random_range(0.0..0.1), rng.random_range(0.5..1.0));
            let fail_id = if fail_first { base } else { base + 1 };
            failed.push(fail_id as u32);
            for side in [fail_first, !fail_first] {
                if side {
                    emit(&mut rng, &context, g, other, &answers[biased], p_fail, t);
                } else {
                    emit(&mut rng, &context, g, biased, &answers[biased], p_ok, t);
                }
            }
        } else {
            let a = rng.random_range(0..answers.len());
            let mut b = rng.random_range(0..answers.len() - 1);
            if b >= a {
                b += 1;
            }
            for gold in [a, b] {
                let p = rng.random_range(0.5..1.0);
                emit(&mut rng, &context, g, gold, &answers[gold], p, t);
            }
        }
    }
    if n % 2 == 1 {
        let g = n_twins % k;
        let context = gaussian(&mut rng, dim, 1.0);
        let gold = rng.random_range(0..answers.len());
        let p = rng.random_range(0.5..1.0);
        emit(&mut rng, &context, g, gold, &answers[gold], p, n_twins);
    }

    let corpus = Corpus::new(records, dim, hidden)?.with_task_goal(Some("which option is correct".into()));
    let truth = GroundTruth {
        spec: spec.clone(),
        groups,
        biased_answers: (0..k).map(|g| spec.biased_answer(g).to_string()).collect(),
        twins,
        failed,
    };
    Ok((corpus, truth))
}

/// Writes the corpus files plus the ground truth; returns the manifest path.
pub fn write_synth(dir: &Path, corpus: &Corpus, truth: &GroundTruth) -> Result<PathBuf> {
    let manifest = write_corpus(dir, corpus)?;
    truth.write(&dir.join(GROUND_TRUTH_FILE))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub intended: usize,
    pub mined: usize,
    pub precision: f64,
    pub recall: f64,
    /// Over clustered points only; `None` without a clustering.
    pub ari: Option<f64>,
    pub clusters: usize,
    pub clustered: usize,
    pub noise: usize,
}

/// Planted label of a pair: its group when both sides share one, otherwise
/// a separate "mixed" class.
pub fn planted_label(truth: &GroundTruth, i: u32, j: u32) -> usize {
    let (gi, gj) = (truth.groups[i as usize], truth.groups[j as usize]);
    if gi == gj {
        gi
    } else {
        truth.spec.n_groups
    }
}

pub fn score_recovery(mined: &[(u32, u32)], clusters: Option<&ClusterAssignment>, truth: &GroundTruth) -> RecoveryMetrics {
    let intended: HashSet<(u32, u32)> = truth.twins.iter().copied().collect();
    let hits = mined.iter().filter(|&&(i, j)| intended.contains(&(i.min(j), i.max(j)))).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut ari, mut n_clusters, mut clustered, mut noise) = (None, 0, 0, 0);
    if let Some(c) = clusters {
        let (mut found, mut planted) = (Vec::new(), Vec::new());
        for p in &c.points {
            match p.label {
                Label::Cluster(id) => {
                    found.push(id);
                    planted.push(planted_label(truth, p.i, p.j));
                }
                Label::Noise => noise += 1,
            }
        }
        clustered = found.len();
        n_clusters = c.clusters.len();
        ari = Some(adjusted_rand_index(&found, &planted));
    }
    RecoveryMetrics {
        intended: intended.len(),
        mined: mined.len(),
        precision: ratio(hits, mined.len()),
        recall: ratio(hits, intended.len()),
        ari,
        clusters: n_clusters,
        clustered,
        noise,
    }
}

fn comb2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand Index between two labelings of the same items. Degenerate
/// cases where both labelings are trivial score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut table: std::collections::HashMap<(usize, usize), usize> = std::collections::HashMap::new();
    let mut rows: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut cols: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| comb2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| comb2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| comb2(v)).sum();
    let expected = sum_a * sum_b / comb2(n);
    let max = (sum_a + sum_b) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate;
    use crate::pairminer::{mine_pairs, MiningConfig};
    use crate::selector::{calibrate, SelectionConfig};

    #[test]
    fn same_spec_same_corpus() {
        let spec = SynthSpec { seed: 3, ..Default::default() };
        let (a, ta) = generate(&spec).unwrap();
        let (b, tb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&SynthSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn structure_of_twins() {
        let spec = SynthSpec {
            n_records: 201,
            ..Default::default()
        };
        let (corpus, truth) = generate(&spec).unwrap();
        assert!(validate(&corpus).is_clean());
        assert_eq!(corpus.len(), 201);
        assert_eq!(truth.twins.len(), 100);
        assert_eq!(truth.failed.len(), 20);
        let recs = corpus.records();
        for &(i, j) in &truth.twins {
            let (a, b) = (&recs[i as usize], &recs[j as usize]);
            assert_ne!(a.gold_output, b.gold_output);
            assert_eq!(truth.groups[i as usize], truth.groups[j as usize]);
        }
        for &f in &truth.failed {
            let r = &recs[f as usize];
            assert_ne!(r.generated_output, r.gold_output);
            assert_eq!(r.generated_output, truth.biased_answers[truth.groups[f as usize]]);
            assert!(r.gold_prob < 0.1);
        }
        let failing: HashSet<u32> = truth.failed.iter().copied().collect();
        assert!(recs.iter().filter(|r| !failing.contains(&(r.id as u32))).all(|r| r.generated_output == r.gold_output && r.gold_prob >= 0.5));
    }

    #[test]
    fn rejects_inconsistent_specs() {
        for spec in [
            SynthSpec { n_groups: 200, ..Default::default() },
            SynthSpec { n_groups: 0, ..Default::default() },
            SynthSpec { fail_rate: 1.5, ..Default::default() },
            SynthSpec { noise_scale: -1.0, ..Default::default() },
            SynthSpec { dim: 2, ..Default::default() },
            SynthSpec { bias_support: 0.0, ..Default::default() },
            SynthSpec { answer_set: vec!["A".into(), "A".into()], ..Default::default() },
        ] {
            assert!(matches!(generate(&spec), Err(Error::InvalidConfig(_))), "{spec:?}");
        }
    }

    #[test]
    fn calibrated_mining_recovers_twins() {
        let spec = SynthSpec { seed: 7, ..Default::default() };
        let (corpus, truth) = generate(&spec).unwrap();
        let sel = calibrate(&corpus, &SelectionConfig::default()).unwrap();
        let mined = mine_pairs(&corpus, &MiningConfig { tau: sel.tau_used, ..Default::default() }).unwrap();
        let pairs: Vec<(u32, u32)> = mined.iter().map(|p| (p.i, p.j)).collect();
        let m = score_recovery(&pairs, None, &truth);
        assert!(m.recall >= 0.9, "{m:?}");
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]), 1.0);
        assert_eq!(adjusted_rand_index(&[], &[]), 1.0);
        // by hand: index 2, row sum 6, column sum 3, expected 6 * 3 / 15
        let v = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]);
        assert!((v - (2.0 - 1.2) / (4.5 - 1.2)).abs() < 1e-12, "{v}");
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 0]), 0.0);
    }

    #[test]
    fn ari_of_random_labels_is_near_zero() {
        let truth: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mean = (0..100)
            .map(|_| {
                let mut shuffled = truth.clone();
                shuffled.shuffle(&mut rng);
                adjusted_rand_index(&shuffled, &truth)
            })
            .sum::<f64>()
            / 100.0;
        assert!(mean.abs() <= 0.05, "{mean}");
    }

    #[test]
    fn perfect_and_empty_recovery() {
        let (_, truth) = generate(&SynthSpec::default()).unwrap();
        let m = score_recovery(&truth.twins, None, &truth);
        assert_eq!((m.precision, m.recall), (1.0, 1.0));
        let points = truth
            .twins
            .iter()
            .map(|&(i, j)| crate::geometry::ClusterPoint {
                i,
                j,
                coords: [0.0, 0.0],
                label: Label::Cluster(truth.groups[i as usize]),
            })
            .collect();
        let clusters = ClusterAssignment {
            eps: 1.0,
            eps_estimated: false,
            min_pts: 5,
            min_cluster_size: 5,
            raw_clusters: 3,
            solver: "auto".into(),
            explained_variance: vec![1.0, 0.0],
            explained_variance_ratio: vec![1.0, 0.0],
            points,
            clusters: Vec::new(),
            noise: 0,
        };
        assert_eq!(score_recovery(&truth.twins, Some(&clusters), &truth).ari, Some(1.0));
        let empty = score_recovery(&[], None, &truth);
        assert_eq!((empty.recall, empty.precision), (0.0, 0.0));
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (corpus, truth) = generate(&SynthSpec::default()).unwrap();
        let manifest = write_synth(dir.path(), &corpus, &truth).unwrap();
        let back = crate::corpus::load_corpus(&manifest).unwrap();
        assert_eq!(back.records(), corpus.records());
        assert_eq!(GroundTruth::read(&dir.path().join(GROUND_TRUTH_FILE)).unwrap(), truth);
    }
}
