//! Counter example pair mining.
//!
//! A counter example pair is two records whose hidden states are closer than
//! `tau` in cosine similarity while their gold outputs differ, and where the
//! model answered at least one side correctly.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterExamplePair {
    pub i: u32,
    pub j: u32,
    #[serde(serialize_with = "ser_sig7")]
    pub score: f32,
    pub correct_i: bool,
    pub correct_j: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<u32>,
}

fn ser_sig7<S: serde::Serializer>(score: &f32, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig(f64::from(*score), 7))
}

/// Rounds to `digits` significant decimal digits.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x).parse().unwrap_or(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub tau: f64,
    pub block_size: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            block_size: 128,
        }
    }
}

impl MiningConfig {
    pub fn check(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!("tau {} outside [-1, 1]", self.tau)));
        }
        Ok(())
    }
}

/// Binary string similarity: whitespace-trimmed exact match.
pub fn sim_exact(a: &str, b: &str) -> bool {
    a.trim() == b.trim()
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

const LANES: usize = 16;

/// Dot product with a fixed lane-wise summation order, shared by every miner
/// so that scores agree bit-for-bit across strategies.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0] + tail
}

/// Per-record facts the mining predicates need, precomputed once.
pub(crate) struct RecordFacts {
    pub gold: Vec<u32>,
    pub generated: Vec<u32>,
    pub correct: Vec<bool>,
}

impl RecordFacts {
    pub fn new(corpus: &Corpus) -> Self {
        let mut vocab: HashMap<&str, u32> = HashMap::new();
        let n = corpus.len();
        let (mut gold, mut generated, mut correct) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for r in corpus.records() {
            let next = vocab.len() as u32;
            let g = *vocab.entry(r.gold_output.trim()).or_insert(next);
            let next = vocab.len() as u32;
            let p = *vocab.entry(r.generated_output.trim()).or_insert(next);
            gold.push(g);
            generated.push(p);
            correct.push(g == p);
        }
        Self {
            gold,
            generated,
            correct,
        }
    }

    /// Different gold outputs and at least one correct generation.
    #[inline]
    pub fn counter_candidate(&self, i: usize, j: usize) -> bool {
        self.gold[i] != self.gold[j] && (self.correct[i] || self.correct[j])
    }
}

/// Scans all `i < j` pairs in `block x block` tiles, keeping those passing
/// `pre` (checked before the dot product) with normalized dot `> tau`.
/// Output order is by tile, then `i`, then `j`.
pub(crate) fn scan_blocked<P, F, T>(corpus: &Corpus, tau: f64, block: usize, pre: P, emit: F) -> Vec<T>
where
    P: Fn(usize, usize) -> bool + Sync,
    F: Fn(usize, usize, f32) -> T + Sync,
    T: Send,
{
    let n = corpus.len();
    let block = block.max(1);
    let blocks = n.div_ceil(block);
    let tiles: Vec<(usize, usize)> = (0..blocks).flat_map(|bi| (bi..blocks).map(move |bj| (bi, bj))).collect();
    let per_tile: Vec<Vec<T>> = tiles
        .par_iter()
        .map(|&(bi, bj)| {
            let mut out = Vec::new();
            let (i0, i1) = (bi * block, ((bi + 1) * block).min(n));
            let (j0, j1) = (bj * block, ((bj + 1) * block).min(n));
            for i in i0..i1 {
                let a = corpus.normalized(i);
                let start = if bi == bj { i + 1 } else { j0 };
                for j in start..j1 {
                    if !pre(i, j) {
                        continue;
                    }
                    let s = dot(a, corpus.normalized(j));
                    if f64::from(s) > tau {
                        out.push(emit(i, j, s));
                    }
                }
            }
            out
        })
        .collect();
    per_tile.into_iter().flatten().collect()
}

/// Exact blocked miner. Output sorted by `(i, j)`.
pub fn mine_pairs(corpus: &Corpus, cfg: &MiningConfig) -> Result<Vec<CounterExamplePair>> {
    cfg.check()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let facts = RecordFacts::new(corpus);
    let mut pairs = scan_blocked(
        corpus,
        cfg.tau,
        cfg.block_size,
        |i, j| facts.counter_candidate(i, j),
        |i, j, score| CounterExamplePair {
            i: i as u32,
            j: j as u32,
            score,
            correct_i: facts.correct[i],
            correct_j: facts.correct[j],
            negative: None,
        },
    );
    pairs.par_sort_unstable_by_key(|p| (p.i, p.j));
    Ok(pairs)
}

/// Unoptimized double loop over the raw records; the verification oracle
/// for [`mine_pairs`].
pub fn mine_pairs_naive(corpus: &Corpus, cfg: &MiningConfig) -> Result<Vec<CounterExamplePair>> {
    cfg.check()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let recs = corpus.records();
    let mut pairs = Vec::new();
    for i in 0..recs.len() {
        for j in i + 1..recs.len() {
            let (a, b) = (&recs[i], &recs[j]);
            if sim_exact(&a.gold_output, &b.gold_output) {
                continue;
            }
            let correct_i = sim_exact(&a.generated_output, &a.gold_output);
            let correct_j = sim_exact(&b.generated_output, &b.gold_output);
            if !(correct_i || correct_j) {
                continue;
            }
            let score = dot(corpus.normalized(i), corpus.normalized(j));
            if f64::from(score) > cfg.tau {
                pairs.push(CounterExamplePair {
                    i: i as u32,
                    j: j as u32,
                    score,
                    correct_i,
                    correct_j,
                    negative: None,
                });
            }
        }
    }
    Ok(pairs)
}

/// Sorted cosine similarities of `sample_pairs` uniformly drawn `i != j` pairs.
pub fn sample_similarities(corpus: &Corpus, sample_pairs: usize, seed: u64) -> Vec<f32> {
    let n = corpus.len();
    if n < 2 {
        return vec![1.0; usize::from(n == 1)];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sims: Vec<f32> = (0..sample_pairs.max(1))
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            dot(corpus.normalized(i), corpus.normalized(j))
        })
        .collect();
    sims.sort_by(f32::total_cmp);
    sims
}

/// Nearest-rank quantile of an ascending slice.
pub(crate) fn quantile_of_sorted(sorted: &[f32], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = (q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64).round() as usize;
    f64::from(sorted[idx])
}

/// Estimated `q`-quantile of the pairwise cosine distribution.
pub fn similarity_quantile(corpus: &Corpus, q: f64, sample_pairs: usize, seed: u64) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(quantile_of_sorted(&sample_similarities(corpus, sample_pairs, seed), q))
}

pub trait PairMiner: Send + Sync {
    fn name(&self) -> &'static str;
    fn mine(&self, corpus: &Corpus, cfg: &MiningConfig) -> Result<Vec<CounterExamplePair>>;
}

pub struct BlockedMiner;
pub struct NaiveMiner;

impl PairMiner for BlockedMiner {
    fn name(&self) -> &'static str {
        "blocked"
    }
    fn mine(&self, corpus: &Corpus, cfg: &MiningConfig) -> Result<Vec<CounterExamplePair>> {
        mine_pairs(corpus, cfg)
    }
}

impl PairMiner for NaiveMiner {
    fn name(&self) -> &'static str {
        "naive"
    }
    fn mine(&self, corpus: &Corpus, cfg: &MiningConfig) -> Result<Vec<CounterExamplePair>> {
        mine_pairs_naive(corpus, cfg)
    }
}

pub fn miners() -> Registry<fn() -> Box<dyn PairMiner>> {
    Registry::<fn() -> Box<dyn PairMiner>>::new("pair miner")
        .with("blocked", || Box::new(BlockedMiner))
        .with("naive", || Box::new(NaiveMiner))
}

pub fn write_pairs(path: &Path, pairs: &[CounterExamplePair]) -> Result<()> {
    let mut out = Vec::with_capacity(pairs.len() * 80);
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<CounterExamplePair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::parse(format!("{} line {}", path.display(), n + 1), e)))
        .collect()
}
