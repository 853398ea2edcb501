//! Informative-pair selection and count calibration.
//!
//! The influential filter keeps pairs whose incorrect side assigns the gold
//! answer a probability below `tau_p`; that side becomes the pair's negative
//! (counterfactual) example. The typical filter keeps pairs whose two
//! generations agree.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::pairminer::{self, sim_exact, CounterExamplePair, RecordFacts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub lo: usize,
    pub hi: usize,
}

impl CountRange {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, n: usize) -> bool {
        (self.lo..=self.hi).contains(&n)
    }

    fn distance(&self, n: usize) -> usize {
        if n < self.lo {
            self.lo - n
        } else {
            n.saturating_sub(self.hi)
        }
    }

    fn mid(&self) -> usize {
        (self.lo + self.hi) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Upper bound for the gold-probability threshold search.
    pub tau_p: f64,
    pub target_pairs: CountRange,
    pub target_negatives: CountRange,
    pub quantile_samples: usize,
    pub seed: u64,
    pub block_size: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau_p: 1.0,
            target_pairs: CountRange::new(10_000, 30_000),
            target_negatives: CountRange::new(30, 70),
            quantile_samples: 200_000,
            seed: 0,
            block_size: 128,
        }
    }
}

impl SelectionConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_p) {
            return Err(Error::InvalidConfig(format!("tau_p {} outside [0, 1]", self.tau_p)));
        }
        for (name, r) in [("target_pairs", self.target_pairs), ("target_negatives", self.target_negatives)] {
            if r.lo > r.hi {
                return Err(Error::InvalidConfig(format!("{name}: lo {} > hi {}", r.lo, r.hi)));
            }
        }
        if self.block_size == 0 || self.quantile_samples == 0 {
            return Err(Error::InvalidConfig("block_size and quantile_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub tau_used: f64,
    pub tau_p_used: f64,
    pub feasible: bool,
    pub pair_count: usize,
    pub negative_count: usize,
    pub target_pairs: CountRange,
    pub target_negatives: CountRange,
    pub negatives: BTreeSet<u32>,
    pub pairs: Vec<CounterExamplePair>,
}

impl SelectionResult {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

/// The single incorrect side of a pair, if exactly one side is incorrect.
fn incorrect_side(corpus: &Corpus, p: &CounterExamplePair) -> Option<u32> {
    let recs = corpus.records();
    let ok = |id: u32| {
        let r = &recs[id as usize];
        sim_exact(&r.generated_output, &r.gold_output)
    };
    match (ok(p.i), ok(p.j)) {
        (true, false) => Some(p.j),
        (false, true) => Some(p.i),
        _ => None,
    }
}

pub fn apply_influential(pairs: &[CounterExamplePair], corpus: &Corpus, tau_p: f64) -> Vec<CounterExamplePair> {
    pairs
        .iter()
        .filter_map(|p| {
            let neg = incorrect_side(corpus, p)?;
            (corpus.records()[neg as usize].gold_prob < tau_p).then(|| CounterExamplePair {
                negative: Some(neg),
                ..p.clone()
            })
        })
        .collect()
}

pub fn apply_typical(pairs: &[CounterExamplePair], corpus: &Corpus) -> Vec<CounterExamplePair> {
    let recs = corpus.records();
    pairs
        .iter()
        .filter(|p| sim_exact(&recs[p.i as usize].generated_output, &recs[p.j as usize].generated_output))
        .cloned()
        .collect()
}

pub fn collect_negatives(pairs: &[CounterExamplePair]) -> Result<BTreeSet<u32>> {
    pairs
        .iter()
        .map(|p| p.negative.ok_or(Error::MissingNegative { i: p.i, j: p.j }))
        .collect()
}

/// A pair passing every criterion except the two thresholds.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    i: u32,
    j: u32,
    negative: u32,
    score: f32,
}

struct Calibrator<'a> {
    candidates: Vec<Candidate>,
    /// Per negative id: (gold_prob, best score among its candidates).
    negatives: Vec<(u32, f64, f32)>,
    gold_prob: &'a dyn Fn(u32) -> f64,
    cfg: &'a SelectionConfig,
}

impl Calibrator<'_> {
    /// The gold-probability threshold that puts the negative count for `tau`
    /// closest to the middle of the target range.
    fn tau_p_for(&self, tau: f64) -> f64 {
        let mut probs: Vec<f64> = self
            .negatives
            .iter()
            .filter(|(_, _, best)| f64::from(*best) > tau)
            .map(|&(_, gp, _)| gp)
            .collect();
        probs.sort_by(f64::total_cmp);
        let target = self.cfg.target_negatives;
        // thresholds are the distinct observed probabilities plus the ceiling;
        // `count` negatives have gold_prob strictly below each one
        let mut best = (target.distance(probs.len()), probs.len().abs_diff(target.mid()), self.cfg.tau_p);
        let mut k = 0;
        while k < probs.len() {
            let t = probs[k];
            let key = (target.distance(k), k.abs_diff(target.mid()), t);
            if (key.0, key.1) < (best.0, best.1) {
                best = key;
            }
            while k < probs.len() && probs[k] == t {
                k += 1;
            }
        }
        best.2
    }

    fn count(&self, tau: f64, tau_p: f64) -> (usize, usize) {
        let mut negs = BTreeSet::new();
        let mut pairs = 0;
        for c in &self.candidates {
            if f64::from(c.score) > tau && (self.gold_prob)(c.negative) < tau_p {
                pairs += 1;
                negs.insert(c.negative);
            }
        }
        (pairs, negs.len())
    }

    fn pairs_at(&self, tau: f64) -> usize {
        self.count(tau, self.tau_p_for(tau)).0
    }
}

/// Picks `tau` on the sampled similarity-quantile scale, then `tau_p`, so the
/// selected pair and negative counts land in their target ranges.
///
/// `tau` is the largest threshold whose pair count (with `tau_p` re-fitted to
/// the negative target at that `tau`) still reaches the pair floor, so the
/// selection keeps the most similar pairs. When no threshold reaches the
/// floor, `tau` is -1 and the largest achievable count is reported.
pub fn calibrate(corpus: &Corpus, cfg: &SelectionConfig) -> Result<SelectionResult> {
    cfg.check()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let facts = RecordFacts::new(corpus);
    let recs = corpus.records();
    let negative_of = |i: usize, j: usize| if facts.correct[i] { j } else { i };
    let candidates = pairminer::scan_blocked(
        corpus,
        f64::NEG_INFINITY,
        cfg.block_size,
        |i, j| {
            facts.counter_candidate(i, j)
                && facts.correct[i] != facts.correct[j]
                && facts.generated[i] == facts.generated[j]
                && recs[negative_of(i, j)].gold_prob < cfg.tau_p
        },
        |i, j, score| Candidate {
            i: i as u32,
            j: j as u32,
            negative: negative_of(i, j) as u32,
            score,
        },
    );
    let mut best: HashMap<u32, f32> = HashMap::new();
    for c in &candidates {
        let e = best.entry(c.negative).or_insert(f32::NEG_INFINITY);
        *e = e.max(c.score);
    }
    let mut negatives: Vec<(u32, f64, f32)> =
        best.into_iter().map(|(id, s)| (id, recs[id as usize].gold_prob, s)).collect();
    negatives.sort_by_key(|n| n.0);
    let gold_prob = |id: u32| recs[id as usize].gold_prob;
    let cal = Calibrator {
        candidates,
        negatives,
        gold_prob: &gold_prob,
        cfg,
    };

    let sims = pairminer::sample_similarities(corpus, cfg.quantile_samples, cfg.seed);
    let tau_at = |q: f64| {
        if q <= 0.0 {
            -1.0
        } else if q >= 1.0 {
            1.0
        } else {
            pairminer::quantile_of_sorted(&sims, q)
        }
    };
    let target = cfg.target_pairs;
    let tau = if cal.pairs_at(-1.0) < target.lo {
        // even the loosest threshold falls short: report the largest count
        -1.0
    } else {
        // largest tau whose count still reaches the floor; `q_ok` keeps
        // count >= lo, `q_low` does not
        let (mut q_ok, mut q_low) = (0.0, 1.0);
        for _ in 0..30 {
            let mid = 0.5 * (q_ok + q_low);
            if cal.pairs_at(tau_at(mid)) >= target.lo {
                q_ok = mid;
            } else {
                q_low = mid;
            }
        }
        // refine between neighbouring grid values directly in tau
        let (mut t_ok, mut t_low) = (tau_at(q_ok), tau_at(q_low));
        for _ in 0..30 {
            if t_low - t_ok <= f64::EPSILON {
                break;
            }
            let mid = 0.5 * (t_ok + t_low);
            if cal.pairs_at(mid) >= target.lo {
                t_ok = mid;
            } else {
                t_low = mid;
            }
        }
        // a jump in the count can overshoot the ceiling; keep whichever side
        // lands closer to the range
        if target.distance(cal.pairs_at(t_low)) < target.distance(cal.pairs_at(t_ok)) {
            t_low
        } else {
            t_ok
        }
    };
    let tau_p = cal.tau_p_for(tau);
    let (pair_count, negative_count) = cal.count(tau, tau_p);
    log::debug!("calibrated tau={tau} tau_p={tau_p}: {pair_count} pairs, {negative_count} negatives");

    let mut pairs: Vec<CounterExamplePair> = cal
        .candidates
        .iter()
        .filter(|c| f64::from(c.score) > tau && gold_prob(c.negative) < tau_p)
        .map(|c| CounterExamplePair {
            i: c.i,
            j: c.j,
            score: c.score,
            correct_i: facts.correct[c.i as usize],
            correct_j: facts.correct[c.j as usize],
            negative: Some(c.negative),
        })
        .collect();
    pairs.sort_unstable_by_key(|p| (p.i, p.j));
    let negatives = collect_negatives(&pairs)?;
    Ok(SelectionResult {
        tau_used: tau,
        tau_p_used: tau_p,
        feasible: cfg.target_pairs.contains(pair_count) && cfg.target_negatives.contains(negative_count),
        pair_count,
        negative_count,
        target_pairs: cfg.target_pairs,
        target_negatives: cfg.target_negatives,
        negatives,
        pairs,
    })
}

/// Applies both filters at fixed thresholds to already-mined pairs.
pub fn select_at(
    mined: &[CounterExamplePair],
    corpus: &Corpus,
    tau: f64,
    tau_p: f64,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    let pairs = apply_typical(&apply_influential(mined, corpus, tau_p), corpus);
    let negatives = collect_negatives(&pairs)?;
    Ok(SelectionResult {
        tau_used: tau,
        tau_p_used: tau_p,
        feasible: cfg.target_pairs.contains(pairs.len()) && cfg.target_negatives.contains(negatives.len()),
        pair_count: pairs.len(),
        negative_count: negatives.len(),
        target_pairs: cfg.target_pairs,
        target_negatives: cfg.target_negatives,
        negatives,
        pairs,
    })
}
