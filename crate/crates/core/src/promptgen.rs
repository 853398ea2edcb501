//! Debiasing prompts built from induced patterns and negative examples.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::induce::{BiasPattern, PatternReport};
use crate::registry::Registry;

pub const MAX_PATTERNS: usize = 2;
pub const CLOSING_INSTRUCTION: &str = "Note that you should not utilize biased information to make generations.";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasPrompt {
    pub kind: PromptKind,
    pub text: String,
    pub patterns_used: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub example_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternChoice {
    pub cluster: usize,
    pub cluster_size: usize,
    pub patterns: Vec<BiasPattern>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// The top two patterns of the largest cluster; equal sizes go to the lower
/// cluster id. Clusters without patterns are passed over.
pub fn select_patterns(report: &PatternReport) -> Result<PatternChoice> {
    if report.clusters.is_empty() {
        return Err(Error::Insufficient("no clusters to take patterns from".into()));
    }
    let mut order: Vec<_> = report.clusters.iter().collect();
    order.sort_by(|a, b| b.size.cmp(&a.size).then(a.cluster.cmp(&b.cluster)));
    let mut warnings = Vec::new();
    for c in order {
        if c.patterns.is_empty() {
            let w = format!("cluster {} (size {}) has no patterns, trying the next largest", c.cluster, c.size);
            log::warn!("{w}");
            warnings.push(w);
            continue;
        }
        let mut patterns = c.patterns.clone();
        patterns.sort_by_key(|p| p.rank);
        patterns.truncate(MAX_PATTERNS);
        if patterns.len() < MAX_PATTERNS {
            let w = format!("cluster {} has a single pattern", c.cluster);
            log::warn!("{w}");
            warnings.push(w);
        }
        return Ok(PatternChoice {
            cluster: c.cluster,
            cluster_size: c.size,
            patterns,
            warnings,
        });
    }
    Err(Error::Insufficient("no cluster has any induced pattern".into()))
}

/// Renders the debiasing sentences appended to a zero-shot prompt.
pub trait ZeroShotTemplate: Send + Sync {
    fn name(&self) -> &'static str;
    fn suffix(&self, patterns: &[String], task_goal: &str) -> String;
}

/// "<pattern> is not related to <goal>." once per pattern.
pub struct NotRelated;

/// Group-fairness wording for question answering over social groups.
pub struct TreatEqually;

impl ZeroShotTemplate for NotRelated {
    fn name(&self) -> &'static str {
        "not-related"
    }

    fn suffix(&self, patterns: &[String], task_goal: &str) -> String {
        patterns.iter().map(|p| format!(" {p} is not related to {task_goal}.")).collect()
    }
}

impl ZeroShotTemplate for TreatEqually {
    fn name(&self) -> &'static str {
        "treat-equally"
    }

    fn suffix(&self, patterns: &[String], _task_goal: &str) -> String {
        let tail = "When we do not have sufficient information, we should choose the unknown option, rather than making assumptions based on our stereotypes";
        match patterns {
            [p] => format!(" We should treat people from different {p} equally. {tail}."),
            [p, q, ..] => format!(" We should treat people from different {p} and {q} equally. {tail} or {q}."),
            [] => String::new(),
        }
    }
}

pub fn zero_shot_templates() -> Registry<fn() -> Box<dyn ZeroShotTemplate>> {
    Registry::<fn() -> Box<dyn ZeroShotTemplate>>::new("zero-shot template")
        .with("not-related", || Box::new(NotRelated))
        .with("treat-equally", || Box::new(TreatEqually))
}

pub fn zero_shot_prompt(base_prompt: &str, patterns: &[String], task_goal: &str, template: &dyn ZeroShotTemplate) -> Result<DebiasPrompt> {
    if patterns.len() > MAX_PATTERNS {
        return Err(Error::TooManyPatterns(patterns.len()));
    }
    if patterns.is_empty() {
        return Err(Error::InvalidConfig("a zero-shot prompt needs at least one pattern".into()));
    }
    if task_goal.trim().is_empty() {
        return Err(Error::InvalidConfig("task goal is empty".into()));
    }
    Ok(DebiasPrompt {
        kind: PromptKind::ZeroShot,
        text: format!("{base_prompt}{}", template.suffix(patterns, task_goal)),
        patterns_used: patterns.to_vec(),
        example_ids: Vec::new(),
        seed: None,
        template: Some(template.name().to_string()),
    })
}

/// Picks `n` distinct negatives whose gold answers cycle through the answer
/// set, starting at answer `seed % |answers|`. Within each answer the
/// examples are drawn in a seeded random order. An exhausted answer is
/// skipped and the cycle continues with the next one.
pub fn balanced_sample(corpus: &Corpus, negatives: &[u32], n: usize, seed: u64) -> Result<Vec<u32>> {
    if n == 0 {
        return Err(Error::InvalidConfig("few-shot prompts need at least one example".into()));
    }
    let mut distinct = negatives.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < n {
        return Err(Error::Insufficient(format!("{} negatives for {n} few-shot examples", distinct.len())));
    }
    let mut buckets: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for &id in &distinct {
        buckets.entry(corpus.record(id as usize)?.gold_output.trim()).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: Vec<Vec<u32>> = buckets
        .into_values()
        .map(|mut ids| {
            ids.shuffle(&mut rng);
            ids.reverse();
            ids
        })
        .collect();
    let m = queues.len();
    let mut slot = (seed % m as u64) as usize;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if let Some(id) = queues[slot].pop() {
            out.push(id);
        }
        slot = (slot + 1) % m;
    }
    Ok(out)
}

pub fn render_example(corpus: &Corpus, id: u32) -> Result<String> {
    let r = corpus.record(id as usize)?;
    Ok(format!("{}\nAnswer: {}", r.input_text, r.gold_output))
}

/// Examples first, then the closing instruction, then the base prompt that
/// carries the query.
pub fn few_shot_prompt(corpus: &Corpus, negatives: &[u32], n_examples: usize, seed: u64, base_prompt: &str) -> Result<DebiasPrompt> {
    let ids = balanced_sample(corpus, negatives, n_examples, seed)?;
    let examples = ids.iter().map(|&id| render_example(corpus, id)).collect::<Result<Vec<_>>>()?;
    Ok(DebiasPrompt {
        kind: PromptKind::FewShot,
        text: format!("{}\n\n{CLOSING_INSTRUCTION}\n\n{base_prompt}", examples.join("\n\n")),
        patterns_used: Vec::new(),
        example_ids: ids,
        seed: Some(seed),
        template: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    #[serde(flatten)]
    pub prompt: DebiasPrompt,
}

/// Writes each prompt as a text file plus a manifest describing them all.
pub fn write_prompts(dir: &Path, prompts: &[DebiasPrompt]) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for p in prompts {
        let file = match (p.kind, p.seed) {
            (PromptKind::ZeroShot, _) => "zero_shot.txt".to_string(),
            (PromptKind::FewShot, Some(s)) => format!("few_shot_seed{s}.txt"),
            (PromptKind::FewShot, None) => "few_shot.txt".to_string(),
        };
        let path = dir.join(&file);
        fs::write(&path, &p.text).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry { file, prompt: p.clone() });
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&entries)?).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse("prompt manifest", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{record, InstanceRecord};
    use crate::induce::ClusterPatterns;
    use proptest::prelude::*;

    fn pattern(text: &str, cluster: usize, rank: usize) -> BiasPattern {
        BiasPattern { text: text.into(), cluster, rank, source_batches: 1 }
    }

    fn cluster(id: usize, size: usize, texts: &[&str]) -> ClusterPatterns {
        ClusterPatterns {
            cluster: id,
            size,
            pairs_used: size,
            batches: 1,
            candidates: Vec::new(),
            patterns: texts.iter().enumerate().map(|(k, t)| pattern(t, id, k + 1)).collect(),
            warnings: Vec::new(),
        }
    }

    fn report(clusters: Vec<ClusterPatterns>) -> PatternReport {
        PatternReport { model: "m".into(), backend: "scripted".into(), clusters }
    }

    fn corpus_with_golds(golds: &[&str]) -> Corpus {
        let recs: Vec<InstanceRecord> = golds
            .iter()
            .enumerate()
            .map(|(i, g)| InstanceRecord { input_text: format!("premise {i}\nhypothesis {i}"), ..record(i, g, "x", 0.01) })
            .collect();
        let rows: Vec<Vec<f32>> = (0..golds.len()).map(|i| vec![1.0, i as f32]).collect();
        Corpus::from_rows(recs, &rows).unwrap()
    }

    fn golds_of(c: &Corpus, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| c.records()[i as usize].gold_output.clone()).collect()
    }

    #[test]
    fn largest_cluster_first_two() {
        let r = report(vec![cluster(0, 120, &["p0", "p1", "p2"]), cluster(1, 80, &["q0", "q1", "q2"])]);
        let c = select_patterns(&r).unwrap();
        assert_eq!(c.cluster, 0);
        assert_eq!(c.patterns.iter().map(|p| p.text.as_str()).collect::<Vec<_>>(), vec!["p0", "p1"]);
        assert!(c.warnings.is_empty());

        let r = report(vec![cluster(0, 40, &["p0", "p1"]), cluster(1, 90, &["q0", "q1", "q2"])]);
        assert_eq!(select_patterns(&r).unwrap().cluster, 1);
    }

    #[test]
    fn equal_sizes_prefer_lower_id() {
        let r = report(vec![cluster(1, 50, &["q0", "q1"]), cluster(0, 50, &["p0", "p1"])]);
        assert_eq!(select_patterns(&r).unwrap().cluster, 0);
    }

    #[test]
    fn single_pattern_warns() {
        let c = select_patterns(&report(vec![cluster(0, 10, &["only"]), cluster(1, 5, &["a", "b"])])).unwrap();
        assert_eq!((c.cluster, c.patterns.len(), c.warnings.len()), (0, 1, 1));
    }

    #[test]
    fn selection_errors() {
        assert!(matches!(select_patterns(&report(vec![])), Err(Error::Insufficient(_))));
        assert!(matches!(select_patterns(&report(vec![cluster(0, 10, &[])])), Err(Error::Insufficient(_))));
        let c = select_patterns(&report(vec![cluster(0, 10, &[]), cluster(1, 4, &["a", "b"])])).unwrap();
        assert_eq!((c.cluster, c.warnings.len()), (1, 1));
    }

    #[test]
    fn zero_shot_wording() {
        let base = "Judge which response is better.";
        let p = zero_shot_prompt(base, &["The position of a response".into()], "which response is better", &NotRelated).unwrap();
        assert_eq!(p.text, "Judge which response is better. The position of a response is not related to which response is better.");
        assert_eq!(p.kind, PromptKind::ZeroShot);

        let two = zero_shot_prompt(base, &["The position of a response".into(), "The length of a response".into()], "which response is better", &NotRelated).unwrap();
        assert_eq!(
            two.text,
            "Judge which response is better. The position of a response is not related to which response is better. The length of a response is not related to which response is better."
        );
        assert_eq!(two.patterns_used.len(), 2);
    }

    #[test]
    fn zero_shot_rejects() {
        let three: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(zero_shot_prompt("B.", &three, "goal", &NotRelated), Err(Error::TooManyPatterns(3))));
        assert!(zero_shot_prompt("B.", &[], "goal", &NotRelated).is_err());
        assert!(zero_shot_prompt("B.", &["a".into()], "  ", &NotRelated).is_err());
    }

    #[test]
    fn treat_equally_variant() {
        let t = zero_shot_templates().get("treat-equally").unwrap()();
        let p = zero_shot_prompt("Answer the question.", &["genders".into(), "ages".into()], "g", t.as_ref()).unwrap();
        assert_eq!(
            p.text,
            "Answer the question. We should treat people from different genders and ages equally. When we do not have sufficient information, we should choose the unknown option, rather than making assumptions based on our stereotypes or ages."
        );
        assert_eq!(p.template.as_deref(), Some("treat-equally"));
        assert_eq!(zero_shot_templates().names(), vec!["not-related", "treat-equally"]);
    }

    #[test]
    fn cyclic_gold_order() {
        let c = corpus_with_golds(&["A", "B", "C", "A", "B"]);
        let negs = [0, 1, 2, 3, 4];
        let expected = [["A", "B", "C"], ["B", "C", "A"], ["C", "A", "B"]];
        for seed in 0..9u64 {
            let ids = balanced_sample(&c, &negs, 3, seed).unwrap();
            assert_eq!(golds_of(&c, &ids), expected[(seed % 3) as usize], "seed {seed}");
        }
        let five = balanced_sample(&c, &negs, 5, 0).unwrap();
        assert_eq!(golds_of(&c, &five), vec!["A", "B", "C", "A", "B"]);
    }

    #[test]
    fn exhausted_answer_is_skipped() {
        let c = corpus_with_golds(&["A", "A", "A", "B"]);
        let ids = balanced_sample(&c, &[0, 1, 2, 3], 4, 0).unwrap();
        assert_eq!(golds_of(&c, &ids), vec!["A", "B", "A", "A"]);
    }

    #[test]
    fn few_shot_layout() {
        let c = corpus_with_golds(&["yes", "no", "yes", "no"]);
        let p = few_shot_prompt(&c, &[0, 1, 2, 3], 2, 4, "Query: premise Q\nAnswer:").unwrap();
        assert_eq!(p.example_ids.len(), 2);
        let first = render_example(&c, p.example_ids[0]).unwrap();
        let second = render_example(&c, p.example_ids[1]).unwrap();
        assert_eq!(p.text, format!("{first}\n\n{second}\n\n{CLOSING_INSTRUCTION}\n\nQuery: premise Q\nAnswer:"));
        assert_eq!(p.seed, Some(4));
        assert_eq!(few_shot_prompt(&c, &[0, 1, 2, 3], 2, 4, "Query: premise Q\nAnswer:").unwrap(), p);
    }

    #[test]
    fn few_shot_errors() {
        let c = corpus_with_golds(&["yes", "no"]);
        assert!(matches!(few_shot_prompt(&c, &[0, 1], 0, 0, "q"), Err(Error::InvalidConfig(_))));
        assert!(matches!(few_shot_prompt(&c, &[0, 1, 1], 3, 0, "q"), Err(Error::Insufficient(_))));
        assert!(matches!(few_shot_prompt(&c, &[7], 1, 0, "q"), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn prompt_files() {
        let c = corpus_with_golds(&["yes", "no", "yes"]);
        let z = zero_shot_prompt("Base.", &["p".into()], "g", &NotRelated).unwrap();
        let f = few_shot_prompt(&c, &[0, 1, 2], 2, 3, "Base.").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let entries = write_prompts(dir.path(), &[z.clone(), f.clone()]).unwrap();
        assert_eq!(entries[1].file, "few_shot_seed3.txt");
        assert_eq!(fs::read_to_string(dir.path().join("zero_shot.txt")).unwrap(), z.text);
        assert_eq!(read_manifest(dir.path()).unwrap(), entries);
    }

    proptest! {
        #[test]
        fn few_shot_invariants(golds in proptest::collection::vec(0u8..4, 1..40), n in 1usize..12, seed in any::<u64>()) {
            let names: Vec<String> = golds.iter().map(|g| format!("ans{g}")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let c = corpus_with_golds(&refs);
            let negs: Vec<u32> = (0..golds.len() as u32).collect();
            let n = n.min(golds.len());
            let p = few_shot_prompt(&c, &negs, n, seed, "Q").unwrap();
            let mut ids = p.example_ids.clone();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
            for &id in &p.example_ids {
                let r = &c.records()[id as usize];
                let block = format!("{}\nAnswer: {}", r.input_text, r.gold_output);
                prop_assert!(p.text.contains(&block));
            }
            let tail = format!("{CLOSING_INSTRUCTION}\n\nQ");
            prop_assert!(p.text.ends_with(&tail));
            // every answer has at least one example, so the first lap is the full rotation
            let mut answers: Vec<String> = names.clone();
            answers.sort();
            answers.dedup();
            let m = answers.len();
            let seq = golds_of(&c, &p.example_ids);
            for (k, g) in seq.iter().take(m).enumerate() {
                prop_assert_eq!(g, &answers[((seed % m as u64) as usize + k) % m]);
            }
        }

        #[test]
        fn zero_shot_keeps_base_prefix(base in ".{0,40}", p in "[a-z ]{1,20}", goal in "[a-z]{1,20}") {
            let z = zero_shot_prompt(&base, &[p.clone()], &goal, &NotRelated).unwrap();
            prop_assert!(z.text.starts_with(&base));
            prop_assert_eq!(&z.text[base.len()..], format!(" {p} is not related to {goal}."));
        }
    }

    #[test]
    fn rotations_uniform_over_ten_seeds() {
        let c = corpus_with_golds(&["A", "B", "C", "A", "B", "C", "A", "B", "C"]);
        let negs: Vec<u32> = (0..9).collect();
        let mut firsts: BTreeMap<String, usize> = BTreeMap::new();
        for seed in 0..10 {
            let ids = balanced_sample(&c, &negs, 3, seed).unwrap();
            *firsts.entry(golds_of(&c, &ids)[0].clone()).or_default() += 1;
        }
        let counts: Vec<usize> = firsts.values().copied().collect();
        assert_eq!(counts.len(), 3);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "{firsts:?}");

        let c2 = corpus_with_golds(&["yes", "no", "yes", "no"]);
        let starts: Vec<String> = (0..10).map(|s| golds_of(&c2, &balanced_sample(&c2, &[0, 1, 2, 3], 2, s).unwrap())[0].clone()).collect();
        assert_eq!(starts.iter().filter(|g| *g == "no").count(), 5);
    }
}
