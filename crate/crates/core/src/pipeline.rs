//! Resumable stage orchestration over a run directory.
//!
//! Every stage reads its inputs from and writes its artifacts to the run
//! directory, so any stage can be re-run on its own. `run_manifest.json`
//! records which stages completed under which configuration; a resumed run
//! reuses a stage when its configuration chain is unchanged and its outputs
//! are still present.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::biasrep::{self, RatioSummary};
use crate::corpus::{load_corpus, Corpus};
use crate::error::{Error, Result};
use crate::geometry::{reduce_and_cluster, solvers, ClusterAssignment, ClusterConfig};
use crate::induce::{backends, write_log, write_replay, ChatBackend, Inducer, InductionConfig, PatternReport, RecordingBackend};
use crate::pairminer::{miners, read_pairs, write_pairs, MiningConfig};
use crate::promptgen::{self, few_shot_prompt, select_patterns, zero_shot_prompt, zero_shot_templates};
use crate::report::{self, Counts, Summary, Thresholds};
use crate::selector::{calibrate, select_at, CountRange, SelectionConfig, SelectionResult};

pub const LOCK_FILE: &str = ".lock";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const MINING_FILE: &str = "mining.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const VECTORS_FILE: &str = "bias_vectors.cale";
pub const VECTORS_SIDECAR: &str = "bias_vectors.jsonl";
pub const BIASREP_FILE: &str = "biasrep.json";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const PATTERNS_FILE: &str = "patterns.json";
pub const INDUCTION_LOG: &str = "induction_log.jsonl";
/// Live exchanges, written in the format replay mode reads.
pub const REPLAY_FILE: &str = "replay.jsonl";
pub const PROMPTS_DIR: &str = "prompts";
pub const REPORT_SVG: &str = "report.svg";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mine,
    Select,
    Extract,
    Cluster,
    Induce,
    Prompt,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [Stage::Mine, Stage::Select, Stage::Extract, Stage::Cluster, Stage::Induce, Stage::Prompt, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mine => "mine",
            Stage::Select => "select",
            Stage::Extract => "extract",
            Stage::Cluster => "cluster",
            Stage::Induce => "induce",
            Stage::Prompt => "prompt",
            Stage::Report => "report",
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Mine => &[PAIRS_FILE, MINING_FILE],
            Stage::Select => &[SELECTION_FILE],
            Stage::Extract => &[VECTORS_FILE, VECTORS_SIDECAR, BIASREP_FILE],
            Stage::Cluster => &[CLUSTERS_FILE],
            Stage::Induce => &[PATTERNS_FILE, INDUCTION_LOG],
            Stage::Prompt => &["prompts/manifest.json"],
            Stage::Report => &[REPORT_SVG, SUMMARY_FILE],
        }
    }

    fn needs_corpus(self) -> bool {
        !matches!(self, Stage::Cluster | Stage::Report)
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub base_prompt: String,
    /// Falls back to the corpus manifest's task goal.
    pub task_goal: Option<String>,
    pub template: String,
    pub n_examples: usize,
    pub seeds: Vec<u64>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            base_prompt: "Answer the following question.".into(),
            task_goal: None,
            template: "not-related".into(),
            n_examples: 3,
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    #[serde(skip)]
    pub run_dir: PathBuf,
    pub stages: Vec<Stage>,
    /// Reuse completed stages whose configuration is unchanged.
    #[serde(skip)]
    pub resume: bool,
    /// Fixed similarity threshold; calibrated against the count targets when absent.
    pub tau: Option<f64>,
    /// Fixed gold-probability threshold; only valid together with `tau`.
    pub tau_p: Option<f64>,
    pub miner: String,
    pub selection: SelectionConfig,
    pub allow_infeasible: bool,
    pub mu: Option<f64>,
    pub target_ratio: f64,
    pub cluster: ClusterConfig,
    pub induction: InductionConfig,
    pub prompt: PromptConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            run_dir: PathBuf::from("run"),
            stages: Stage::ALL.to_vec(),
            resume: true,
            tau: None,
            tau_p: None,
            miner: "blocked".into(),
            selection: SelectionConfig::default(),
            allow_infeasible: false,
            mu: None,
            target_ratio: biasrep::DEFAULT_TARGET_RATIO,
            cluster: ClusterConfig::default(),
            induction: InductionConfig::default(),
            prompt: PromptConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::InvalidConfig(format!("{key} = '{v}': {e}")))
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match v {
        "" | "auto" | "none" => Ok(None),
        _ => parse_num(key, v).map(Some),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key} = '{v}': expected true or false"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_num(key, s)).collect()
}

/// `key = value` lines; blank lines and lines starting with `#` are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("config line {}: expected key = value, got '{line}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "manifest",
        "run_dir",
        "stages",
        "tau",
        "tau_p",
        "tau_p_max",
        "miner",
        "block_size",
        "pairs_min",
        "pairs_max",
        "negatives_min",
        "negatives_max",
        "quantile_samples",
        "seed",
        "allow_infeasible",
        "mu",
        "target_ratio",
        "eps",
        "min_pts",
        "min_cluster_frac",
        "pca_solver",
        "endpoint",
        "model",
        "batch_size",
        "cap",
        "patterns",
        "timeout",
        "max_retries",
        "backoff_ms",
        "concurrency",
        "mode",
        "replay",
        "token_budget",
        "stage1_template",
        "stage2_template",
        "base_prompt",
        "task_goal",
        "zero_shot_template",
        "few_shot_examples",
        "few_shot_seeds",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let sel = &mut self.selection;
        let ind = &mut self.induction;
        match key.trim() {
            "manifest" => self.manifest = Some(v.into()),
            "run_dir" => self.run_dir = v.into(),
            "stages" => self.stages = parse_list(key, v)?,
            "tau" => self.tau = parse_opt(key, v)?,
            "tau_p" => self.tau_p = parse_opt(key, v)?,
            "tau_p_max" => sel.tau_p = parse_num(key, v)?,
            "miner" => self.miner = v.into(),
            "block_size" => sel.block_size = parse_num(key, v)?,
            "pairs_min" => sel.target_pairs = CountRange::new(parse_num(key, v)?, sel.target_pairs.hi),
            "pairs_max" => sel.target_pairs = CountRange::new(sel.target_pairs.lo, parse_num(key, v)?),
            "negatives_min" => sel.target_negatives = CountRange::new(parse_num(key, v)?, sel.target_negatives.hi),
            "negatives_max" => sel.target_negatives = CountRange::new(sel.target_negatives.lo, parse_num(key, v)?),
            "quantile_samples" => sel.quantile_samples = parse_num(key, v)?,
            "seed" => sel.seed = parse_num(key, v)?,
            "allow_infeasible" => self.allow_infeasible = parse_bool(key, v)?,
            "mu" => self.mu = parse_opt(key, v)?,
            "target_ratio" => self.target_ratio = parse_num(key, v)?,
            "eps" => self.cluster.eps = parse_opt(key, v)?,
            "min_pts" => self.cluster.min_pts = parse_num(key, v)?,
            "min_cluster_frac" => self.cluster.min_cluster_frac = parse_num(key, v)?,
            "pca_solver" => self.cluster.solver = v.into(),
            "endpoint" => ind.endpoint = v.into(),
            "model" => ind.model = v.into(),
            "batch_size" => ind.batch_size = parse_num(key, v)?,
            "cap" => ind.cap = parse_num(key, v)?,
            "patterns" => ind.patterns = parse_num(key, v)?,
            "timeout" => ind.timeout_secs = parse_num(key, v)?,
            "max_retries" => ind.max_retries = parse_num(key, v)?,
            "backoff_ms" => ind.backoff_ms = parse_num(key, v)?,
            "concurrency" => ind.concurrency = parse_num(key, v)?,
            "mode" => ind.mode = v.into(),
            "replay" => ind.replay_path = Some(v.into()),
            "token_budget" => ind.token_budget = parse_num(key, v)?,
            "stage1_template" => ind.stage1_template = Some(v.into()),
            "stage2_template" => ind.stage2_template = Some(v.into()),
            "base_prompt" => self.prompt.base_prompt = v.into(),
            "task_goal" => self.prompt.task_goal = Some(v.into()),
            "zero_shot_template" => self.prompt.template = v.into(),
            "few_shot_examples" => self.prompt.n_examples = parse_num(key, v)?,
            "few_shot_seeds" => self.prompt.seeds = parse_list(key, v)?,
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key '{other}' (known: {})", Self::KEYS.join(", "))));
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_config_text(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("no stages selected".into()));
        }
        if let Some(t) = self.tau {
            MiningConfig { tau: t, block_size: self.selection.block_size }.check()?;
        }
        match (self.tau, self.tau_p) {
            (None, Some(_)) => return Err(Error::InvalidConfig("tau_p can only be fixed together with tau".into())),
            (_, Some(p)) if !(0.0..=1.0).contains(&p) => return Err(Error::InvalidConfig(format!("tau_p {p} outside [0, 1]"))),
            _ => {}
        }
        self.selection.check()?;
        miners().get(&self.miner)?;
        if let Some(mu) = self.mu {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(Error::InvalidConfig(format!("mu must be positive, got {mu}")));
            }
        }
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!("target_ratio {} outside (0, 1)", self.target_ratio)));
        }
        self.cluster.check()?;
        solvers().get(&self.cluster.solver)?;
        self.induction.check()?;
        backends().get(&self.induction.mode)?;
        zero_shot_templates().get(&self.prompt.template)?;
        if self.prompt.n_examples == 0 {
            return Err(Error::InvalidConfig("few_shot_examples must be at least 1".into()));
        }
        if self.prompt.seeds.is_empty() {
            return Err(Error::InvalidConfig("few_shot_seeds is empty".into()));
        }
        Ok(())
    }

    /// Configuration that determines a stage's output, used for reuse checks.
    fn stage_inputs(&self, stage: Stage) -> serde_json::Value {
        match stage {
            Stage::Mine => json!({
                "manifest": self.manifest, "tau": self.tau, "tau_p": self.tau_p,
                "miner": self.miner, "selection": self.selection,
            }),
            Stage::Select => json!({ "allow_infeasible": self.allow_infeasible }),
            Stage::Extract => json!({ "mu": self.mu, "target_ratio": self.target_ratio }),
            Stage::Cluster => json!(self.cluster),
            Stage::Induce => json!(self.induction),
            Stage::Prompt => json!(self.prompt),
            Stage::Report => json!(null),
        }
    }

    /// Each stage's digest covers its own inputs and every upstream digest.
    fn digests(&self) -> BTreeMap<Stage, String> {
        let mut prev = String::new();
        let mut out = BTreeMap::new();
        for s in Stage::ALL {
            let mut h = Sha256::new();
            h.update(prev.as_bytes());
            h.update(s.name().as_bytes());
            h.update(self.stage_inputs(s).to_string().as_bytes());
            prev = hex::encode(h.finalize());
            out.insert(s, prev.clone());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub records: usize,
    pub tau: f64,
    pub tau_p: f64,
    pub calibrated: bool,
    pub feasible: Option<bool>,
    pub calibrated_pairs: Option<usize>,
    pub calibrated_negatives: Option<usize>,
    pub mined_pairs: usize,
    pub miner: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub mu: Option<f64>,
    pub mu_calibrated: bool,
    pub target_ratio: f64,
    pub mean_ratio: Option<f64>,
    pub attained: Option<bool>,
    pub vectors: usize,
    pub dim: usize,
    pub ratios: Option<RatioSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub digest: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub completed: Vec<StageRecord>,
    pub summary: Summary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn read_optional<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Counts, thresholds and variance figures gathered from whatever artifacts
/// the run directory holds.
pub fn collect_summary(dir: &Path) -> Result<Summary> {
    let mining: Option<MiningReport> = read_optional(&dir.join(MINING_FILE))?;
    let selection: Option<SelectionResult> = read_optional(&dir.join(SELECTION_FILE))?;
    let extraction: Option<ExtractionReport> = read_optional(&dir.join(BIASREP_FILE))?;
    let clusters: Option<ClusterAssignment> = read_optional(&dir.join(CLUSTERS_FILE))?;
    let patterns: Option<PatternReport> = read_optional(&dir.join(PATTERNS_FILE))?;
    let prompts: Option<Vec<promptgen::ManifestEntry>> = read_optional(&dir.join(PROMPTS_DIR).join(promptgen::MANIFEST_FILE))?;
    let ratios = clusters.as_ref().map(|c| c.explained_variance_ratio.clone()).unwrap_or_default();
    Ok(Summary {
        counts: Counts {
            records: mining.as_ref().map_or(0, |m| m.records),
            mined_pairs: mining.as_ref().map_or(0, |m| m.mined_pairs),
            selected_pairs: selection.as_ref().map_or(0, |s| s.pair_count),
            negatives: selection.as_ref().map_or(0, |s| s.negative_count),
            bias_vectors: extraction.as_ref().map_or(0, |e| e.vectors),
            clusters: clusters.as_ref().map_or(0, |c| c.clusters.len()),
            noise: clusters.as_ref().map_or(0, |c| c.noise),
            patterns: patterns.as_ref().map_or(0, |p| p.clusters.iter().map(|c| c.patterns.len()).sum()),
            prompts: prompts.as_ref().map_or(0, Vec::len),
        },
        thresholds: Thresholds {
            tau: selection.as_ref().map(|s| s.tau_used).or(mining.as_ref().map(|m| m.tau)),
            tau_p: selection.as_ref().map(|s| s.tau_p_used).or(mining.as_ref().map(|m| m.tau_p)),
            mu: extraction.as_ref().and_then(|e| e.mu),
            eps: clusters.as_ref().map(|c| c.eps),
            min_pts: clusters.as_ref().map(|c| c.min_pts),
        },
        feasible: selection.as_ref().map(|s| s.feasible),
        mean_ratio: extraction.as_ref().and_then(|e| e.mean_ratio),
        explained_variance: clusters.as_ref().map(|c| c.explained_variance.clone()).unwrap_or_default(),
        top2_explained_variance_ratio: report::top2(&ratios),
        explained_variance_ratio: ratios,
        cluster_sizes: clusters.map(|c| c.clusters).unwrap_or_default(),
    })
}

/// Writes `report.svg` and `summary.json` from the artifacts in `dir`.
pub fn emit_report(dir: &Path) -> Result<Summary> {
    let assignment = ClusterAssignment::read(&dir.join(CLUSTERS_FILE))?;
    let svg_path = dir.join(REPORT_SVG);
    fs::write(&svg_path, report::render_svg(&assignment)).map_err(|e| Error::io(&svg_path, e))?;
    let summary = collect_summary(dir)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked { dir: dir.to_path_buf() }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub executed: Vec<Stage>,
    pub reused: Vec<Stage>,
    pub summary: Summary,
}

pub struct Pipeline<'a> {
    cfg: RunConfig,
    backend: Option<&'a dyn ChatBackend>,
    corpus: OnceLock<Corpus>,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: RunConfig) -> Self {
        Self {
            cfg,
            backend: None,
            corpus: OnceLock::new(),
        }
    }

    /// Uses `backend` for induction instead of the configured mode.
    pub fn with_backend(mut self, backend: &'a dyn ChatBackend) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn dir(&self) -> &Path {
        &self.cfg.run_dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.run_dir.join(name)
    }

    fn corpus(&self) -> Result<&Corpus> {
        if let Some(c) = self.corpus.get() {
            return Ok(c);
        }
        let manifest = self.cfg.manifest.as_deref().ok_or_else(|| Error::InvalidConfig("no corpus manifest given".into()))?;
        let corpus = load_corpus(manifest)?;
        Ok(self.corpus.get_or_init(|| corpus))
    }

    pub fn run(&self) -> Result<RunOutcome> {
        self.cfg.check()?;
        let mut stages = self.cfg.stages.clone();
        stages.sort();
        stages.dedup();
        if stages.iter().any(|s| s.needs_corpus()) {
            match &self.cfg.manifest {
                None => return Err(Error::InvalidConfig("no corpus manifest given".into())),
                Some(m) if !m.is_file() => return Err(Error::MissingFile(m.clone())),
                Some(_) => {}
            }
        }
        fs::create_dir_all(self.dir()).map_err(|e| Error::io(self.dir(), e))?;
        let _lock = RunLock::acquire(self.dir())?;

        let previous: Option<RunManifest> = read_optional(&self.path(RUN_MANIFEST)).unwrap_or_else(|e| {
            log::warn!("ignoring unreadable run manifest: {e}");
            None
        });
        let mut completed: BTreeMap<Stage, StageRecord> = previous.map(|m| m.completed.into_iter().map(|r| (r.stage, r)).collect()).unwrap_or_default();
        let digests = self.cfg.digests();
        let mut outcome = RunOutcome::default();
        let mut timing: BTreeMap<&'static str, f64> = BTreeMap::new();

        let mut result = Ok(());
        for stage in stages {
            let digest = &digests[&stage];
            let reusable = self.cfg.resume
                && completed.get(&stage).is_some_and(|r| &r.digest == digest)
                && stage.outputs().iter().all(|o| self.path(o).exists());
            if reusable {
                log::info!("stage {}: reusing existing outputs", stage.name());
                outcome.reused.push(stage);
                continue;
            }
            log::info!("stage {}: running", stage.name());
            let start = Instant::now();
            completed.remove(&stage);
            let r = self.execute(stage);
            timing.insert(stage.name(), start.elapsed().as_secs_f64());
            match r {
                Ok(()) => {
                    completed.insert(
                        stage,
                        StageRecord {
                            stage,
                            digest: digest.clone(),
                            outputs: stage.outputs().iter().map(|s| s.to_string()).collect(),
                        },
                    );
                    outcome.executed.push(stage);
                    self.write_manifest(&completed)?;
                }
                Err(e) => {
                    result = Err(Error::Stage { stage: stage.name(), source: Box::new(e) });
                    break;
                }
            }
        }
        outcome.summary = self.write_manifest(&completed)?;
        write_json(&self.path(TIMING_FILE), &json!({ "seconds": timing }))?;
        result.map(|()| outcome)
    }

    fn write_manifest(&self, completed: &BTreeMap<Stage, StageRecord>) -> Result<Summary> {
        let summary = collect_summary(self.dir())?;
        write_json(
            &self.path(RUN_MANIFEST),
            &RunManifest {
                tool: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: self.cfg.clone(),
                completed: completed.values().cloned().collect(),
                summary: summary.clone(),
            },
        )?;
        Ok(summary)
    }

    fn execute(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Mine => self.mine(),
            Stage::Select => self.select(),
            Stage::Extract => self.extract(),
            Stage::Cluster => self.cluster(),
            Stage::Induce => self.induce(),
            Stage::Prompt => self.prompt(),
            Stage::Report => emit_report(self.dir()).map(|_| ()),
        }
    }

    fn mine(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let cfg = &self.cfg;
        let (tau, tau_p, calibration) = match cfg.tau {
            Some(t) => (t, cfg.tau_p.unwrap_or(cfg.selection.tau_p), None),
            None => {
                let r = calibrate(corpus, &cfg.selection)?;
                log::info!(
                    "calibrated tau = {:.6}, tau_p = {:.6}: {} pairs, {} negatives (feasible: {})",
                    r.tau_used,
                    r.tau_p_used,
                    r.pair_count,
                    r.negative_count,
                    r.feasible
                );
                (r.tau_used, r.tau_p_used, Some(r))
            }
        };
        let miner = miners().get(&cfg.miner)?();
        let pairs = miner.mine(corpus, &MiningConfig { tau, block_size: cfg.selection.block_size })?;
        log::info!("mined {} counter-example pairs at tau = {tau:.6}", pairs.len());
        write_pairs(&self.path(PAIRS_FILE), &pairs)?;
        write_json(
            &self.path(MINING_FILE),
            &MiningReport {
                records: corpus.len(),
                tau,
                tau_p,
                calibrated: calibration.is_some(),
                feasible: calibration.as_ref().map(|r| r.feasible),
                calibrated_pairs: calibration.as_ref().map(|r| r.pair_count),
                calibrated_negatives: calibration.as_ref().map(|r| r.negative_count),
                mined_pairs: pairs.len(),
                miner: miner.name().into(),
            },
        )
    }

    fn select(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let mining: MiningReport = read_json(&self.path(MINING_FILE))?;
        let mined = read_pairs(&self.path(PAIRS_FILE))?;
        let sel = select_at(&mined, corpus, mining.tau, mining.tau_p, &self.cfg.selection)?;
        sel.write(&self.path(SELECTION_FILE))?;
        log::info!("selected {} pairs with {} negatives", sel.pair_count, sel.negative_count);
        if mining.calibrated && !sel.feasible {
            let msg = format!(
                "closest counts are {} pairs (target {}..={}) and {} negatives (target {}..={})",
                sel.pair_count, sel.target_pairs.lo, sel.target_pairs.hi, sel.negative_count, sel.target_negatives.lo, sel.target_negatives.hi
            );
            if !self.cfg.allow_infeasible {
                return Err(Error::Infeasible(msg));
            }
            log::warn!("count targets not met, continuing: {msg}");
        }
        Ok(())
    }

    fn extract(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let sel = SelectionResult::read(&self.path(SELECTION_FILE))?;
        let (mu, calibration) = match (self.cfg.mu, sel.pairs.is_empty()) {
            (Some(mu), _) => (Some(mu), None),
            (None, true) => (None, None),
            (None, false) => {
                let c = biasrep::calibrate_mu(&sel.pairs, corpus, self.cfg.target_ratio)?;
                log::info!("calibrated mu = {:.6} for mean ratio {:.4}", c.mu, c.mean_ratio);
                (Some(c.mu), Some(c))
            }
        };
        let vectors = match mu {
            Some(mu) if !sel.pairs.is_empty() => biasrep::batch_extract(&sel.pairs, corpus, mu)?,
            _ => Vec::new(),
        };
        biasrep::write_vectors(&self.path(VECTORS_FILE), &self.path(VECTORS_SIDECAR), &vectors, corpus.dim())?;
        let ratios = biasrep::ratio_summary(&vectors);
        write_json(
            &self.path(BIASREP_FILE),
            &ExtractionReport {
                mu,
                mu_calibrated: calibration.is_some(),
                target_ratio: self.cfg.target_ratio,
                mean_ratio: ratios.map(|r| r.mean),
                attained: calibration.map(|c| c.attained),
                vectors: vectors.len(),
                dim: corpus.dim(),
                ratios,
            },
        )
    }

    fn cluster(&self) -> Result<()> {
        let vectors = biasrep::read_vectors(&self.path(VECTORS_FILE), &self.path(VECTORS_SIDECAR))?;
        let assignment = match reduce_and_cluster(&vectors, &self.cfg.cluster) {
            Ok(a) => a,
            Err(e @ (Error::Insufficient(_) | Error::ZeroVariance)) => {
                log::warn!("{} bias vectors cannot be clustered ({e}); all marked as noise", vectors.len());
                ClusterAssignment::unclustered(&vectors, &self.cfg.cluster)
            }
            Err(e) => return Err(e),
        };
        log::info!("{} clusters, {} noise points (eps = {:.6})", assignment.clusters.len(), assignment.noise, assignment.eps);
        assignment.write(&self.path(CLUSTERS_FILE))
    }

    fn induce(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let assignment = ClusterAssignment::read(&self.path(CLUSTERS_FILE))?;
        let sel = SelectionResult::read(&self.path(SELECTION_FILE))?;
        let aligned = assignment.points.len() == sel.pairs.len() && assignment.points.iter().zip(&sel.pairs).all(|(p, q)| (p.i, p.j) == (q.i, q.j));
        if !aligned {
            return Err(Error::Validation(format!("{CLUSTERS_FILE} does not match {SELECTION_FILE}; rerun extract and cluster")));
        }
        let owned;
        let backend: &dyn ChatBackend = match self.backend {
            Some(b) => b,
            None => {
                owned = backends().get(&self.cfg.induction.mode)?(&self.cfg.induction)?;
                owned.as_ref()
            }
        };
        let recorder = RecordingBackend::new(backend);
        let live = self.cfg.induction.mode == "live";
        let inducer = Inducer::new(if live { &recorder as &dyn ChatBackend } else { backend }, &self.cfg.induction)?;
        let result = inducer.induce_all(&assignment, &sel.pairs, corpus);
        write_log(&self.path(INDUCTION_LOG), &inducer.log())?;
        if live {
            // kept even after a failure so finished requests need not be repeated
            write_replay(&self.path(REPLAY_FILE), &recorder.entries())?;
        }
        let report = result?;
        write_json(&self.path(PATTERNS_FILE), &report)
    }

    fn prompt(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let patterns = PatternReport::read(&self.path(PATTERNS_FILE))?;
        let sel = SelectionResult::read(&self.path(SELECTION_FILE))?;
        let pc = &self.cfg.prompt;
        let mut prompts = Vec::new();
        match select_patterns(&patterns) {
            Ok(choice) => {
                let goal = pc
                    .task_goal
                    .as_deref()
                    .or(corpus.task_goal())
                    .ok_or_else(|| Error::InvalidConfig("zero-shot prompts need a task goal: set task_goal or add one to the corpus manifest".into()))?;
                let template = zero_shot_templates().get(&pc.template)?();
                let texts: Vec<String> = choice.patterns.iter().map(|p| p.text.clone()).collect();
                prompts.push(zero_shot_prompt(&pc.base_prompt, &texts, goal, template.as_ref())?);
            }
            Err(Error::Insufficient(m)) => log::warn!("no zero-shot prompt: {m}"),
            Err(e) => return Err(e),
        }
        let negatives: Vec<u32> = sel.negatives.iter().copied().collect();
        if negatives.len() >= pc.n_examples {
            for &seed in &pc.seeds {
                prompts.push(few_shot_prompt(corpus, &negatives, pc.n_examples, seed, &pc.base_prompt)?);
            }
        } else {
            log::warn!("no few-shot prompts: {} negatives for {} examples", negatives.len(), pc.n_examples);
        }
        if prompts.is_empty() {
            return Err(Error::Insufficient("no prompt could be built: no induced patterns and too few negatives".into()));
        }
        let dir = self.path(PROMPTS_DIR);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        promptgen::write_prompts(&dir, &prompts)?;
        Ok(())
    }
}
