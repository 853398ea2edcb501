//! Two-stage bias-pattern induction against a chat-completion endpoint.
//!
//! Stage 1 summarizes small batches of a cluster's counter-example pairs into
//! candidate patterns; stage 2 consolidates all candidates of the cluster into
//! a ranked shortlist. Requests are plain OpenAI-style chat completions, keyed
//! by the SHA-256 of their body so that a recorded replay file can stand in
//! for the endpoint.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::geometry::ClusterAssignment;
use crate::pairminer::CounterExamplePair;
use crate::registry::Registry;

pub const API_KEY_VAR: &str = "CAL_API_KEY";
const STAGE1_TEMPLATE: &str = include_str!("../templates/stage1.txt");
const STAGE2_TEMPLATE: &str = include_str!("../templates/stage2.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionConfig {
    pub endpoint: String,
    pub model: String,
    pub batch_size: usize,
    pub cap: usize,
    pub patterns: usize,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub concurrency: usize,
    /// Backend name: "live" or "replay".
    pub mode: String,
    pub replay_path: Option<PathBuf>,
    /// Rough ceiling (characters / 4) on a stage-2 prompt before it is split.
    pub token_budget: usize,
    pub stage1_template: Option<PathBuf>,
    pub stage2_template: Option<PathBuf>,
}

impl Default for InductionConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "gpt-4".into(),
            batch_size: 5,
            cap: 500,
            patterns: 3,
            timeout_secs: 120.0,
            max_retries: 3,
            backoff_ms: 1000,
            concurrency: 1,
            mode: "live".into(),
            replay_path: None,
            token_budget: 6000,
            stage1_template: None,
            stage2_template: None,
        }
    }
}

impl InductionConfig {
    pub fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.cap < self.batch_size {
            return Err(Error::InvalidConfig(format!("cap {} is below batch size {}", self.cap, self.batch_size)));
        }
        if self.patterns == 0 {
            return Err(Error::InvalidConfig("patterns per cluster must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::InvalidConfig("concurrency must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::InvalidConfig("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasPattern {
    pub text: String,
    pub cluster: usize,
    pub rank: usize,
    pub source_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn user(model: &str, content: String) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![Message { role: "user".into(), content }],
            temperature: 0.0,
        }
    }

    pub fn body(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("chat request serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.body()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub text: String,
    pub attempts: u32,
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn name(&self) -> &'static str {
        (**self).name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply> {
        (**self).complete(request)
    }
}

/// HTTP client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct LiveBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
}

impl LiveBackend {
    pub fn new(cfg: &InductionConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Endpoint(format!("building HTTP client: {e}")))?;
        Ok(Self {
            client,
            endpoint: cfg.endpoint.clone(),
            api_key: std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
            max_retries: cfg.max_retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
        })
    }

    fn extract_text(body: &str) -> Result<String> {
        let v: serde_json::Value = serde_json::from_str(body).map_err(|e| Error::Endpoint(format!("response is not JSON: {e}")))?;
        match v.pointer("/choices/0/message/content") {
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(serde_json::Value::Null) | None => Err(Error::Endpoint("response has no choices[0].message.content".into())),
            Some(other) => Err(Error::Endpoint(format!("unexpected content type: {other}"))),
        }
    }
}

impl ChatBackend for LiveBackend {
    fn name(&self) -> &'static str {
        "live"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply> {
        let body = request.body();
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                let wait = self.backoff * 2u32.saturating_pow(attempt - 1);
                log::warn!("retry {attempt}/{} after {last}; waiting {wait:?}", self.max_retries);
                std::thread::sleep(wait);
            }
            let mut req = self.client.post(&self.endpoint).header("content-type", "application/json").body(body.clone());
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Err(e) => last = format!("transport error: {e}"),
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| Error::Endpoint(format!("reading response: {e}")))?;
                    if status.is_success() {
                        return Ok(ChatReply {
                            text: Self::extract_text(&text)?,
                            attempts: attempt + 1,
                        });
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        last = format!("HTTP {status}");
                    } else {
                        return Err(Error::Endpoint(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
                    }
                }
            }
        }
        Err(Error::Endpoint(format!("{} unreachable after {} attempts: {last}", self.endpoint, self.max_retries + 1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub request_digest: String,
    pub response_text: String,
}

pub fn read_replay(path: &Path) -> Result<Vec<ReplayEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::parse(format!("replay file {} line {}", path.display(), n + 1), e)))
        .collect()
}

pub fn write_replay(path: &Path, entries: &[ReplayEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Answers from a recorded file; never touches the network.
pub struct ReplayBackend {
    responses: HashMap<String, String>,
    calls: AtomicUsize,
}

impl ReplayBackend {
    pub fn new(entries: Vec<ReplayEntry>) -> Self {
        Self {
            responses: entries.into_iter().map(|e| (e.request_digest, e.response_text)).collect(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(read_replay(path)?))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ReplayBackend {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let digest = request.digest();
        self.responses
            .get(&digest)
            .map(|text| ChatReply { text: text.clone(), attempts: 1 })
            .ok_or(Error::ReplayMiss(digest))
    }
}

/// Passes requests through and keeps every exchange for a replay file.
pub struct RecordingBackend<B> {
    inner: B,
    entries: Mutex<Vec<ReplayEntry>>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            entries: Mutex::new(Vec::new()),
        }
    }

    pub fn entries(&self) -> Vec<ReplayEntry> {
        self.entries.lock().expect("recorder lock").clone()
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply> {
        let reply = self.inner.complete(request)?;
        let mut entries = self.entries.lock().expect("recorder lock");
        let digest = request.digest();
        if !entries.iter().any(|e| e.request_digest == digest) {
            entries.push(ReplayEntry {
                request_digest: digest,
                response_text: reply.text.clone(),
            });
        }
        Ok(reply)
    }
}

type BackendCtor = fn(&InductionConfig) -> Result<Box<dyn ChatBackend>>;

pub fn backends() -> Registry<BackendCtor> {
    Registry::<BackendCtor>::new("chat backend")
        .with("live", |cfg| Ok(Box::new(LiveBackend::new(cfg)?)))
        .with("replay", |cfg| {
            let path = cfg
                .replay_path
                .as_deref()
                .ok_or_else(|| Error::InvalidConfig("replay mode needs a replay file".into()))?;
            Ok(Box::new(ReplayBackend::open(path)?))
        })
}

pub fn render_pair(pair: &CounterExamplePair, corpus: &Corpus) -> Result<String> {
    let block = |label: &str, id: u32| -> Result<String> {
        let r = corpus.record(id as usize)?;
        Ok(format!("{label}: {} gold: {} pred: {}", r.input_text.trim(), r.gold_output.trim(), r.generated_output.trim()))
    };
    Ok(format!("{}\n\n{}", block("Example1", pair.i)?, block("Example2", pair.j)?))
}

/// Truncates to the first `cap` items, then splits into consecutive batches.
pub fn batch_cluster<T: Clone>(pairs: &[T], cfg: &InductionConfig) -> Vec<Vec<T>> {
    let kept = &pairs[..pairs.len().min(cfg.cap)];
    kept.chunks(cfg.batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Items of a numbered list ("1. foo", "2) bar"); other lines are ignored.
pub fn parse_numbered(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|line| {
            let line = line.trim();
            let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
            if digits == 0 {
                return None;
            }
            let rest = &line[digits..];
            let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
            let item = rest.trim().trim_matches('*').trim();
            (!item.is_empty()).then(|| item.to_string())
        })
        .collect()
}

fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub cluster: usize,
    pub stage: String,
    pub batch: usize,
    pub request_digest: String,
    pub attempts: u32,
    pub status: String,
    pub items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPatterns {
    pub cluster: usize,
    pub size: usize,
    pub pairs_used: usize,
    pub batches: usize,
    pub candidates: Vec<String>,
    pub patterns: Vec<BiasPattern>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    pub model: String,
    pub backend: String,
    pub clusters: Vec<ClusterPatterns>,
}

impl PatternReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::parse("patterns file", e))
    }
}

pub struct Inducer<'a> {
    backend: &'a dyn ChatBackend,
    cfg: &'a InductionConfig,
    stage1: String,
    stage2: String,
    log: Mutex<Vec<LogEntry>>,
}

impl<'a> Inducer<'a> {
    pub fn new(backend: &'a dyn ChatBackend, cfg: &'a InductionConfig) -> Result<Self> {
        cfg.check()?;
        let load = |p: &Option<PathBuf>, default: &str| match p {
            Some(path) => fs::read_to_string(path).map_err(|e| Error::io(path, e)),
            None => Ok(default.to_string()),
        };
        Ok(Self {
            backend,
            cfg,
            stage1: load(&cfg.stage1_template, STAGE1_TEMPLATE)?,
            stage2: load(&cfg.stage2_template, STAGE2_TEMPLATE)?,
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.log.lock().expect("log lock").clone()
    }

    fn record(&self, entry: LogEntry) {
        self.log.lock().expect("log lock").push(entry);
    }

    pub fn stage1_request(&self, batch: &[CounterExamplePair], corpus: &Corpus) -> Result<ChatRequest> {
        let mut blocks = Vec::with_capacity(batch.len());
        for (n, p) in batch.iter().enumerate() {
            blocks.push(format!("Pair {}:\n{}", n + 1, render_pair(p, corpus)?));
        }
        Ok(ChatRequest::user(&self.cfg.model, self.stage1.replace("{{pairs}}", &blocks.join("\n\n"))))
    }

    fn stage2_request(&self, candidates: &[String]) -> ChatRequest {
        let listed: Vec<String> = candidates.iter().enumerate().map(|(n, c)| format!("{}. {c}", n + 1)).collect();
        let text = self.stage2.replace("{{candidates}}", &listed.join("\n")).replace("{{count}}", &self.cfg.patterns.to_string());
        ChatRequest::user(&self.cfg.model, text)
    }

    /// Candidate patterns for one batch. An empty or unparseable response
    /// skips the batch with a warning instead of failing the run.
    pub fn stage1_summarize(&self, cluster: usize, index: usize, batch: &[CounterExamplePair], corpus: &Corpus) -> Result<Vec<String>> {
        let request = self.stage1_request(batch, corpus)?;
        let reply = self.backend.complete(&request)?;
        let items = parse_numbered(&reply.text);
        let status = if items.is_empty() {
            log::warn!("cluster {cluster} batch {index}: no numbered patterns in response, batch skipped");
            "skipped"
        } else {
            "ok"
        };
        self.record(LogEntry {
            cluster,
            stage: "stage1".into(),
            batch: index,
            request_digest: request.digest(),
            attempts: reply.attempts,
            status: status.into(),
            items: items.len(),
            raw_response: items.is_empty().then(|| reply.text.clone()),
        });
        Ok(items)
    }

    /// Ranked patterns distilled from all candidates of a cluster, splitting
    /// the request when it would exceed the token budget.
    pub fn stage2_consolidate(&self, cluster: usize, candidates: &[String], source_batches: usize) -> Result<(Vec<BiasPattern>, Vec<String>)> {
        let want = self.cfg.patterns;
        let mut warnings = Vec::new();
        if candidates.len() < want {
            let w = format!("cluster {cluster}: only {} candidate patterns for {want} requested", candidates.len());
            log::warn!("{w}");
            warnings.push(w);
            let patterns = candidates.iter().enumerate().map(|(k, t)| BiasPattern { text: t.clone(), cluster, rank: k + 1, source_batches }).collect();
            return Ok((patterns, warnings));
        }
        let mut round = 0;
        let mut current = candidates.to_vec();
        let ranked = loop {
            let chunks = self.chunk_for_budget(&current);
            if chunks.len() == 1 {
                break self.consolidate_once(cluster, round, 0, &current)?;
            }
            let mut next = Vec::new();
            for (k, chunk) in chunks.iter().enumerate() {
                next.extend(self.consolidate_once(cluster, round, k, chunk)?);
            }
            round += 1;
            if next.len() <= want {
                break next;
            }
            current = next;
        };
        if ranked.len() < want {
            let w = format!("cluster {cluster}: consolidation returned {} of {want} patterns", ranked.len());
            log::warn!("{w}");
            warnings.push(w);
        }
        let patterns = ranked
            .into_iter()
            .take(want)
            .enumerate()
            .map(|(k, text)| BiasPattern { text, cluster, rank: k + 1, source_batches })
            .collect();
        Ok((patterns, warnings))
    }

    fn consolidate_once(&self, cluster: usize, round: usize, chunk: usize, candidates: &[String]) -> Result<Vec<String>> {
        let request = self.stage2_request(candidates);
        let reply = self.backend.complete(&request)?;
        let items = parse_numbered(&reply.text);
        self.record(LogEntry {
            cluster,
            stage: if round == 0 { "stage2".into() } else { format!("stage2.{round}") },
            batch: chunk,
            request_digest: request.digest(),
            attempts: reply.attempts,
            status: if items.is_empty() { "skipped".into() } else { "ok".into() },
            items: items.len(),
            raw_response: items.is_empty().then(|| reply.text.clone()),
        });
        Ok(items)
    }

    /// Consecutive chunks whose prompts fit the budget. Each chunk keeps more
    /// than `patterns` candidates so every round shrinks the list.
    fn chunk_for_budget(&self, candidates: &[String]) -> Vec<Vec<String>> {
        if estimate_tokens(&self.stage2_request(candidates).messages[0].content) <= self.cfg.token_budget {
            return vec![candidates.to_vec()];
        }
        let min_len = self.cfg.patterns + 1;
        let mut chunks: Vec<Vec<String>> = Vec::new();
        let mut cur: Vec<String> = Vec::new();
        for c in candidates {
            cur.push(c.clone());
            if cur.len() > min_len && estimate_tokens(&self.stage2_request(&cur).messages[0].content) > self.cfg.token_budget {
                let overflow = cur.pop().expect("nonempty");
                chunks.push(std::mem::replace(&mut cur, vec![overflow]));
            }
        }
        if cur.len() < min_len && !chunks.is_empty() {
            chunks.last_mut().expect("nonempty").extend(cur);
        } else if !cur.is_empty() {
            chunks.push(cur);
        }
        chunks
    }

    /// Runs both stages for one cluster. `pairs` must be in pair-index order.
    pub fn induce_cluster(&self, cluster: usize, pairs: &[CounterExamplePair], corpus: &Corpus) -> Result<ClusterPatterns> {
        let batches = batch_cluster(pairs, self.cfg);
        let mut per_batch: Vec<Option<Result<Vec<String>>>> = (0..batches.len()).map(|_| None).collect();
        // at most `concurrency` requests in flight; results keep batch order
        for (w, window) in batches.chunks(self.cfg.concurrency).enumerate() {
            let base = w * self.cfg.concurrency;
            if window.len() == 1 {
                per_batch[base] = Some(self.stage1_summarize(cluster, base, &window[0], corpus));
                continue;
            }
            let results: Vec<Result<Vec<String>>> = std::thread::scope(|s| {
                let handles: Vec<_> = window
                    .iter()
                    .enumerate()
                    .map(|(k, b)| s.spawn(move || self.stage1_summarize(cluster, base + k, b, corpus)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("stage-1 worker panicked")).collect()
            });
            for (k, r) in results.into_iter().enumerate() {
                per_batch[base + k] = Some(r);
            }
        }
        let mut candidates = Vec::new();
        for r in per_batch.into_iter().flatten() {
            candidates.extend(r?);
        }
        let (patterns, warnings) = if candidates.is_empty() {
            let w = format!("cluster {cluster}: no candidate patterns");
            log::warn!("{w}");
            (Vec::new(), vec![w])
        } else {
            self.stage2_consolidate(cluster, &candidates, batches.len())?
        };
        Ok(ClusterPatterns {
            cluster,
            size: pairs.len(),
            pairs_used: pairs.len().min(self.cfg.cap),
            batches: batches.len(),
            candidates,
            patterns,
            warnings,
        })
    }

    /// Induces patterns for every cluster of `assignment`; `pairs` are the
    /// clustered pairs in row order.
    pub fn induce_all(&self, assignment: &ClusterAssignment, pairs: &[CounterExamplePair], corpus: &Corpus) -> Result<PatternReport> {
        if assignment.points.len() != pairs.len() {
            return Err(Error::CountMismatch {
                records: pairs.len(),
                embeddings: assignment.points.len(),
            });
        }
        let mut clusters = Vec::new();
        for (c, rows) in assignment.members().iter().enumerate() {
            let members: Vec<CounterExamplePair> = rows.iter().map(|&r| pairs[r].clone()).collect();
            clusters.push(self.induce_cluster(c, &members, corpus)?);
        }
        log::info!("induced patterns for {} clusters", clusters.len());
        Ok(PatternReport {
            model: self.cfg.model.clone(),
            backend: self.backend.name().to_string(),
            clusters,
        })
    }
}

pub fn write_log(path: &Path, entries: &[LogEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e)?;
        writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}
