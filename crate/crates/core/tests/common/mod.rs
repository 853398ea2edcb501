#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use bias_lens::corpus::Corpus;
use bias_lens::induce::{parse_numbered, ChatBackend, ChatReply, ChatRequest};
use bias_lens::synth::{generate, write_synth, GroundTruth, SynthSpec};
use bias_lens::Result;

/// Offline chat model: stage-1 prompts get a fixed list, stage-2 prompts get
/// their candidates ranked by frequency.
pub struct ScriptedBackend {
    stage1_reply: String,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(stage1_reply: &str) -> Self {
        Self {
            stage1_reply: stage1_reply.into(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &'static str {
        "scripted"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = &request.messages[0].content;
        if !prompt.contains("candidate bias patterns") {
            return Ok(ChatReply { text: self.stage1_reply.clone(), attempts: 1 });
        }
        let mut counts: Vec<(String, usize)> = Vec::new();
        for item in parse_numbered(prompt) {
            match counts.iter_mut().find(|(t, _)| *t == item) {
                Some(e) => e.1 += 1,
                None => counts.push((item, 1)),
            }
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1));
        let text = counts.iter().take(3).enumerate().map(|(k, (t, _))| format!("{}. {t}", k + 1)).collect::<Vec<_>>().join("\n");
        Ok(ChatReply { text, attempts: 1 })
    }
}

pub const STAGE1_REPLY: &str = "1. the scenario number\n2. the option letter named in the question\n3. shared question wording\n4. case numbering";

/// A synthetic corpus written under `dir`, with its manifest path.
pub fn synth_corpus(dir: &Path, spec: &SynthSpec) -> (PathBuf, Corpus, GroundTruth) {
    let (corpus, truth) = generate(spec).unwrap();
    let manifest = write_synth(dir, &corpus, &truth).unwrap();
    (manifest, corpus, truth)
}

/// Keys that scale the count targets down to a 600-record corpus.
pub const SMALL_TARGETS: [(&str, &str); 4] = [("pairs_min", "100"), ("pairs_max", "400"), ("negatives_min", "5"), ("negatives_max", "40")];
