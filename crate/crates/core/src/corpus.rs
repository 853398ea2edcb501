//! Trace corpus: records, hidden states, and their unit-normalized copies.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cale::{self, Matrix};
use crate::error::{Error, Result};

/// One LLM trace. The hidden state lives in the owning [`Corpus`] matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: usize,
    pub input_text: String,
    pub gold_output: String,
    pub generated_output: String,
    pub gold_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records_path: PathBuf,
    pub embeddings_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_goal: Option<String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("manifest {}", path.display()), e))
    }

    fn resolve(&self, base: &Path) -> (PathBuf, PathBuf) {
        (base.join(&self.records_path), base.join(&self.embeddings_path))
    }
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<InstanceRecord>,
    dim: usize,
    hidden: Vec<f32>,
    normalized: Vec<f32>,
    answer_set: BTreeSet<String>,
    task_goal: Option<String>,
}

impl Corpus {
    /// Builds a corpus from records and a row-major `N x dim` hidden matrix.
    ///
    /// Only structural checks happen here; semantic problems (NaN, zero rows,
    /// probabilities out of range) are left for [`validate`].
    pub fn new(records: Vec<InstanceRecord>, dim: usize, hidden: Vec<f32>) -> Result<Self> {
        if dim == 0 && !records.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        let rows = if dim == 0 { 0 } else { hidden.len() / dim };
        if hidden.len() != records.len() * dim {
            return Err(Error::CountMismatch {
                records: records.len(),
                embeddings: rows,
            });
        }
        for (pos, r) in records.iter().enumerate() {
            if r.id != pos {
                return Err(Error::parse(
                    "records",
                    format!("record at line {} has id {}, expected {pos}", pos + 1, r.id),
                ));
            }
        }
        let mut normalized = hidden.clone();
        if dim > 0 {
            for row in normalized.chunks_exact_mut(dim) {
                let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in row.iter_mut() {
                        *x = (f64::from(*x) / norm) as f32;
                    }
                }
            }
        }
        let answer_set = records.iter().map(|r| r.gold_output.trim().to_string()).collect();
        Ok(Self {
            records,
            dim,
            hidden,
            normalized,
            answer_set,
            task_goal: None,
        })
    }

    pub fn from_rows(records: Vec<InstanceRecord>, rows: &[Vec<f32>]) -> Result<Self> {
        if rows.len() != records.len() {
            return Err(Error::CountMismatch {
                records: records.len(),
                embeddings: rows.len(),
            });
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut hidden = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            hidden.extend_from_slice(row);
        }
        Self::new(records, dim, hidden)
    }

    pub fn with_task_goal(mut self, goal: Option<String>) -> Self {
        self.task_goal = goal;
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[InstanceRecord] {
        &self.records
    }

    pub fn record(&self, id: usize) -> Result<&InstanceRecord> {
        self.records.get(id).ok_or(Error::OutOfRange {
            id,
            len: self.records.len(),
        })
    }

    pub fn hidden(&self, id: usize) -> &[f32] {
        &self.hidden[id * self.dim..(id + 1) * self.dim]
    }

    pub fn normalized(&self, id: usize) -> &[f32] {
        &self.normalized[id * self.dim..(id + 1) * self.dim]
    }

    pub fn hidden_matrix(&self) -> Matrix {
        Matrix {
            rows: self.len(),
            cols: self.dim,
            data: self.hidden.clone(),
        }
    }

    pub fn answer_set(&self) -> &BTreeSet<String> {
        &self.answer_set
    }

    pub fn task_goal(&self) -> Option<&str> {
        self.task_goal.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NonFinite,
    ZeroNorm,
    GoldProbRange,
    EmptyGold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub id: usize,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub dim: usize,
    pub answer_set_size: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(corpus: &Corpus) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |id, kind, message: String| violations.push(Violation { id, kind, message });
    for (id, rec) in corpus.records.iter().enumerate() {
        let row = corpus.hidden(id);
        if row.iter().any(|x| !x.is_finite()) {
            push(id, ViolationKind::NonFinite, format!("non-finite embedding at row {id}"));
        } else if row.iter().all(|&x| x == 0.0) {
            push(id, ViolationKind::ZeroNorm, format!("zero-norm embedding at row {id}"));
        }
        if !(0.0..=1.0).contains(&rec.gold_prob) {
            push(
                id,
                ViolationKind::GoldProbRange,
                format!("gold_prob {} outside [0, 1] at id {id}", rec.gold_prob),
            );
        }
        if rec.gold_output.trim().is_empty() {
            push(id, ViolationKind::EmptyGold, format!("empty gold_output at id {id}"));
        }
    }
    ValidationReport {
        records: corpus.len(),
        dim: corpus.dim,
        answer_set_size: corpus.answer_set.len(),
        violations,
    }
}

fn parse_records(path: &Path) -> Result<Vec<InstanceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::parse(format!("{} line {}", path.display(), n + 1), e))
        })
        .collect()
}

/// Reads a corpus with structural checks only.
pub fn read_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let (records_path, embeddings_path) = manifest.resolve(base);
    let records = parse_records(&records_path)?;
    let matrix = cale::read(&embeddings_path)?;
    if matrix.rows != records.len() {
        return Err(Error::CountMismatch {
            records: records.len(),
            embeddings: matrix.rows,
        });
    }
    Ok(Corpus::new(records, matrix.cols, matrix.data)?.with_task_goal(manifest.task_goal))
}

/// Reads a corpus and rejects it on the first validation violation.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let corpus = read_corpus(manifest_path)?;
    let report = validate(&corpus);
    if let Some(v) = report.violations.first() {
        return Err(Error::Validation(v.message.clone()));
    }
    Ok(corpus)
}

/// Writes `records.jsonl`, `embeddings.cale` and `manifest.json` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records_path = dir.join("records.jsonl");
    let mut out = Vec::new();
    for r in &corpus.records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::File::create(&records_path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(&records_path, e))?;
    cale::write(&dir.join("embeddings.cale"), &corpus.hidden_matrix())?;
    let manifest = Manifest {
        records_path: "records.jsonl".into(),
        embeddings_path: "embeddings.cale".into(),
        task_goal: corpus.task_goal.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
pub(crate) fn record(id: usize, gold: &str, generated: &str, gold_prob: f64) -> InstanceRecord {
    InstanceRecord {
        id,
        input_text: format!("input {id}"),
        gold_output: gold.into(),
        generated_output: generated.into(),
        gold_prob,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three() -> Corpus {
        let recs = vec![record(0, "A", "A", 0.9), record(1, "B", "A", 0.05), record(2, "C", "C", 0.7)];
        let rows = vec![vec![1.0, 2.0, 0.0, 0.5], vec![0.0, 1.0, 1.0, 1.0], vec![3.0, 0.0, 0.0, 4.0]];
        Corpus::from_rows(recs, &rows).unwrap()
    }

    #[test]
    fn load_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path(), &three()).unwrap();
        let a = load_corpus(&manifest).unwrap();
        let b = load_corpus(&manifest).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.dim(), 4);
        assert_eq!(a, b);
        assert_eq!(a, three());
    }

    #[test]
    fn count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path(), &three()).unwrap();
        let path = dir.path().join("records.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        let two: Vec<&str> = text.lines().take(2).collect();
        fs::write(&path, two.join("\n")).unwrap();
        let err = load_corpus(&manifest).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { records: 2, embeddings: 3 }), "{err}");
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'));
    }

    #[test]
    fn zero_row_rejected_with_index() {
        let recs = vec![record(0, "A", "A", 0.9), record(1, "B", "B", 0.9)];
        let rows = vec![vec![0.0; 4], vec![1.0; 4]];
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path(), &Corpus::from_rows(recs, &rows).unwrap()).unwrap();
        let err = load_corpus(&manifest).unwrap_err();
        assert_eq!(err.to_string(), "zero-norm embedding at row 0");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_corpus(dir.path(), &three()).unwrap();
        fs::remove_file(dir.path().join("embeddings.cale")).unwrap();
        assert!(matches!(load_corpus(&manifest), Err(Error::MissingFile(p)) if p.ends_with("embeddings.cale")));
    }

    #[test]
    fn validation_report() {
        let c = three();
        let report = validate(&c);
        assert!(report.is_clean());
        assert_eq!(report.records, 3);
        assert_eq!(report.answer_set_size, 3);

        let mut recs = c.records().to_vec();
        recs[2].gold_prob = 1.5;
        let bad = Corpus::new(recs, 4, c.hidden_matrix().data).unwrap();
        let report = validate(&bad);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].id, 2);
        assert_eq!(report.violations[0].kind, ViolationKind::GoldProbRange);
    }

    #[test]
    fn nan_and_empty_gold_are_violations() {
        let recs = vec![record(0, "", "A", 0.5), record(1, "B", "B", 0.5)];
        let rows = vec![vec![1.0, 0.0], vec![f32::NAN, 1.0]];
        let report = validate(&Corpus::from_rows(recs, &rows).unwrap());
        let kinds: Vec<_> = report.violations.iter().map(|v| (v.id, v.kind.clone())).collect();
        assert_eq!(kinds, vec![(0, ViolationKind::EmptyGold), (1, ViolationKind::NonFinite)]);
    }

    #[test]
    fn normalized_rows_are_unit() {
        let c = three();
        for i in 0..c.len() {
            let n: f64 = c.normalized(i).iter().map(|&x| f64::from(x).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ids_must_be_contiguous() {
        let recs = vec![record(0, "A", "A", 0.5), record(2, "B", "B", 0.5)];
        assert!(Corpus::from_rows(recs, &[vec![1.0], vec![1.0]]).is_err());
    }
}
