//! Data pools, query sets and exact-match deduplication.
//!
//! Pools and query sets share one JSON-lines format: one object per line with
//! a `source` string and a `messages` array of `{role, content}` turns. Pool
//! identity is positional; `pool_index` is assigned in file order at load
//! time and every downstream artifact refers to samples by that index.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub pool_index: usize,
    pub source: String,
    pub messages: Vec<Message>,
}

impl Sample {
    /// Has at least one user and one assistant turn.
    pub fn is_ifd_eligible(&self) -> bool {
        self.messages.iter().any(|m| m.role == Role::User)
            && self.messages.iter().any(|m| m.role == Role::Assistant)
    }

    /// Canonical byte encoding of the turn sequence; two samples are exact
    /// duplicates iff their keys are equal.
    pub fn dedup_key(&self) -> Vec<u8> {
        let mut key = Vec::new();
        for m in &self.messages {
            key.push(m.role as u8);
            key.extend_from_slice(&(m.content.len() as u64).to_le_bytes());
            key.extend_from_slice(m.content.as_bytes());
        }
        key
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    source: String,
    messages: Vec<Message>,
}

#[derive(Serialize)]
struct RecordLineRef<'a> {
    source: &'a str,
    messages: &'a [Message],
}

/// Input format of [`load_pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolFormat {
    #[default]
    Jsonl,
}

/// Length and content hash of a pool, used to detect stale features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIdentity {
    pub len: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPool {
    samples: Vec<Sample>,
    source_histogram: BTreeMap<String, usize>,
    fingerprint: String,
}

impl DataPool {
    /// Build a pool from records in order, reassigning `pool_index`.
    pub fn from_records(records: Vec<(String, Vec<Message>)>) -> Self {
        let samples = records
            .into_iter()
            .enumerate()
            .map(|(pool_index, (source, messages))| Sample {
                pool_index,
                source,
                messages,
            })
            .collect();
        Self::from_samples(samples)
    }

    fn from_samples(mut samples: Vec<Sample>) -> Self {
        for (i, s) in samples.iter_mut().enumerate() {
            s.pool_index = i;
        }
        let source_histogram = histogram(&samples);
        let fingerprint = fingerprint_bytes(to_jsonl(&samples).as_bytes());
        Self {
            samples,
            source_histogram,
            fingerprint,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, pool_index: usize) -> Option<&Sample> {
        self.samples.get(pool_index)
    }

    pub fn source_histogram(&self) -> &BTreeMap<String, usize> {
        &self.source_histogram
    }

    /// SHA-256 of the pool file as loaded, or of its canonical JSON-lines
    /// encoding for pools built in memory.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn identity(&self) -> PoolIdentity {
        PoolIdentity {
            len: self.len(),
            fingerprint: self.fingerprint.clone(),
        }
    }

    /// Canonical JSON-lines encoding; loading it back yields an equal pool.
    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.samples)
    }

    /// Per-source counts over a subset of pool indices.
    pub fn count_sources(&self, indices: &[usize]) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for &i in indices {
            *counts.entry(self.samples[i].source.clone()).or_insert(0) += 1;
        }
        counts
    }
}

fn histogram(samples: &[Sample]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for s in samples {
        *h.entry(s.source.clone()).or_insert(0) += 1;
    }
    h
}

fn to_jsonl(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        let line = serde_json::to_string(&RecordLineRef {
            source: &s.source,
            messages: &s.messages,
        })
        .expect("serializing plain strings cannot fail");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn fingerprint_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(fingerprint_bytes(&bytes))
}

fn parse_line(path: &Path, line_no: usize, line: &str) -> Result<(String, Vec<Message>)> {
    let rec: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })?;
    if rec.source.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: "empty `source`".into(),
        });
    }
    Ok((rec.source, rec.messages))
}

/// Parse JSON-lines text. Blank lines are skipped but still counted for
/// error line numbers.
pub fn parse_pool(path: &Path, text: &str) -> Result<DataPool> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    if lines.is_empty() {
        return Err(Error::EmptyPool {
            path: path.to_path_buf(),
        });
    }
    let parsed: Vec<Result<(String, Vec<Message>)>> = lines
        .par_iter()
        .map(|&(no, l)| parse_line(path, no, l))
        .collect();
    let records = parsed.into_iter().collect::<Result<Vec<_>>>()?;
    let samples = records
        .into_iter()
        .enumerate()
        .map(|(pool_index, (source, messages))| Sample {
            pool_index,
            source,
            messages,
        })
        .collect::<Vec<_>>();
    Ok(DataPool {
        source_histogram: histogram(&samples),
        samples,
        fingerprint: fingerprint_bytes(text.as_bytes()),
    })
}

pub fn load_pool(path: &Path, format: PoolFormat) -> Result<DataPool> {
    match format {
        PoolFormat::Jsonl => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_pool(path, &text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemovedSample {
    /// Index in the input pool.
    pub pool_index: usize,
    pub source: String,
    /// Input-pool index of the retained first occurrence.
    pub duplicate_of: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SourceDedupCounts {
    pub kept: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DedupReport {
    pub removed: Vec<RemovedSample>,
    pub per_source: BTreeMap<String, SourceDedupCounts>,
}

impl DedupReport {
    /// Removed input indices grouped by source.
    pub fn removed_by_source(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for r in &self.removed {
            out.entry(&r.source).or_default().push(r.pool_index);
        }
        out
    }

    /// `source<TAB>kept<TAB>removed`, with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("source\tkept\tremoved\n");
        for (source, c) in &self.per_source {
            out.push_str(&format!("{source}\t{}\t{}\n", c.kept, c.removed));
        }
        out
    }
}

/// Keep the first occurrence of every distinct turn sequence.
///
/// Equality is exact on the ordered (role, text) list; the source label is
/// not part of the key. Survivors keep their relative order and are
/// re-indexed from 0.
pub fn dedup_pool(pool: &DataPool) -> (DataPool, DedupReport) {
    // digest -> input indices of distinct samples with that digest
    let mut seen: HashMap<[u8; 32], Vec<usize>> = HashMap::new();
    let mut kept = Vec::with_capacity(pool.len());
    let mut report = DedupReport::default();

    for s in pool.samples() {
        let digest: [u8; 32] = Sha256::digest(s.dedup_key()).into();
        let bucket = seen.entry(digest).or_default();
        let original = bucket
            .iter()
            .copied()
            .find(|&j| pool.samples[j].messages == s.messages);
        let counts = report.per_source.entry(s.source.clone()).or_default();
        match original {
            Some(j) => {
                counts.removed += 1;
                report.removed.push(RemovedSample {
                    pool_index: s.pool_index,
                    source: s.source.clone(),
                    duplicate_of: j,
                });
            }
            None => {
                counts.kept += 1;
                bucket.push(s.pool_index);
                kept.push(s.clone());
            }
        }
    }
    (DataPool::from_samples(kept), report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySet {
    pub task_id: String,
    pool: DataPool,
}

impl QuerySet {
    pub fn new(task_id: impl Into<String>, pool: DataPool) -> Result<Self> {
        let task_id = task_id.into();
        if pool.is_empty() {
            return Err(Error::EmptyQuerySet { task: task_id });
        }
        Ok(Self { task_id, pool })
    }

    pub fn queries(&self) -> &[Sample] {
        self.pool.samples()
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    pub fn identity(&self) -> PoolIdentity {
        self.pool.identity()
    }
}

/// Load one query set per task, in the order given.
pub fn load_query_sets<P: AsRef<Path>>(paths: &[(String, P)]) -> Result<Vec<QuerySet>> {
    paths
        .iter()
        .map(|(task, path)| {
            let path = path.as_ref();
            let text = fs::read_to_string(path).map_err(|e| Error::TaskIo {
                task: task.clone(),
                path: PathBuf::from(path),
                source: e,
            })?;
            let pool = match parse_pool(path, &text) {
                Err(Error::EmptyPool { .. }) => {
                    return Err(Error::EmptyQuerySet { task: task.clone() })
                }
                other => other?,
            };
            QuerySet::new(task.clone(), pool)
        })
        .collect()
}
