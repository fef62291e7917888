use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::shard::{
    read_embeddings, read_hidden_states, read_losses, EmbeddingShard, HiddenStateRecord,
    LossRecord, RecordKind,
};
use crate::corpus::PoolIdentity;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_MAX_TOKENS: usize = 2048;

fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub kind: RecordKind,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub start: usize,
    pub count: usize,
}

impl ShardEntry {
    pub fn end(&self) -> usize {
        self.start + self.count
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifest {
    /// SHA-256 of the pool file the features were extracted from.
    pub pool_fingerprint: String,
    pub extractor_model: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Width of embedding and hidden-state rows.
    pub dim: usize,
    pub shards: Vec<ShardEntry>,
}

impl FeatureManifest {
    pub fn new(pool_fingerprint: impl Into<String>, extractor_model: impl Into<String>, dim: usize) -> Self {
        Self {
            pool_fingerprint: pool_fingerprint.into(),
            extractor_model: extractor_model.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            dim,
            shards: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(tmp.path(), self.to_json()).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    /// Shards of one kind, ascending by start.
    pub fn shards_of(&self, kind: RecordKind) -> Vec<&ShardEntry> {
        let mut v: Vec<_> = self.shards.iter().filter(|s| s.kind == kind).collect();
        v.sort_by_key(|s| (s.start, s.count));
        v
    }

    pub fn has(&self, kind: RecordKind) -> bool {
        self.shards.iter().any(|s| s.kind == kind)
    }
}

/// A manifest together with the directory its shard paths resolve against.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub manifest: FeatureManifest,
    pub base: PathBuf,
}

impl FeatureStore {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = FeatureManifest::load(manifest_path)?;
        let base = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self { manifest, base })
    }

    pub fn shard_path(&self, entry: &ShardEntry) -> PathBuf {
        self.base.join(&entry.path)
    }

    /// Embedding shards one at a time in pool order; only one shard is
    /// resident at once.
    pub fn embedding_blocks(&self) -> impl Iterator<Item = Result<EmbeddingShard>> + '_ {
        self.manifest
            .shards_of(RecordKind::Embedding)
            .into_iter()
            .map(move |e| {
                let path = self.shard_path(e);
                let shard = read_embeddings(&path)?;
                if shard.vectors.dim() != self.manifest.dim {
                    return Err(Error::DimMismatch {
                        context: path.display().to_string(),
                        expected: self.manifest.dim,
                        found: shard.vectors.dim(),
                    });
                }
                Ok(shard)
            })
    }

    /// All embeddings concatenated in pool order.
    pub fn read_all_embeddings(&self) -> Result<Matrix<f32>> {
        let mut all = Matrix::empty(self.manifest.dim);
        for block in self.embedding_blocks() {
            let block = block?;
            if block.start != all.rows() {
                return Err(Error::BlockOrder {
                    expected: all.rows(),
                    found: block.start,
                });
            }
            for row in block.vectors.iter_rows() {
                all.push_row(row)?;
            }
        }
        Ok(all)
    }

    pub fn hidden_states(&self) -> impl Iterator<Item = Result<Vec<HiddenStateRecord>>> + '_ {
        self.manifest
            .shards_of(RecordKind::HiddenState)
            .into_iter()
            .map(move |e| read_hidden_states(&self.shard_path(e)))
    }

    pub fn losses(&self) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        for e in self.manifest.shards_of(RecordKind::Loss) {
            out.extend(read_losses(&self.shard_path(e))?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Issue {
    StaleFingerprint { pool: String, manifest: String },
    Unreadable { path: PathBuf, message: String },
    HeaderMismatch { path: PathBuf, message: String },
    DimMismatch { path: PathBuf, expected: usize, found: usize },
    Gap { kind: RecordKind, start: usize, end: usize },
    Overlap { kind: RecordKind, start: usize, end: usize },
    OutOfRange { kind: RecordKind, start: usize, end: usize },
    TooManyTokens { pool_index: usize, len: usize, max: usize },
    EmptySequence { pool_index: usize },
}

impl Issue {
    fn status(&self) -> &'static str {
        match self {
            Issue::StaleFingerprint { .. } => "stale",
            Issue::Unreadable { .. } => "unreadable",
            Issue::HeaderMismatch { .. } => "header_mismatch",
            Issue::DimMismatch { .. } => "dim_mismatch",
            Issue::Gap { .. } => "gap",
            Issue::Overlap { .. } => "overlap",
            Issue::OutOfRange { .. } => "out_of_range",
            Issue::TooManyTokens { .. } => "too_many_tokens",
            Issue::EmptySequence { .. } => "empty_sequence",
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Issue::Gap { kind, .. } | Issue::Overlap { kind, .. } | Issue::OutOfRange { kind, .. } => {
                kind.name()
            }
            Issue::TooManyTokens { .. } | Issue::EmptySequence { .. } => {
                RecordKind::HiddenState.name()
            }
            _ => "-",
        }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::StaleFingerprint { pool, manifest } => {
                write!(f, "pool fingerprint {pool} does not match manifest {manifest}")
            }
            Issue::Unreadable { path, message } | Issue::HeaderMismatch { path, message } => {
                write!(f, "{}: {message}", path.display())
            }
            Issue::DimMismatch { path, expected, found } => {
                write!(f, "{}: dim {found}, manifest says {expected}", path.display())
            }
            Issue::Gap { start, end, .. } => write!(f, "indices {start}..{end} missing"),
            Issue::Overlap { start, end, .. } => write!(f, "indices {start}..{end} covered twice"),
            Issue::OutOfRange { start, end, .. } => write!(f, "indices {start}..{end} beyond pool"),
            Issue::TooManyTokens { pool_index, len, max } => {
                write!(f, "sample {pool_index} has {len} tokens, limit {max}")
            }
            Issue::EmptySequence { pool_index } => write!(f, "sample {pool_index} has no tokens"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KindCoverage {
    pub kind: RecordKind,
    pub covered: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
    pub coverage: Vec<KindCoverage>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    /// `status<TAB>kind<TAB>detail` rows: one coverage row per record kind,
    /// then one row per issue.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("status\tkind\tdetail\n");
        for c in &self.coverage {
            let status = if self
                .issues
                .iter()
                .any(|i| i.kind() == c.kind.name())
            {
                "fail"
            } else {
                "ok"
            };
            out.push_str(&format!(
                "{status}\t{}\tcoverage {}/{}\n",
                c.kind.name(),
                c.covered,
                c.total
            ));
        }
        for i in &self.issues {
            out.push_str(&format!("{}\t{}\t{i}\n", i.status(), i.kind()));
        }
        out
    }
}

/// Check that a store's shards partition `0..pool.len` for every record kind
/// present, agree with their manifest entries, share one dim, and were built
/// from this pool. Every violation becomes a report item.
pub fn validate_store(manifest: &FeatureManifest, base: &Path, pool: &PoolIdentity) -> ValidationReport {
    let mut report = ValidationReport::default();
    if manifest.pool_fingerprint != pool.fingerprint {
        report.issues.push(Issue::StaleFingerprint {
            pool: pool.fingerprint.clone(),
            manifest: manifest.pool_fingerprint.clone(),
        });
    }

    let mut by_kind: BTreeMap<RecordKind, Vec<&ShardEntry>> = BTreeMap::new();
    for e in &manifest.shards {
        by_kind.entry(e.kind).or_default().push(e);
    }

    for (&kind, entries) in &by_kind {
        for e in entries {
            check_shard(manifest, base, e, &mut report.issues);
        }
        let mut ranges: Vec<(usize, usize)> = entries.iter().map(|e| (e.start, e.end())).collect();
        ranges.sort_unstable();
        report.coverage.push(KindCoverage {
            kind,
            covered: coverage(kind, &ranges, pool.len, &mut report.issues),
            total: pool.len,
        });
    }
    report
}

/// Sweep sorted ranges; returns the number of distinct in-range indices.
fn coverage(kind: RecordKind, ranges: &[(usize, usize)], len: usize, issues: &mut Vec<Issue>) -> usize {
    let mut next = 0usize;
    let mut covered = 0usize;
    for &(start, end) in ranges {
        if start == end {
            continue;
        }
        if end > len {
            issues.push(Issue::OutOfRange {
                kind,
                start: start.max(len),
                end,
            });
        }
        let (start_c, end_c) = (start.min(len), end.min(len));
        if start_c > next {
            issues.push(Issue::Gap {
                kind,
                start: next,
                end: start_c,
            });
        } else if start_c < next {
            issues.push(Issue::Overlap {
                kind,
                start: start_c,
                end: end_c.min(next),
            });
        }
        if end_c > next {
            covered += end_c - start_c.max(next);
            next = end_c;
        }
    }
    if next < len {
        issues.push(Issue::Gap {
            kind,
            start: next,
            end: len,
        });
    }
    covered
}

fn check_shard(manifest: &FeatureManifest, base: &Path, entry: &ShardEntry, issues: &mut Vec<Issue>) {
    let path = base.join(&entry.path);
    let unreadable = |e: Error| Issue::Unreadable {
        path: path.clone(),
        message: e.to_string(),
    };
    let (start, count, dim) = match entry.kind {
        RecordKind::Embedding => match read_embeddings(&path) {
            Ok(s) => (s.start, s.vectors.rows(), Some(s.vectors.dim())),
            Err(e) => return issues.push(unreadable(e)),
        },
        RecordKind::HiddenState => match read_hidden_states(&path) {
            Ok(recs) => {
                for r in &recs {
                    let len = r.states.rows();
                    if len == 0 {
                        issues.push(Issue::EmptySequence {
                            pool_index: r.pool_index,
                        });
                    } else if len > manifest.max_tokens {
                        issues.push(Issue::TooManyTokens {
                            pool_index: r.pool_index,
                            len,
                            max: manifest.max_tokens,
                        });
                    }
                }
                let header = match super::shard::read_header(&path) {
                    Ok(h) => h,
                    Err(e) => return issues.push(unreadable(e)),
                };
                (header.start as usize, recs.len(), Some(header.dim as usize))
            }
            Err(e) => return issues.push(unreadable(e)),
        },
        RecordKind::Loss => match read_losses(&path) {
            Ok(recs) => {
                let header = match super::shard::read_header(&path) {
                    Ok(h) => h,
                    Err(e) => return issues.push(unreadable(e)),
                };
                (header.start as usize, recs.len(), None)
            }
            Err(e) => return issues.push(unreadable(e)),
        },
        RecordKind::TopK | RecordKind::Score => {
            return issues.push(Issue::HeaderMismatch {
                path,
                message: format!("{} shards do not belong in a feature store", entry.kind.name()),
            })
        }
    };
    if start != entry.start || count != entry.count {
        issues.push(Issue::HeaderMismatch {
            path: path.clone(),
            message: format!(
                "shard holds {start}..{}, manifest says {}..{}",
                start + count,
                entry.start,
                entry.end()
            ),
        });
    }
    if let Some(dim) = dim {
        // empty hidden-state shards carry no rows to disagree with
        if dim != manifest.dim && !(count == 0 && entry.kind == RecordKind::HiddenState) {
            issues.push(Issue::DimMismatch {
                path,
                expected: manifest.dim,
                found: dim,
            });
        }
    }
}
