use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pooling::TokenSpans;
use crate::scorers::{ScalarScoreTable, ScoreMethod};
use crate::similarity::{PoolBlock, TopKList};

pub const MAGIC: [u8; 4] = *b"SIFT";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Record-type tag and payload layout.
///
/// - `Embedding`: `count * dim` f32, row-major.
/// - `HiddenState`: per record `u32 L`, `u32` prompt start/end, `u32` answer
///   start/end, then `L * dim` f32.
/// - `Loss`: per record `u64 pool_index`, `u32` full/prompt/answer token
///   counts, f32 full/answer-conditional/answer-alone NLL sums; `dim` is 0.
/// - `TopK`: per list `u64 query`, `u64 len`, then `len * (u64 index, f32
///   score)`; `start` is the first query ordinal and `dim` is k.
/// - `Score`: `u32` score-method tag, then per entry `u64 pool_index`, f64
///   score; `dim` is 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Embedding = 1,
    HiddenState = 2,
    Loss = 3,
    TopK = 4,
    Score = 5,
}

impl RecordKind {
    fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            1 => Self::Embedding,
            2 => Self::HiddenState,
            3 => Self::Loss,
            4 => Self::TopK,
            5 => Self::Score,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Embedding => "embedding",
            Self::HiddenState => "hidden_state",
            Self::Loss => "loss",
            Self::TopK => "top_k",
            Self::Score => "score",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub kind: RecordKind,
    pub start: u64,
    pub count: u64,
    pub dim: u32,
}

impl ShardHeader {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        b[8..12].copy_from_slice(&(self.kind as u32).to_le_bytes());
        b[12..20].copy_from_slice(&self.start.to_le_bytes());
        b[20..28].copy_from_slice(&self.count.to_le_bytes());
        b[28..32].copy_from_slice(&self.dim.to_le_bytes());
        b
    }
}

/// One embedding shard: rows `start..start + vectors.rows()` of a pool.
pub type EmbeddingShard = PoolBlock<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateRecord {
    pub pool_index: usize,
    pub spans: TokenSpans,
    /// `L x dim` last-layer states.
    pub states: Matrix<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub pool_index: usize,
    pub full_token_count: u32,
    pub prompt_token_count: u32,
    pub answer_token_count: u32,
    /// Summed NLL over the full rendered sample.
    pub full_nll_sum: f32,
    /// Summed NLL of the answer tokens given the question.
    pub answer_cond_nll_sum: f32,
    /// Summed NLL of the answer rendered on its own.
    pub answer_uncond_nll_sum: f32,
}

struct Cursor<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(
                self.path,
                format!(
                    "truncated payload: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.too_big())?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn too_big(&self) -> Error {
        Error::corrupt(self.path, "record size overflows")
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::corrupt(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn parse_header(path: &Path, buf: &[u8]) -> Result<ShardHeader> {
    if buf.len() < HEADER_LEN {
        return Err(Error::corrupt(path, "file shorter than header"));
    }
    if buf[0..4] != MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::corrupt(
            path,
            format!("unsupported format version {version}"),
        ));
    }
    let tag = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    let kind = RecordKind::from_tag(tag)
        .ok_or_else(|| Error::corrupt(path, format!("unknown record-type tag {tag}")))?;
    Ok(ShardHeader {
        kind,
        start: u64::from_le_bytes(buf[12..20].try_into().unwrap()),
        count: u64::from_le_bytes(buf[20..28].try_into().unwrap()),
        dim: u32::from_le_bytes(buf[28..32].try_into().unwrap()),
    })
}

pub fn read_header(path: &Path) -> Result<ShardHeader> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match f.read(&mut buf[got..]).map_err(|e| Error::io(path, e))? {
            0 => break,
            n => got += n,
        }
    }
    parse_header(path, &buf[..got])
}

fn open_kind<'a>(
    path: &'a Path,
    buf: &'a [u8],
    kind: RecordKind,
) -> Result<(ShardHeader, Cursor<'a>)> {
    let header = parse_header(path, buf)?;
    if header.kind != kind {
        return Err(Error::corrupt(
            path,
            format!("expected {} records, found {}", kind.name(), header.kind.name()),
        ));
    }
    Ok((
        header,
        Cursor {
            path,
            buf,
            pos: HEADER_LEN,
        },
    ))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write `bytes` next to `path` and rename into place once complete.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn to_u32(path: &Path, v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::corrupt(path, format!("{what} {v} exceeds u32")))
}

pub fn write_embeddings(path: &Path, start: usize, vectors: &Matrix<f32>) -> Result<()> {
    let header = ShardHeader {
        kind: RecordKind::Embedding,
        start: start as u64,
        count: vectors.rows() as u64,
        dim: to_u32(path, vectors.dim(), "dim")?,
    };
    write_atomic(path, |w| {
        w.write_all(&header.encode())?;
        for v in vectors.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    })
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingShard> {
    let buf = read_file(path)?;
    let (h, mut cur) = open_kind(path, &buf, RecordKind::Embedding)?;
    let n = (h.count as usize)
        .checked_mul(h.dim as usize)
        .ok_or_else(|| cur.too_big())?;
    let data = cur.f32s(n)?;
    cur.finish()?;
    Ok(EmbeddingShard {
        start: h.start as usize,
        vectors: Matrix::new(h.count as usize, h.dim as usize, data)?,
    })
}

/// Records must be consecutive in `pool_index` and share one dim.
pub fn write_hidden_states(path: &Path, records: &[HiddenStateRecord]) -> Result<()> {
    let start = records.first().map_or(0, |r| r.pool_index);
    let dim = records.first().map_or(0, |r| r.states.dim());
    for (i, r) in records.iter().enumerate() {
        if r.pool_index != start + i {
            return Err(Error::corrupt(path, "hidden-state records are not consecutive"));
        }
        if r.states.dim() != dim {
            return Err(Error::DimMismatch {
                context: format!("hidden states of sample {}", r.pool_index),
                expected: dim,
                found: r.states.dim(),
            });
        }
        r.spans.check(r.pool_index, r.states.rows())?;
    }
    let header = ShardHeader {
        kind: RecordKind::HiddenState,
        start: start as u64,
        count: records.len() as u64,
        dim: to_u32(path, dim, "dim")?,
    };
    let mut fields = Vec::with_capacity(records.len());
    for r in records {
        fields.push([
            to_u32(path, r.states.rows(), "token count")?,
            to_u32(path, r.spans.prompt.start, "span")?,
            to_u32(path, r.spans.prompt.end, "span")?,
            to_u32(path, r.spans.answer.start, "span")?,
            to_u32(path, r.spans.answer.end, "span")?,
        ]);
    }
    write_atomic(path, |w| {
        w.write_all(&header.encode())?;
        for (r, f) in records.iter().zip(&fields) {
            for v in f {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in r.states.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

pub fn read_hidden_states(path: &Path) -> Result<Vec<HiddenStateRecord>> {
    let buf = read_file(path)?;
    let (h, mut cur) = open_kind(path, &buf, RecordKind::HiddenState)?;
    let dim = h.dim as usize;
    let mut out = Vec::new();
    for i in 0..h.count as usize {
        let pool_index = h.start as usize + i;
        let len = cur.u32()? as usize;
        let prompt = cur.u32()? as usize..cur.u32()? as usize;
        let answer = cur.u32()? as usize..cur.u32()? as usize;
        let spans = TokenSpans { prompt, answer };
        spans
            .check(pool_index, len)
            .map_err(|e| Error::corrupt(path, e.to_string()))?;
        let n = len.checked_mul(dim).ok_or_else(|| cur.too_big())?;
        let states = Matrix::new(len, dim, cur.f32s(n)?)?;
        out.push(HiddenStateRecord {
            pool_index,
            spans,
            states,
        });
    }
    cur.finish()?;
    Ok(out)
}

/// Records must be consecutive in `pool_index`.
pub fn write_losses(path: &Path, records: &[LossRecord]) -> Result<()> {
    let start = records.first().map_or(0, |r| r.pool_index);
    if records
        .iter()
        .enumerate()
        .any(|(i, r)| r.pool_index != start + i)
    {
        return Err(Error::corrupt(path, "loss records are not consecutive"));
    }
    let header = ShardHeader {
        kind: RecordKind::Loss,
        start: start as u64,
        count: records.len() as u64,
        dim: 0,
    };
    write_atomic(path, |w| {
        w.write_all(&header.encode())?;
        for r in records {
            w.write_all(&(r.pool_index as u64).to_le_bytes())?;
            w.write_all(&r.full_token_count.to_le_bytes())?;
            w.write_all(&r.prompt_token_count.to_le_bytes())?;
            w.write_all(&r.answer_token_count.to_le_bytes())?;
            w.write_all(&r.full_nll_sum.to_le_bytes())?;
            w.write_all(&r.answer_cond_nll_sum.to_le_bytes())?;
            w.write_all(&r.answer_uncond_nll_sum.to_le_bytes())?;
        }
        Ok(())
    })
}

pub fn read_losses(path: &Path) -> Result<Vec<LossRecord>> {
    let buf = read_file(path)?;
    let (h, mut cur) = open_kind(path, &buf, RecordKind::Loss)?;
    let mut out = Vec::new();
    for i in 0..h.count {
        let pool_index = cur.u64()?;
        if pool_index != h.start + i {
            return Err(Error::corrupt(
                path,
                format!("record {i} has pool index {pool_index}, expected {}", h.start + i),
            ));
        }
        out.push(LossRecord {
            pool_index: pool_index as usize,
            full_token_count: cur.u32()?,
            prompt_token_count: cur.u32()?,
            answer_token_count: cur.u32()?,
            full_nll_sum: cur.f32()?,
            answer_cond_nll_sum: cur.f32()?,
            answer_uncond_nll_sum: cur.f32()?,
        });
    }
    cur.finish()?;
    Ok(out)
}

pub fn write_topk(path: &Path, lists: &[TopKList<f32>]) -> Result<()> {
    let header = ShardHeader {
        kind: RecordKind::TopK,
        start: lists.first().map_or(0, |l| l.query as u64),
        count: lists.len() as u64,
        dim: to_u32(path, lists.first().map_or(0, |l| l.k), "k")?,
    };
    write_atomic(path, |w| {
        w.write_all(&header.encode())?;
        for l in lists {
            w.write_all(&(l.query as u64).to_le_bytes())?;
            w.write_all(&(l.entries.len() as u64).to_le_bytes())?;
            for &(idx, score) in &l.entries {
                w.write_all(&(idx as u64).to_le_bytes())?;
                w.write_all(&score.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

pub fn read_topk(path: &Path) -> Result<Vec<TopKList<f32>>> {
    let buf = read_file(path)?;
    let (h, mut cur) = open_kind(path, &buf, RecordKind::TopK)?;
    let mut out = Vec::new();
    for _ in 0..h.count {
        let query = cur.u64()? as usize;
        let len = cur.u64()? as usize;
        if len > h.dim as usize {
            return Err(Error::corrupt(path, format!("list of {len} entries exceeds k")));
        }
        let mut entries = Vec::with_capacity(len);
        for _ in 0..len {
            let idx = cur.u64()? as usize;
            entries.push((idx, cur.f32()?));
        }
        out.push(TopKList {
            query,
            k: h.dim as usize,
            entries,
        });
    }
    cur.finish()?;
    Ok(out)
}

pub fn write_scores(path: &Path, table: &ScalarScoreTable<f64>) -> Result<()> {
    let header = ShardHeader {
        kind: RecordKind::Score,
        start: table.entries.first().map_or(0, |e| e.0 as u64),
        count: table.entries.len() as u64,
        dim: 1,
    };
    write_atomic(path, |w| {
        w.write_all(&header.encode())?;
        w.write_all(&(table.method as u32).to_le_bytes())?;
        for &(idx, score) in &table.entries {
            w.write_all(&(idx as u64).to_le_bytes())?;
            w.write_all(&score.to_le_bytes())?;
        }
        Ok(())
    })
}

/// Reads entries only; exclusion notes are not stored in the binary form.
pub fn read_scores(path: &Path) -> Result<ScalarScoreTable<f64>> {
    let buf = read_file(path)?;
    let (h, mut cur) = open_kind(path, &buf, RecordKind::Score)?;
    let tag = cur.u32()?;
    let method = ScoreMethod::from_tag(tag)
        .ok_or_else(|| Error::corrupt(path, format!("unknown score method {tag}")))?;
    let mut entries = Vec::new();
    for _ in 0..h.count {
        let idx = cur.u64()? as usize;
        entries.push((idx, cur.f64()?));
    }
    cur.finish()?;
    Ok(ScalarScoreTable {
        method,
        entries,
        excluded: Vec::new(),
    })
}
