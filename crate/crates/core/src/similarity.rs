//! Exact cosine top-k between query embeddings and a streamed pool.
//!
//! Scores are computed with one fixed-order dot-product kernel, so a given
//! (query, pool row) pair always yields the same bits no matter how the pool
//! is sharded or how many threads run the scan. Each query keeps a bounded
//! heap ordered by (score descending, pool index ascending); the retained set
//! under that total order does not depend on visit order, which makes the
//! final lists identical across shardings.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Largest `queries x pool` matrix [`dense_scores`] will materialize.
pub const DENSE_CELL_LIMIT: usize = 1 << 27;

/// Rows scored per pass before merging into the per-query heaps.
const TILE_ROWS: usize = 4096;
/// Rows per parallel work item inside a tile.
const SUBTILE_ROWS: usize = 64;
const LANES: usize = 8;

/// Contiguous rows `start..start + vectors.rows()` of a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolBlock<T> {
    pub start: usize,
    pub vectors: Matrix<T>,
}

/// Ranked neighbours of one query: score descending, ties by ascending pool
/// index, at most `k` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKList<T> {
    /// Ordinal of the query within its query set.
    pub query: usize,
    pub k: usize,
    pub entries: Vec<(usize, T)>,
}

impl<T: Scalar> TopKList<T> {
    /// Rank a full score row (the dense small-pool path).
    pub fn from_scores(query: usize, scores: &[T], k: usize) -> Self {
        let mut entries: Vec<(usize, T)> = scores.iter().copied().enumerate().collect();
        entries.sort_by(|a, b| rank_order(a, b));
        entries.truncate(k);
        Self { query, k, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }
}

/// Best first: higher score, then lower index.
pub(crate) fn rank_order<T: Scalar>(a: &(usize, T), b: &(usize, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Dot product with a fixed reduction order: eight strided partial sums,
/// combined pairwise, plus the tail.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    let lo = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let hi = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (lo + hi) + tail
}

fn normalize_rows<T: Scalar>(m: &Matrix<T>, offset: usize, role: &'static str) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                role,
                index: offset + i,
            });
        }
        let norm = dot(row, row).sqrt();
        if norm == T::zero() {
            return Err(Error::ZeroVector {
                role,
                index: offset + i,
            });
        }
        for v in row.iter_mut() {
            *v = *v / norm;
        }
    }
    Ok(out)
}

/// Scale every row to unit Euclidean norm.
pub fn normalize<T: Scalar>(embeddings: &Matrix<T>) -> Result<Matrix<T>> {
    normalize_rows(embeddings, 0, "pool")
}

/// Cosine of two raw vectors through the same kernel as the scan.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    let qa = normalize_rows(&Matrix::from_rows(&[a])?, 0, "query")?;
    let qb = normalize_rows(&Matrix::from_rows(&[b])?, 0, "pool")?;
    Ok(dot(qa.row(0), qb.row(0)))
}

/// Heap entry whose `Ord` puts the worst retained candidate on top.
#[derive(Clone, Copy)]
struct Candidate<T> {
    score: T,
    index: usize,
}

impl<T: Scalar> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for Candidate<T> {}

impl<T: Scalar> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for Candidate<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&(self.index, self.score), &(other.index, other.score))
    }
}

struct Bounded<T> {
    k: usize,
    heap: BinaryHeap<Candidate<T>>,
}

impl<T: Scalar> Bounded<T> {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k.min(1 << 16) + 1),
        }
    }

    #[inline]
    fn offer(&mut self, index: usize, score: T) {
        let c = Candidate { score, index };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if c < *worst {
                *worst = c;
            }
        }
    }

    fn into_list(self, query: usize) -> TopKList<T> {
        TopKList {
            query,
            k: self.k,
            entries: self
                .heap
                .into_sorted_vec()
                .into_iter()
                .map(|c| (c.index, c.score))
                .collect(),
        }
    }
}

/// Exact per-query top-k by cosine similarity over pool blocks streamed in
/// ascending, contiguous index order starting at 0.
///
/// Only one block is held (normalized) at a time, so memory is bounded by
/// the largest block plus `queries x k` heap entries.
pub fn cosine_topk<T, I>(queries: &Matrix<T>, pool: I, k: usize) -> Result<Vec<TopKList<T>>>
where
    T: Scalar,
    I: IntoIterator<Item = Result<PoolBlock<T>>>,
{
    if k == 0 {
        return Err(Error::InvalidK);
    }
    let queries = normalize_rows(queries, 0, "query")?;
    let mut heaps: Vec<Bounded<T>> = (0..queries.rows()).map(|_| Bounded::new(k)).collect();
    let mut next = 0usize;
    for block in pool {
        let block = block?;
        if block.start != next {
            return Err(Error::BlockOrder {
                expected: next,
                found: block.start,
            });
        }
        if block.vectors.dim() != queries.dim() {
            return Err(Error::DimMismatch {
                context: format!("pool block at {}", block.start),
                expected: queries.dim(),
                found: block.vectors.dim(),
            });
        }
        let rows = normalize_rows(&block.vectors, block.start, "pool")?;
        scan_block(&queries, &rows, block.start, &mut heaps);
        next += rows.rows();
    }
    if next == 0 {
        return Err(Error::EmptyStore);
    }
    Ok(heaps
        .into_iter()
        .enumerate()
        .map(|(q, h)| h.into_list(q))
        .collect())
}

fn scan_block<T: Scalar>(queries: &Matrix<T>, rows: &Matrix<T>, start: usize, heaps: &mut [Bounded<T>]) {
    let nq = queries.rows();
    if nq == 0 {
        return;
    }
    let mut scores = vec![T::zero(); TILE_ROWS.min(rows.rows()) * nq];
    let mut tile_start = 0;
    while tile_start < rows.rows() {
        let tile_len = TILE_ROWS.min(rows.rows() - tile_start);
        let buf = &mut scores[..tile_len * nq];
        // layout: buf[r * nq + q] = score of tile row r against query q
        buf.par_chunks_mut(SUBTILE_ROWS * nq)
            .enumerate()
            .for_each(|(s, chunk)| {
                let first = tile_start + s * SUBTILE_ROWS;
                for (r, out) in chunk.chunks_mut(nq).enumerate() {
                    let p = rows.row(first + r);
                    for (q, o) in out.iter_mut().enumerate() {
                        *o = dot(queries.row(q), p);
                    }
                }
            });
        let buf = &scores[..tile_len * nq];
        let base = start + tile_start;
        heaps.par_iter_mut().enumerate().for_each(|(q, heap)| {
            for r in 0..tile_len {
                heap.offer(base + r, buf[r * nq + q]);
            }
        });
        tile_start += tile_len;
    }
}

/// Full `queries x pool` cosine matrix, for small pools and as a reference.
pub fn dense_scores<T: Scalar>(queries: &Matrix<T>, pool: &Matrix<T>) -> Result<Matrix<T>> {
    dense_scores_with_limit(queries, pool, DENSE_CELL_LIMIT)
}

pub fn dense_scores_with_limit<T: Scalar>(
    queries: &Matrix<T>,
    pool: &Matrix<T>,
    limit: usize,
) -> Result<Matrix<T>> {
    let cells = queries.rows().saturating_mul(pool.rows());
    if cells > limit {
        return Err(Error::DenseTooLarge { cells, limit });
    }
    if queries.dim() != pool.dim() {
        return Err(Error::DimMismatch {
            context: "dense scores".into(),
            expected: queries.dim(),
            found: pool.dim(),
        });
    }
    let q = normalize_rows(queries, 0, "query")?;
    let p = normalize_rows(pool, 0, "pool")?;
    let mut data = vec![T::zero(); cells];
    if pool.rows() > 0 {
        data.par_chunks_mut(pool.rows())
            .enumerate()
            .for_each(|(i, out)| {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = dot(q.row(i), p.row(j));
                }
            });
    }
    Matrix::new(queries.rows(), pool.rows(), data)
}

/// Top-k over a fully materialized pool.
pub fn dense_topk<T: Scalar>(queries: &Matrix<T>, pool: &Matrix<T>, k: usize) -> Result<Vec<TopKList<T>>> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    if pool.is_empty() {
        return Err(Error::EmptyStore);
    }
    let s = dense_scores(queries, pool)?;
    Ok(s.iter_rows()
        .enumerate()
        .map(|(q, row)| TopKList::from_scores(q, row, k))
        .collect())
}

/// Split an in-memory pool into blocks of at most `rows_per_block` rows.
pub fn blocks_of<T: Scalar>(pool: &Matrix<T>, rows_per_block: usize) -> Vec<Result<PoolBlock<T>>> {
    let step = rows_per_block.max(1);
    (0..pool.rows())
        .step_by(step)
        .map(|s| {
            Ok(PoolBlock {
                start: s,
                vectors: pool.slice_rows(s..(s + step).min(pool.rows())),
            })
        })
        .collect()
}
