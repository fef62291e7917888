//! Query-driven subset construction.
//!
//! Round-robin visits queries (or tasks) in a fixed order; each pops its
//! best candidate that nobody has selected yet. A selected index is removed
//! for every query, so a selection never repeats an index. Multi-task
//! selection first collapses each task's queries into one table holding the
//! max score per pool index, then runs the same round-robin over tasks.

mod manifest;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use manifest::{
    Aggregation, FeatureReference, SelectionManifest, SelectionMethod, SelectionParameters,
    TaskCount,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::similarity::{rank_order, TopKList};

/// How a pop invalidates the selected index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum RemovalMode {
    /// Removed for every query; the selection is duplicate-free.
    #[default]
    Global,
    /// Removed only for the query that popped it, as in the bare loop that
    /// resets just `S[v, d]`. Other queries may pick the same index again,
    /// so the output can contain duplicates. Kept to measure the difference.
    PerQuery,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRobinOutcome {
    /// Selected pool indices in pick order.
    pub indices: Vec<usize>,
    /// Picks credited to each query (or task), in visiting order.
    pub contributions: Vec<usize>,
    /// Candidates passed over because another query already took them.
    pub skips: usize,
}

fn round_robin<T>(
    lists: &[&[(usize, T)]],
    n: usize,
    pool_len: usize,
    mode: RemovalMode,
    exhausted: impl Fn(usize, usize) -> Error,
) -> Result<RoundRobinOutcome> {
    if lists.is_empty() {
        return Err(Error::InvalidParams("round-robin needs at least one query".into()));
    }
    let n = n.min(pool_len);
    let mut selected = vec![false; pool_len];
    let mut cursors = vec![0usize; lists.len()];
    let mut out = RoundRobinOutcome {
        indices: Vec::with_capacity(n),
        contributions: vec![0; lists.len()],
        skips: 0,
    };
    'outer: while out.indices.len() < n {
        for (q, list) in lists.iter().enumerate() {
            loop {
                let Some(&(idx, _)) = list.get(cursors[q]) else {
                    return Err(exhausted(q, list.len()));
                };
                cursors[q] += 1;
                if idx >= pool_len {
                    return Err(Error::InvalidParams(format!(
                        "pool index {idx} outside a pool of {pool_len}"
                    )));
                }
                if mode == RemovalMode::Global && selected[idx] {
                    out.skips += 1;
                    continue;
                }
                selected[idx] = true;
                out.indices.push(idx);
                out.contributions[q] += 1;
                break;
            }
            if out.indices.len() >= n {
                break 'outer;
            }
        }
    }
    Ok(out)
}

/// Round-robin over one task's queries, in query-set order.
///
/// `n` above `pool_len` selects the whole pool. Running off the end of a
/// truncated list is an error asking for a larger k.
pub fn round_robin_single<T: Scalar>(
    topk: &[TopKList<T>],
    n: usize,
    pool_len: usize,
) -> Result<RoundRobinOutcome> {
    round_robin_single_with(topk, n, pool_len, RemovalMode::Global)
}

pub fn round_robin_single_with<T: Scalar>(
    topk: &[TopKList<T>],
    n: usize,
    pool_len: usize,
    mode: RemovalMode,
) -> Result<RoundRobinOutcome> {
    let lists: Vec<&[(usize, T)]> = topk.iter().map(|l| l.entries.as_slice()).collect();
    round_robin(&lists, n, pool_len, mode, |q, len| Error::TopKExhausted {
        query: topk[q].query,
        len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore<T> {
    pub pool_index: usize,
    pub score: T,
    /// Query ordinal that achieved the max.
    pub query: usize,
}

/// Max-over-queries score per pool index for one task. Only indices that
/// appear in some query's list are present; absent ones rank below all.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScoreTable<T> {
    pub task_id: String,
    /// Sorted by score descending, then pool index ascending.
    pub entries: Vec<TaskScore<T>>,
}

impl<T: Scalar> TaskScoreTable<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn min_score(&self) -> Option<T> {
        self.entries.last().map(|e| e.score)
    }

    pub fn get(&self, pool_index: usize) -> Option<&TaskScore<T>> {
        self.entries.iter().find(|e| e.pool_index == pool_index)
    }

    fn by_index(&self) -> HashMap<usize, T> {
        self.entries.iter().map(|e| (e.pool_index, e.score)).collect()
    }
}

fn aggregate_one<T: Scalar>(task_id: &str, lists: &[TopKList<T>]) -> Result<TaskScoreTable<T>> {
    if lists.is_empty() {
        return Err(Error::EmptyQuerySet {
            task: task_id.to_string(),
        });
    }
    let mut best: HashMap<usize, (T, usize)> = HashMap::new();
    for list in lists {
        for &(idx, score) in &list.entries {
            best.entry(idx)
                .and_modify(|b| {
                    // strictly greater keeps the earliest query on ties
                    if score > b.0 || (score == b.0 && list.query < b.1) {
                        *b = (score, list.query);
                    }
                })
                .or_insert((score, list.query));
        }
    }
    let mut entries: Vec<TaskScore<T>> = best
        .into_iter()
        .map(|(pool_index, (score, query))| TaskScore {
            pool_index,
            score,
            query,
        })
        .collect();
    entries.sort_by(|a, b| rank_order(&(a.pool_index, a.score), &(b.pool_index, b.score)));
    Ok(TaskScoreTable {
        task_id: task_id.to_string(),
        entries,
    })
}

/// Collapse each task's per-query lists into one max-score table, keeping
/// which query achieved each max. Output follows input task order.
pub fn aggregate_task_scores<T: Scalar>(
    per_task: &[(String, Vec<TopKList<T>>)],
) -> Result<Vec<TaskScoreTable<T>>> {
    per_task
        .par_iter()
        .map(|(task, lists)| aggregate_one(task, lists))
        .collect()
}

/// Round-robin over tasks in the given order. A task whose best remaining
/// candidate is already taken moves on to its next one, so the result holds
/// `min(n, pool_len)` distinct indices.
pub fn round_robin_multitask<T: Scalar>(
    tables: &[TaskScoreTable<T>],
    n: usize,
    pool_len: usize,
) -> Result<RoundRobinOutcome> {
    let lists: Vec<Vec<(usize, T)>> = tables
        .iter()
        .map(|t| t.entries.iter().map(|e| (e.pool_index, e.score)).collect())
        .collect();
    let views: Vec<&[(usize, T)]> = lists.iter().map(Vec::as_slice).collect();
    round_robin(&views, n, pool_len, RemovalMode::Global, |t, len| {
        Error::TaskExhausted {
            task: tables[t].task_id.clone(),
            len,
        }
    })
}

/// Value a task contributes for an index missing from its sparse table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMaxFloor {
    /// Lowest score present in that task's table.
    #[default]
    TaskMinimum,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanMaxOutcome<T> {
    /// Selected indices with their averaged score, best first.
    pub ranked: Vec<(usize, T)>,
    /// Indices that were missing from at least one task's table.
    pub floored: usize,
}

impl<T> MeanMaxOutcome<T> {
    pub fn indices(&self) -> Vec<usize> {
        self.ranked.iter().map(|e| e.0).collect()
    }
}

/// Average each index's per-task scores and keep the global top `n`.
///
/// Candidates are the indices present in at least one table. With complete
/// (dense) tables the floor never applies.
pub fn mean_max_select<T: Scalar>(
    tables: &[TaskScoreTable<T>],
    n: usize,
    floor: MeanMaxFloor,
) -> Result<MeanMaxOutcome<T>> {
    if tables.is_empty() {
        return Err(Error::InvalidParams("mean-max needs at least one task".into()));
    }
    let maps: Vec<HashMap<usize, T>> = tables.par_iter().map(|t| t.by_index()).collect();
    let floors: Vec<T> = tables
        .iter()
        .map(|t| match floor {
            MeanMaxFloor::TaskMinimum => t.min_score().unwrap_or_else(T::zero),
            MeanMaxFloor::Value(v) => T::from_f64(v).expect("floor converts"),
        })
        .collect();
    let mut candidates: Vec<usize> = maps.iter().flat_map(|m| m.keys().copied()).collect();
    candidates.sort_unstable();
    candidates.dedup();
    if n > candidates.len() {
        return Err(Error::NotEnough {
            requested: n,
            available: candidates.len(),
        });
    }
    let count = T::from_usize(tables.len()).expect("task count fits");
    let mut floored = 0;
    let mut scored: Vec<(usize, T)> = candidates
        .into_iter()
        .map(|idx| {
            let mut sum = T::zero();
            let mut missing = false;
            for (m, &f) in maps.iter().zip(&floors) {
                sum = sum
                    + match m.get(&idx) {
                        Some(&s) => s,
                        None => {
                            missing = true;
                            f
                        }
                    };
            }
            floored += usize::from(missing);
            (idx, sum / count)
        })
        .collect();
    scored.sort_by(rank_order);
    scored.truncate(n);
    Ok(MeanMaxOutcome {
        ranked: scored,
        floored,
    })
}
