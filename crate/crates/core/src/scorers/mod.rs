//! Query-free scoring and selection over the whole pool.
//!
//! All top-n style selections rank by score descending and break ties by
//! ascending pool index, so results never depend on record order.

mod random;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use random::{balanced_budgets, balanced_random_select, random_select, BalancedSelection};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::similarity::rank_order;
use crate::store::LossRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    /// Mean per-token NLL over the full rendered sample.
    Perplexity = 1,
    /// Mean per-token NLL over the answer tokens only.
    ResponsePerplexity = 2,
    Ifd = 3,
    Length = 4,
}

impl ScoreMethod {
    pub fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            1 => Self::Perplexity,
            2 => Self::ResponsePerplexity,
            3 => Self::Ifd,
            4 => Self::Length,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Perplexity => "perplexity",
            Self::ResponsePerplexity => "response_perplexity",
            Self::Ifd => "ifd",
            Self::Length => "length",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    ZeroAnswerTokens,
    ZeroUnconditionalLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub pool_index: usize,
    pub reason: ExclusionReason,
}

/// One score per scored pool index, plus the indices that could not be
/// scored and why.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarScoreTable<T> {
    pub method: ScoreMethod,
    pub entries: Vec<(usize, T)>,
    pub excluded: Vec<Exclusion>,
}

impl<T: Scalar> ScalarScoreTable<T> {
    pub fn new(method: ScoreMethod, entries: Vec<(usize, T)>) -> Result<Self> {
        if let Some(&(i, _)) = entries.iter().find(|e| !e.1.is_finite()) {
            return Err(Error::NonFinite {
                role: "score",
                index: i,
            });
        }
        Ok(Self {
            method,
            entries,
            excluded: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Apply `f` to every score.
    pub fn map_scores(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            method: self.method,
            entries: self.entries.iter().map(|&(i, s)| (i, f(s))).collect(),
            excluded: self.excluded.clone(),
        }
    }

    /// `pool_index<TAB>score` rows with a header; exclusions follow with the
    /// reason in place of a score.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("pool_index\t{}\n", self.method.name());
        for (i, s) in &self.entries {
            out.push_str(&format!("{i}\t{s}\n"));
        }
        for e in &self.excluded {
            let reason = match e.reason {
                ExclusionReason::ZeroAnswerTokens => "excluded:zero_answer_tokens",
                ExclusionReason::ZeroUnconditionalLoss => "excluded:zero_unconditional_loss",
            };
            out.push_str(&format!("{}\t{reason}\n", e.pool_index));
        }
        out
    }
}

fn cast<T: Scalar>(v: f32) -> T {
    T::from_f32(v).expect("f32 converts to any scalar")
}

fn ensure_available(requested: usize, available: usize) -> Result<()> {
    if requested > available {
        return Err(Error::NotEnough {
            requested,
            available,
        });
    }
    Ok(())
}

/// Which tokens the perplexity score averages over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerplexityBasis {
    #[default]
    FullSequence,
    ResponseOnly,
}

/// Mean per-token NLL over the full rendered sample.
pub fn perplexity_scores<T: Scalar>(losses: &[LossRecord]) -> Result<ScalarScoreTable<T>> {
    perplexity_scores_with(losses, PerplexityBasis::FullSequence)
}

pub fn perplexity_scores_with<T: Scalar>(
    losses: &[LossRecord],
    basis: PerplexityBasis,
) -> Result<ScalarScoreTable<T>> {
    let mut entries = Vec::with_capacity(losses.len());
    for r in losses {
        let (sum, count) = match basis {
            PerplexityBasis::FullSequence => (r.full_nll_sum, r.full_token_count),
            PerplexityBasis::ResponseOnly => (r.answer_cond_nll_sum, r.answer_token_count),
        };
        if count == 0 {
            return Err(Error::ZeroTokenCount {
                pool_index: r.pool_index,
            });
        }
        let count = T::from_u32(count).expect("token count fits the scalar type");
        entries.push((r.pool_index, cast::<T>(sum) / count));
    }
    let method = match basis {
        PerplexityBasis::FullSequence => ScoreMethod::Perplexity,
        PerplexityBasis::ResponseOnly => ScoreMethod::ResponsePerplexity,
    };
    ScalarScoreTable::new(method, entries)
}

/// Answer loss given the question over answer loss alone.
///
/// Both terms are means over the same answer tokens, so the ratio reduces to
/// the ratio of sums. Records with no answer tokens or a zero unconditional
/// loss are excluded and listed in the table.
pub fn ifd_scores<T: Scalar>(losses: &[LossRecord]) -> Result<ScalarScoreTable<T>> {
    let mut entries = Vec::with_capacity(losses.len());
    let mut excluded = Vec::new();
    for r in losses {
        let reason = if r.answer_token_count == 0 {
            Some(ExclusionReason::ZeroAnswerTokens)
        } else if r.answer_uncond_nll_sum <= 0.0 {
            Some(ExclusionReason::ZeroUnconditionalLoss)
        } else {
            None
        };
        match reason {
            Some(reason) => excluded.push(Exclusion {
                pool_index: r.pool_index,
                reason,
            }),
            None => entries.push((
                r.pool_index,
                cast::<T>(r.answer_cond_nll_sum) / cast::<T>(r.answer_uncond_nll_sum),
            )),
        }
    }
    let mut table = ScalarScoreTable::new(ScoreMethod::Ifd, entries)?;
    table.excluded = excluded;
    Ok(table)
}

fn ranked<T: Scalar>(entries: &[(usize, T)]) -> Vec<(usize, T)> {
    let mut v = entries.to_vec();
    v.sort_by(rank_order);
    v
}

/// The `n` highest scores, best first.
pub fn select_top_ppl<T: Scalar>(table: &ScalarScoreTable<T>, n: usize) -> Result<Vec<usize>> {
    ensure_available(n, table.len())?;
    Ok(ranked(&table.entries).into_iter().take(n).map(|e| e.0).collect())
}

/// The length-`n` window centred in the ascending score order, starting at
/// offset `floor((len - n) / 2)`. Output is in ascending score order.
pub fn select_mid_ppl<T: Scalar>(table: &ScalarScoreTable<T>, n: usize) -> Result<Vec<usize>> {
    ensure_available(n, table.len())?;
    let mut v = table.entries.clone();
    v.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let offset = (v.len() - n) / 2;
    Ok(v[offset..offset + n].iter().map(|e| e.0).collect())
}

/// Highest IFD scores; with `filter_ge_one`, scores of 1 or more are dropped
/// first.
pub fn select_ifd<T: Scalar>(
    table: &ScalarScoreTable<T>,
    n: usize,
    filter_ge_one: bool,
) -> Result<Vec<usize>> {
    let eligible: Vec<(usize, T)> = table
        .entries
        .iter()
        .copied()
        .filter(|&(_, s)| !filter_ge_one || s < T::one())
        .collect();
    if n > eligible.len() {
        return Err(Error::InsufficientEligible {
            requested: n,
            eligible: eligible.len(),
        });
    }
    Ok(ranked(&eligible).into_iter().take(n).map(|e| e.0).collect())
}

/// The `n` longest samples; `token_counts[i]` belongs to pool index `i`.
pub fn select_length(token_counts: &[u32], n: usize) -> Result<Vec<usize>> {
    ensure_available(n, token_counts.len())?;
    let mut idx: Vec<usize> = (0..token_counts.len()).collect();
    idx.sort_by(|&a, &b| token_counts[b].cmp(&token_counts[a]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

/// Full-sequence token counts in pool order.
pub fn token_counts(losses: &[LossRecord]) -> Vec<u32> {
    losses.iter().map(|r| r.full_token_count).collect()
}
