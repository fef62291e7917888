//! Per-sample embeddings from last-layer hidden states.
//!
//! The default strategy weights token `i` (1-based) of an `L`-token span by
//! `i / (L(L+1)/2)`, so later tokens, which attend to more of the sequence
//! under a causal mask, count more. Uniform mean pooling and last-token
//! ("EOS only") pooling are kept for ablations, each composable with a
//! prompt-only or answer-only span restriction.

use std::fmt;
use std::ops::Range;

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    #[default]
    Weighted,
    Uniform,
    EosOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    #[default]
    Full,
    PromptOnly,
    LabelOnly,
}

impl fmt::Display for SpanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpanKind::Full => "full",
            SpanKind::PromptOnly => "prompt",
            SpanKind::LabelOnly => "answer",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolingStrategy {
    pub kind: PoolingKind,
    pub span: SpanKind,
}

impl PoolingStrategy {
    pub fn new(kind: PoolingKind, span: SpanKind) -> Self {
        Self { kind, span }
    }
}

/// Token boundaries of the prompt and the answer within a rendered sample.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSpans {
    pub prompt: Range<usize>,
    pub answer: Range<usize>,
}

impl TokenSpans {
    /// Whole sequence treated as prompt.
    pub fn prompt_only(len: usize) -> Self {
        Self {
            prompt: 0..len,
            answer: len..len,
        }
    }

    /// Spans must be ordered, disjoint and inside `0..len`.
    pub fn check(&self, pool_index: usize, len: usize) -> Result<()> {
        let bad = |message: String| Err(Error::InvalidSpans { pool_index, message });
        if self.prompt.start > self.prompt.end || self.answer.start > self.answer.end {
            return bad(format!("reversed span {:?} / {:?}", self.prompt, self.answer));
        }
        if self.prompt.end > self.answer.start {
            return bad(format!(
                "prompt {:?} overlaps or follows answer {:?}",
                self.prompt, self.answer
            ));
        }
        if self.answer.end > len {
            return bad(format!("answer {:?} exceeds {len} tokens", self.answer));
        }
        Ok(())
    }

    pub fn select(&self, span: SpanKind, len: usize) -> Range<usize> {
        match span {
            SpanKind::Full => 0..len,
            SpanKind::PromptOnly => self.prompt.clone(),
            SpanKind::LabelOnly => self.answer.clone(),
        }
    }
}

/// Weights `i / sum(1..=len)` for `i = 1..=len`.
///
/// Generic over any numeric field so the weights can be checked in exact
/// rational arithmetic as well as in floating point.
pub fn position_weights<T: Num + Clone>(len: usize) -> Result<Vec<T>> {
    if len == 0 {
        return Err(Error::ZeroLength);
    }
    let mut positions = Vec::with_capacity(len);
    let mut i = T::zero();
    let mut total = T::zero();
    for _ in 0..len {
        i = i + T::one();
        total = total + i.clone();
        positions.push(i.clone());
    }
    Ok(positions.into_iter().map(|p| p / total.clone()).collect())
}

/// Pool `hidden` (`L x dim`) down to one vector.
///
/// Positions are re-indexed from 1 inside the selected span, so weighted
/// pooling over `a..b` is exactly `position_weights(b - a)` applied to rows
/// `a..b`. States are pooled raw; normalization happens at scoring time.
pub fn pool<T: Scalar>(
    hidden: &Matrix<T>,
    spans: &TokenSpans,
    strategy: PoolingStrategy,
    pool_index: usize,
) -> Result<Vec<T>> {
    let len = hidden.rows();
    if len == 0 {
        return Err(Error::ZeroLength);
    }
    spans.check(pool_index, len)?;
    let range = spans.select(strategy.span, len);
    if range.is_empty() {
        return Err(Error::EmptySpan {
            pool_index,
            span: strategy.span.to_string(),
        });
    }
    let rows = range.clone().map(|i| hidden.row(i));
    let mut out = vec![T::zero(); hidden.dim()];
    match strategy.kind {
        PoolingKind::Weighted => {
            let weights = position_weights::<T>(range.len())?;
            for (row, &w) in rows.zip(&weights) {
                for (o, &h) in out.iter_mut().zip(row) {
                    *o = *o + w * h;
                }
            }
        }
        PoolingKind::Uniform => {
            for row in rows {
                for (o, &h) in out.iter_mut().zip(row) {
                    *o = *o + h;
                }
            }
            let n = T::from_usize(range.len()).expect("span length fits the scalar type");
            for o in &mut out {
                *o = *o / n;
            }
        }
        PoolingKind::EosOnly => out.copy_from_slice(hidden.row(range.end - 1)),
    }
    Ok(out)
}
