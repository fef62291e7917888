//! Compute cost of selection plus training.
//!
//! Training costs `6N` FLOPs per token and inference `2N`. Every sample is
//! counted at `tokens_per_sample` tokens (the truncation length). With `N`
//! the trained model size, `N_sel` the selector size, `P` the pool size and
//! `D` the number of selected samples, writing `T` for tokens per sample and
//! `E` for epochs:
//!
//! | method              | FLOPs                                                        |
//! |---------------------|--------------------------------------------------------------|
//! | random              | `E·T·6·N·D`                                                  |
//! | perplexity          | `2·T·2·N_sel·P + E·T·6·N·D`                                  |
//! | ifd                 | `W_p·(T+1)·2·N_sel + W_t·T·6·N·D + 2·T·2·N_sel·P + E·T·6·N·D` |
//! | less                | `C·T·6·N_sel·P + E·T·6·N·D`                                  |
//! | embedding, rds      | `2·T·2·N_sel·P + E·T·6·N·D`                                  |
//!
//! `W_p`/`W_t` are the IFD warm-up pool and training-set sizes and `C` the
//! number of LESS checkpoints. Score post-processing is free. Values are
//! exact integers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TRAIN_FLOPS_PER_TOKEN: u128 = 6;
const INFERENCE_FLOPS_PER_TOKEN: u128 = 2;
/// Leading factor of the pool-scoring inference term.
const POOL_SCORING_FACTOR: u128 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMethod {
    Random,
    Perplexity,
    Ifd,
    Less,
    Embedding,
    Rds,
}

impl CostMethod {
    pub const ALL: [CostMethod; 6] = [
        Self::Random,
        Self::Perplexity,
        Self::Ifd,
        Self::Less,
        Self::Embedding,
        Self::Rds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Perplexity => "perplexity",
            Self::Ifd => "ifd",
            Self::Less => "less",
            Self::Embedding => "embedding",
            Self::Rds => "rds",
        }
    }
}

impl fmt::Display for CostMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Parameters of the model being trained (`N`).
    pub model_params: u64,
    /// Parameters of the selector model; `None` means the trained model.
    pub selector_params: Option<u64>,
    /// Pool size in samples (`P`). Zero drops the pool-scoring terms.
    pub pool_size: u64,
    /// Selected samples (`D`).
    pub selected: u64,
    pub tokens_per_sample: u64,
    pub epochs: u64,
    pub ifd_warmup_pool: u64,
    pub ifd_warmup_train: u64,
    pub less_checkpoints: u64,
}

impl CostModelParams {
    pub fn new(model_params: u64, pool_size: u64, selected: u64) -> Self {
        Self {
            model_params,
            selector_params: None,
            pool_size,
            selected,
            tokens_per_sample: 2048,
            epochs: 2,
            ifd_warmup_pool: 200_000,
            ifd_warmup_train: 1000,
            less_checkpoints: 3,
        }
    }

    pub fn selector(&self) -> u64 {
        self.selector_params.unwrap_or(self.model_params)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_params", self.model_params),
            ("selector_params", self.selector()),
            ("selected", self.selected),
            ("tokens_per_sample", self.tokens_per_sample),
            ("epochs", self.epochs),
            ("ifd_warmup_pool", self.ifd_warmup_pool),
            ("ifd_warmup_train", self.ifd_warmup_train),
            ("less_checkpoints", self.less_checkpoints),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParams(format!("{name} must be positive")));
        }
        if self.pool_size > 0 && self.selected > self.pool_size {
            return Err(Error::InvalidParams(format!(
                "selected {} exceeds pool size {}",
                self.selected, self.pool_size
            )));
        }
        Ok(())
    }
}

fn product(factors: &[u128], what: &'static str) -> Result<u128> {
    factors
        .iter()
        .try_fold(1u128, |acc, &f| acc.checked_mul(f))
        .ok_or(Error::Overflow(what))
}

fn sum(terms: &[u128], what: &'static str) -> Result<u128> {
    terms
        .iter()
        .try_fold(0u128, |acc, &t| acc.checked_add(t))
        .ok_or(Error::Overflow(what))
}

/// Exact FLOPs for `method` under `params`.
pub fn estimate(method: CostMethod, params: &CostModelParams) -> Result<u128> {
    params.validate()?;
    let n = params.model_params as u128;
    let n_sel = params.selector() as u128;
    let p = params.pool_size as u128;
    let d = params.selected as u128;
    let t = params.tokens_per_sample as u128;

    let train = product(
        &[params.epochs as u128, t, TRAIN_FLOPS_PER_TOKEN, n, d],
        "training term",
    )?;
    let pool_scoring = || {
        product(
            &[POOL_SCORING_FACTOR, t, INFERENCE_FLOPS_PER_TOKEN, n_sel, p],
            "pool inference term",
        )
    };
    match method {
        CostMethod::Random => Ok(train),
        CostMethod::Perplexity | CostMethod::Embedding | CostMethod::Rds => {
            sum(&[pool_scoring()?, train], "estimate")
        }
        CostMethod::Ifd => {
            // the warm-up scoring pass counts one extra token per sample
            let warmup_scoring = product(
                &[params.ifd_warmup_pool as u128, t + 1, INFERENCE_FLOPS_PER_TOKEN, n_sel],
                "IFD warm-up scoring term",
            )?;
            let warmup_training = product(
                &[params.ifd_warmup_train as u128, t, TRAIN_FLOPS_PER_TOKEN, n, d],
                "IFD warm-up training term",
            )?;
            sum(&[warmup_scoring, warmup_training, pool_scoring()?, train], "estimate")
        }
        CostMethod::Less => {
            let gradients = product(
                &[params.less_checkpoints as u128, t, TRAIN_FLOPS_PER_TOKEN, n_sel, p],
                "LESS gradient term",
            )?;
            sum(&[gradients, train], "estimate")
        }
    }
}

pub const TSV_HEADER: &str = "method\tN\tN_sel\tP\tD\ttokens_per_sample\tepochs\tflops";

/// One row matching [`TSV_HEADER`].
pub fn tsv_row(method: CostMethod, params: &CostModelParams) -> Result<String> {
    Ok(format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        method,
        params.model_params,
        params.selector(),
        params.pool_size,
        params.selected,
        params.tokens_per_sample,
        params.epochs,
        estimate(method, params)?
    ))
}
