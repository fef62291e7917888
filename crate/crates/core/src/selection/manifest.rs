use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::MeanMaxFloor;
use crate::corpus::DataPool;
use crate::error::{Error, Result};
use crate::flops::CostMethod;
use crate::pooling::PoolingStrategy;
use crate::scorers::PerplexityBasis;

/// The nine selection methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMethod {
    Random,
    BalancedRandom,
    Length,
    TopPpl,
    MidPpl,
    Ifd,
    /// Round-robin over externally produced gradient features.
    Less,
    /// Round-robin over embeddings from an external embedding model.
    Embedding,
    /// Round-robin over position-weighted pooled hidden states.
    Rds,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 9] = [
        Self::Random,
        Self::BalancedRandom,
        Self::Length,
        Self::TopPpl,
        Self::MidPpl,
        Self::Ifd,
        Self::Less,
        Self::Embedding,
        Self::Rds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::BalancedRandom => "balanced-random",
            Self::Length => "length",
            Self::TopPpl => "top-ppl",
            Self::MidPpl => "mid-ppl",
            Self::Ifd => "ifd",
            Self::Less => "less",
            Self::Embedding => "embedding",
            Self::Rds => "rds",
        }
    }

    /// Needs query sets and pool/query feature vectors.
    pub fn is_query_driven(self) -> bool {
        matches!(self, Self::Less | Self::Embedding | Self::Rds)
    }

    /// Needs loss records.
    pub fn needs_losses(self) -> bool {
        matches!(self, Self::Length | Self::TopPpl | Self::MidPpl | Self::Ifd)
    }

    /// Cost formula used to account for this method. Length selection only
    /// counts tokens, which costs nothing next to training.
    pub fn cost_method(self) -> CostMethod {
        match self {
            Self::Random | Self::BalancedRandom | Self::Length => CostMethod::Random,
            Self::TopPpl | Self::MidPpl => CostMethod::Perplexity,
            Self::Ifd => CostMethod::Ifd,
            Self::Less => CostMethod::Less,
            Self::Embedding => CostMethod::Embedding,
            Self::Rds => CostMethod::Rds,
        }
    }
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    RoundRobin,
    MeanMax,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionParameters {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling: Option<PoolingStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<Aggregation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_max_floor: Option<MeanMaxFloor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ifd_filter: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity_basis: Option<PerplexityBasis>,
    /// Task visiting order for round-robin.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub task_order: Vec<String>,
    /// Model that produced the features (or the loss checkpoint).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureReference {
    pub path: String,
    /// SHA-256 of the feature manifest file.
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCount {
    pub task: String,
    pub count: usize,
}

/// Reproducibility record of one selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub method: SelectionMethod,
    pub parameters: SelectionParameters,
    pub pool_fingerprint: String,
    pub pool_size: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_manifests: Vec<FeatureReference>,
    pub per_source_counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_task_counts: Vec<TaskCount>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Selected pool indices in selection order.
    pub selected: Vec<usize>,
}

impl SelectionManifest {
    /// Fails if `selected` repeats an index or points outside the pool.
    pub fn new(
        method: SelectionMethod,
        parameters: SelectionParameters,
        pool: &DataPool,
        selected: Vec<usize>,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(selected.len());
        for &i in &selected {
            if i >= pool.len() {
                return Err(Error::InvalidParams(format!(
                    "selected index {i} outside a pool of {}",
                    pool.len()
                )));
            }
            if !seen.insert(i) {
                return Err(Error::InvalidParams(format!("index {i} selected twice")));
            }
        }
        Ok(Self {
            method,
            parameters,
            pool_fingerprint: pool.fingerprint().to_string(),
            pool_size: pool.len(),
            feature_manifests: Vec::new(),
            per_source_counts: pool.count_sources(&selected),
            per_task_counts: Vec::new(),
            warnings: Vec::new(),
            selected,
        })
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(path: &Path, text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(path, &text)
    }
}
