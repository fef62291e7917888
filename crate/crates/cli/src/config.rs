//! Run configuration: one TOML file, every key overridable by a flag.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sift_core::pooling::{PoolingKind, PoolingStrategy, SpanKind};
use sift_core::scorers::PerplexityBasis;
use sift_core::selection::{Aggregation, MeanMaxFloor, SelectionMethod};

use crate::UsageError;

pub const DEFAULT_SHARD_SIZE: usize = 16_384;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub id: String,
    /// JSON-lines query set.
    pub queries: PathBuf,
    /// Feature manifest for the query set.
    pub features: PathBuf,
}

impl TaskConfig {
    /// Directory name for artifacts derived from this task's features.
    pub fn store_name(&self) -> String {
        format!("task-{}", self.id)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingConfig {
    #[serde(default)]
    pub kind: Option<PoolingKind>,
    #[serde(default)]
    pub span: Option<SpanKind>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsConfig {
    pub model_params: Option<u64>,
    pub selector_params: Option<u64>,
    pub tokens_per_sample: Option<u64>,
    pub epochs: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pool: Option<PathBuf>,
    /// Feature manifest for the pool.
    pub features: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub method: Option<SelectionMethod>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub aggregation: Option<Aggregation>,
    pub mean_max_floor: Option<f64>,
    pub ifd_filter: Option<bool>,
    pub perplexity_basis: Option<PerplexityBasis>,
    pub shard_size: Option<usize>,
    pub materialize: Option<bool>,
    /// Precomputed top-k lists (`<task>.bin`) to use instead of scanning.
    pub topk_dir: Option<PathBuf>,
    #[serde(default)]
    pub pooling: PoolingConfig,
    #[serde(default)]
    pub flops: FlopsConfig,
    #[serde(default)]
    pub tasks: Vec<TaskConfig>,
}

impl RunConfig {
    /// Parse a config file; relative paths are taken relative to its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.pool, &mut self.features, &mut self.out_dir, &mut self.topk_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for t in &mut self.tasks {
            fix(&mut t.queries);
            fix(&mut t.features);
        }
    }

    pub fn pooling_strategy(&self) -> PoolingStrategy {
        let default = PoolingStrategy::default();
        PoolingStrategy::new(
            self.pooling.kind.unwrap_or(default.kind),
            self.pooling.span.unwrap_or(default.span),
        )
    }

    pub fn mean_max_floor(&self) -> MeanMaxFloor {
        self.mean_max_floor
            .map_or(MeanMaxFloor::TaskMinimum, MeanMaxFloor::Value)
    }

    pub fn shard_size(&self) -> Result<usize> {
        match self.shard_size.unwrap_or(DEFAULT_SHARD_SIZE) {
            0 => Err(UsageError("shard_size must be positive".into()).into()),
            s => Ok(s),
        }
    }

    pub fn require_pool(&self) -> Result<&Path> {
        require(&self.pool, "pool")
    }

    pub fn require_features(&self) -> Result<&Path> {
        require(&self.features, "features")
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        require(&self.out_dir, "out_dir")
    }

    pub fn require_method(&self) -> Result<SelectionMethod> {
        self.method
            .ok_or_else(|| UsageError("missing `method` (config key or --method)".into()).into())
    }

    pub fn require_n(&self) -> Result<usize> {
        match self.n {
            Some(0) => Err(UsageError("n must be positive".into()).into()),
            Some(n) => Ok(n),
            None => Err(UsageError("missing `n` (config key or --n)".into()).into()),
        }
    }

    /// Task ids name output files, so they must be unique and file-safe.
    pub fn check_tasks(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            let safe = !t.id.is_empty()
                && t.id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
                && !t.id.starts_with('.');
            if !safe {
                return Err(UsageError(format!(
                    "task id {:?} must be non-empty ASCII letters, digits, '-', '_' or '.'",
                    t.id
                ))
                .into());
            }
            if !seen.insert(t.id.as_str()) {
                return Err(UsageError(format!("task id {} declared twice", t.id)).into());
            }
        }
        Ok(())
    }

    /// Method/parameter compatibility, checked before any data is read.
    pub fn check_selection(&self) -> Result<SelectionMethod> {
        let method = self.require_method()?;
        self.require_n()?;
        self.require_pool()?;
        let usage = |m: String| -> Result<SelectionMethod> { Err(UsageError(m).into()) };
        if method.is_query_driven() {
            if self.tasks.is_empty() {
                return usage(format!("method {method} needs at least one [[tasks]] entry"));
            }
            self.require_features()?;
            // Derived embedding stores are looked up under out_dir.
            self.require_out_dir()?;
            self.check_tasks()?;
            if self.k == Some(0) {
                return usage("k must be positive".into());
            }
        } else {
            if self.k.is_some() {
                return usage(format!("k only applies to query-driven methods, not {method}"));
            }
            if self.aggregation.is_some() {
                return usage(format!("aggregation only applies to query-driven methods, not {method}"));
            }
        }
        if method.needs_losses() {
            self.require_features()?;
        }
        if self.ifd_filter.is_some() && method != SelectionMethod::Ifd {
            return usage(format!("ifd_filter does not apply to {method}"));
        }
        if self.perplexity_basis.is_some()
            && !matches!(method, SelectionMethod::TopPpl | SelectionMethod::MidPpl)
        {
            return usage(format!("perplexity_basis does not apply to {method}"));
        }
        if self.mean_max_floor.is_some() && self.aggregation != Some(Aggregation::MeanMax) {
            return usage("mean_max_floor requires aggregation = \"mean_max\"".into());
        }
        if matches!(method, SelectionMethod::Random | SelectionMethod::BalancedRandom) && self.seed.is_none() {
            return usage(format!("method {method} needs a seed"));
        }
        Ok(method)
    }
}

fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| UsageError(format!("missing `{key}` (config key or --{})", key.replace('_', "-"))).into())
}
