use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use sift_core::pooling::{PoolingKind, SpanKind};
use sift_core::scorers::PerplexityBasis;
use sift_core::selection::{Aggregation, SelectionMethod};

use crate::config::{RunConfig, TaskConfig};
use crate::UsageError;

#[derive(Debug, Parser)]
#[command(name = "sift", version, about = "Deterministic instruction-tuning data selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drop exact duplicate samples, keeping first occurrences.
    Dedup(RunArgs),
    /// Check feature stores against the pool and query sets.
    Validate(RunArgs),
    /// Pool hidden-state dumps into embedding shards.
    PoolEmbeddings(RunArgs),
    /// Cosine top-k lists for every task's queries.
    Topk(RunArgs),
    /// Score the pool for the configured method.
    Score(RunArgs),
    /// Run a selection method and write its manifest.
    Select(RunArgs),
    /// Estimate selection + training FLOPs.
    Flops(FlopsArgs),
    /// Per-source composition and FLOPs of selection manifests.
    Report(ReportArgs),
}

/// Parse a flag the way its config key is parsed, accepting `-` and `_`
/// interchangeably.
fn config_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    let parse = |v: String| serde_json::from_value::<T>(serde_json::Value::String(v));
    parse(s.to_string())
        .or_else(|e| parse(s.replace('-', "_")).or_else(|_| parse(s.replace('_', "-"))).map_err(|_| e))
        .map_err(|e| e.to_string())
}

fn task_spec(s: &str) -> Result<TaskConfig, String> {
    let (id, rest) = s
        .split_once('=')
        .ok_or_else(|| format!("expected ID=QUERIES,FEATURES, got {s:?}"))?;
    let (queries, features) = rest
        .split_once(',')
        .ok_or_else(|| format!("expected ID=QUERIES,FEATURES, got {s:?}"))?;
    if id.is_empty() {
        return Err("empty task id".into());
    }
    Ok(TaskConfig {
        id: id.to_string(),
        queries: queries.into(),
        features: features.into(),
    })
}

/// Flags shared by the pipeline subcommands; each mirrors a config key.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON-lines data pool.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Feature manifest of the pool.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Directory for every artifact the command writes.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// random, balanced-random, length, top-ppl, mid-ppl, ifd, less, embedding or rds.
    #[arg(long, value_parser = config_enum::<SelectionMethod>)]
    pub method: Option<SelectionMethod>,
    /// Number of samples to select.
    #[arg(long)]
    pub n: Option<usize>,
    /// Neighbours kept per query; defaults to twice what round-robin needs.
    #[arg(long)]
    pub k: Option<usize>,
    /// Seed for the random baselines.
    #[arg(long)]
    pub seed: Option<u64>,
    /// How several tasks combine: round_robin or mean_max.
    #[arg(long, value_parser = config_enum::<Aggregation>)]
    pub aggregation: Option<Aggregation>,
    /// Score for candidates missing from a task's lists (default: that task's minimum).
    #[arg(long)]
    pub mean_max_floor: Option<f64>,
    /// Drop samples with IFD >= 1 (default true).
    #[arg(long)]
    pub ifd_filter: Option<bool>,
    /// full_sequence or response_only.
    #[arg(long, value_parser = config_enum::<PerplexityBasis>)]
    pub perplexity_basis: Option<PerplexityBasis>,
    /// Rows per embedding shard written by pool-embeddings.
    #[arg(long)]
    pub shard_size: Option<usize>,
    /// Also write the selected samples as JSON lines.
    #[arg(long)]
    pub materialize: Option<bool>,
    /// Read `<task>.bin` lists from here instead of scanning the pool.
    #[arg(long)]
    pub topk_dir: Option<PathBuf>,
    /// weighted, uniform or eos_only.
    #[arg(long, value_parser = config_enum::<PoolingKind>)]
    pub pooling_kind: Option<PoolingKind>,
    /// full, prompt_only or label_only.
    #[arg(long, value_parser = config_enum::<SpanKind>)]
    pub pooling_span: Option<SpanKind>,
    /// `ID=QUERIES,FEATURES`; repeat per task. Replaces the config's tasks.
    #[arg(long = "task", value_parser = task_spec)]
    pub tasks: Vec<TaskConfig>,
}

impl RunArgs {
    /// Config file (if any) with every given flag applied on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = Some(v.clone()); })*
            };
        }
        set!(pool, features, out_dir, method, n, k, seed, aggregation, mean_max_floor,
             ifd_filter, perplexity_basis, shard_size, materialize, topk_dir);
        if let Some(kind) = self.pooling_kind {
            cfg.pooling.kind = Some(kind);
        }
        if let Some(span) = self.pooling_span {
            cfg.pooling.span = Some(span);
        }
        if !self.tasks.is_empty() {
            cfg.tasks = self.tasks.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct FlopsParamArgs {
    /// Trained model size N.
    #[arg(long)]
    pub model_params: Option<u64>,
    /// Selector model size; defaults to N.
    #[arg(long)]
    pub selector_params: Option<u64>,
    #[arg(long)]
    pub tokens_per_sample: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
}

impl FlopsParamArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let f = &mut cfg.flops;
        f.model_params = self.model_params.or(f.model_params);
        f.selector_params = self.selector_params.or(f.selector_params);
        f.tokens_per_sample = self.tokens_per_sample.or(f.tokens_per_sample);
        f.epochs = self.epochs.or(f.epochs);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cost formula or selection method; all formulas when omitted.
    #[arg(long)]
    pub method: Option<String>,
    /// Pool size P; defaults to the configured pool's length.
    #[arg(long)]
    pub pool_size: Option<u64>,
    /// Selected samples D; defaults to the configured n.
    #[arg(long)]
    pub selected: Option<u64>,
    #[command(flatten)]
    pub params: FlopsParamArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ReportArgs {
    /// Selection manifests to summarize.
    #[arg(required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write `report.tsv` here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub params: FlopsParamArgs,
}

pub(crate) fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}
