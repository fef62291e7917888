use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use sift_core::corpus::{self, load_query_sets, DataPool, PoolFormat, PoolIdentity, QuerySet};
use sift_core::store::{validate_store, FeatureManifest, FeatureStore, RecordKind};

use crate::args::{usage, Cli, Command};
use crate::config::RunConfig;

mod dedup;
mod embeddings;
mod report;
mod score;
mod select;
mod topk;

pub use report::{flops_table, report_tables};
pub use select::select;

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dedup(a) => dedup::run(&a.resolve()?),
        Command::Validate(a) => validate(&a.resolve()?),
        Command::PoolEmbeddings(a) => embeddings::run(&a.resolve()?),
        Command::Topk(a) => topk::run(&a.resolve()?),
        Command::Score(a) => score::run(&a.resolve()?),
        Command::Select(a) => select::run(&a.resolve()?),
        Command::Flops(a) => report::flops(&a),
        Command::Report(a) => report::report(&a),
    }
}

pub(crate) fn load_pool(cfg: &RunConfig) -> Result<DataPool> {
    let path = cfg.require_pool()?;
    Ok(corpus::load_pool(path, PoolFormat::Jsonl)?)
}

pub(crate) fn load_tasks(cfg: &RunConfig) -> Result<Vec<QuerySet>> {
    if cfg.tasks.is_empty() {
        return Err(usage("no tasks configured ([[tasks]] or --task)"));
    }
    cfg.check_tasks()?;
    let paths: Vec<(String, &Path)> = cfg
        .tasks
        .iter()
        .map(|t| (t.id.clone(), t.queries.as_path()))
        .collect();
    Ok(load_query_sets(&paths)?)
}

/// Open a store after checking it covers `identity`; any problem is a data
/// error listing every issue.
pub(crate) fn open_checked(manifest_path: &Path, identity: &PoolIdentity, label: &str) -> Result<FeatureStore> {
    let store = FeatureStore::open(manifest_path)?;
    let report = validate_store(&store.manifest, &store.base, identity);
    if !report.is_ok() {
        let issues: Vec<String> = report.issues.iter().map(|i| format!("  {i}")).collect();
        bail!(
            "feature store {} for {label} failed validation:\n{}",
            manifest_path.display(),
            issues.join("\n")
        );
    }
    Ok(store)
}

/// Where a dataset's embeddings live: the configured store itself if it has
/// embedding records, else the output of `pool-embeddings`.
pub(crate) struct EmbeddingSource {
    pub path: PathBuf,
    /// Path as recorded in manifests: the configured one, or relative to
    /// `out_dir` for derived stores.
    pub label: String,
}

pub(crate) fn derived_embeddings(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join("embeddings").join(name).join("manifest.json")
}

pub(crate) fn embedding_source(features: &Path, out_dir: &Path, name: &str) -> Result<EmbeddingSource> {
    let manifest = FeatureManifest::load(features)?;
    if manifest.has(RecordKind::Embedding) {
        return Ok(EmbeddingSource {
            path: features.to_path_buf(),
            label: features.display().to_string(),
        });
    }
    let derived = derived_embeddings(out_dir, name);
    if derived.exists() {
        return Ok(EmbeddingSource {
            path: derived,
            label: format!("embeddings/{name}/manifest.json"),
        });
    }
    bail!(
        "{} has no embedding records and {} does not exist; run `sift pool-embeddings` first",
        features.display(),
        derived.display()
    )
}

fn validate(cfg: &RunConfig) -> Result<()> {
    let pool = load_pool(cfg)?;
    let mut stores: Vec<(String, PathBuf, PoolIdentity)> = Vec::new();
    if let Some(f) = &cfg.features {
        stores.push(("pool".into(), f.clone(), pool.identity()));
    }
    if !cfg.tasks.is_empty() {
        for (task, qs) in cfg.tasks.iter().zip(load_tasks(cfg)?) {
            stores.push((task.id.clone(), task.features.clone(), qs.identity()));
        }
    }
    if stores.is_empty() {
        return Err(usage("nothing to validate: set `features` or [[tasks]]"));
    }
    let mut out = String::from("store\tstatus\tkind\tdetail\n");
    let mut failed = 0;
    for (name, path, identity) in &stores {
        let manifest = FeatureManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let report = validate_store(&manifest, &base, identity);
        failed += usize::from(!report.is_ok());
        for line in report.to_tsv().lines().skip(1) {
            out.push_str(&format!("{name}\t{line}\n"));
        }
    }
    print!("{out}");
    if let Some(dir) = &cfg.out_dir {
        write_text(&dir.join("validation.tsv"), &out)?;
    }
    if failed > 0 {
        bail!("{failed} of {} feature stores failed validation", stores.len());
    }
    Ok(())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::io::write_atomic(path, text.as_bytes())
}
