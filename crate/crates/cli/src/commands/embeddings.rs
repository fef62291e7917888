use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use sift_core::corpus::PoolIdentity;
use sift_core::pooling::{pool, PoolingStrategy};
use sift_core::store::{read_hidden_states, write_embeddings, FeatureManifest, RecordKind, ShardEntry};
use sift_core::Matrix;

use super::{derived_embeddings, load_pool, load_tasks, open_checked};
use crate::config::RunConfig;
use crate::io::StagedDir;

/// Pool the hidden-state dumps of the pool and of every task into embedding
/// stores under `out_dir/embeddings/<name>/`.
pub(super) fn run(cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.require_out_dir()?;
    let strategy = cfg.pooling_strategy();
    let shard_size = cfg.shard_size()?;

    let mut jobs: Vec<(String, &Path, PoolIdentity)> = Vec::new();
    if let Some(features) = &cfg.features {
        jobs.push(("pool".into(), features, load_pool(cfg)?.identity()));
    }
    if !cfg.tasks.is_empty() {
        for (t, qs) in cfg.tasks.iter().zip(load_tasks(cfg)?) {
            jobs.push((t.store_name(), &t.features, qs.identity()));
        }
    }
    if jobs.is_empty() {
        return Err(crate::args::usage("nothing to pool: set `features` or [[tasks]]"));
    }

    println!("store\tvectors\tdim\tshards\tpath");
    for (name, features, identity) in &jobs {
        let target = derived_embeddings(out_dir, name);
        let written = pool_store(features, identity, strategy, shard_size, &target)
            .with_context(|| format!("pooling {name}"))?;
        println!(
            "{name}\t{}\t{}\t{}\t{}",
            identity.len,
            written.dim,
            written.shards.len(),
            target.display()
        );
    }
    Ok(())
}

/// Stream one hidden-state store into embedding shards of `shard_size` rows.
/// The output directory only appears once every shard is written.
pub fn pool_store(
    features: &Path,
    identity: &PoolIdentity,
    strategy: PoolingStrategy,
    shard_size: usize,
    target_manifest: &Path,
) -> Result<FeatureManifest> {
    let store = open_checked(features, identity, "pooling")?;
    if !store.manifest.has(RecordKind::HiddenState) {
        bail!("{} has no hidden-state records", features.display());
    }
    let dim = store.manifest.dim;
    let target_dir = target_manifest
        .parent()
        .context("embedding manifest path has no parent")?;
    let staged = StagedDir::new(target_dir)?;

    let mut entries: Vec<&ShardEntry> = store.manifest.shards_of(RecordKind::HiddenState);
    entries.sort_by_key(|e| e.start);

    let mut out = FeatureManifest::new(
        store.manifest.pool_fingerprint.clone(),
        store.manifest.extractor_model.clone(),
        dim,
    );
    out.max_tokens = store.manifest.max_tokens;
    let mut buffer = Matrix::empty(dim);
    let mut buffer_start = 0usize;
    let mut next = 0usize;

    let mut flush = |buffer: &mut Matrix<f32>, buffer_start: &mut usize| -> Result<()> {
        if buffer.is_empty() {
            return Ok(());
        }
        let rel = format!("emb-{:06}.bin", out.shards.len());
        write_embeddings(&staged.path().join(&rel), *buffer_start, buffer)?;
        out.shards.push(ShardEntry {
            kind: RecordKind::Embedding,
            path: rel.into(),
            start: *buffer_start,
            count: buffer.rows(),
        });
        *buffer_start += buffer.rows();
        *buffer = Matrix::empty(dim);
        Ok(())
    };

    for entry in entries {
        let records = read_hidden_states(&store.shard_path(entry))?;
        let pooled: Vec<Vec<f32>> = records
            .par_iter()
            .map(|r| pool(&r.states, &r.spans, strategy, r.pool_index))
            .collect::<sift_core::Result<_>>()?;
        for (r, v) in records.iter().zip(pooled) {
            if r.pool_index != next {
                bail!("hidden states out of order: expected sample {next}, found {}", r.pool_index);
            }
            buffer.push_row(&v)?;
            next += 1;
            if buffer.rows() == shard_size {
                flush(&mut buffer, &mut buffer_start)?;
            }
        }
    }
    flush(&mut buffer, &mut buffer_start)?;
    if next != identity.len {
        bail!("pooled {next} samples, expected {}", identity.len);
    }
    out.save(&staged.path().join("manifest.json"))?;
    staged.commit()?;
    Ok(out)
}
