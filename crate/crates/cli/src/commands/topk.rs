use std::path::Path;

use anyhow::{bail, Context, Result};
use sift_core::corpus::{DataPool, QuerySet};
use sift_core::selection::FeatureReference;
use sift_core::similarity::cosine_topk;
use sift_core::store::{read_topk, write_topk};
use sift_core::{corpus, Matrix, TopK};

use super::{embedding_source, load_pool, load_tasks, open_checked, write_text};
use crate::config::RunConfig;

/// k when none is configured: twice the picks each round-robin participant
/// (query, or task when there are several) needs, capped at the pool.
pub fn default_k(n: usize, tasks: &[QuerySet], pool_len: usize) -> usize {
    let participants = match tasks {
        [only] => only.len(),
        many => many.len(),
    };
    (2 * n.div_ceil(participants.max(1))).clamp(1, pool_len.max(1))
}

pub(crate) struct TaskLists {
    pub per_task: Vec<(String, Vec<TopK>)>,
    pub references: Vec<FeatureReference>,
}

fn reference(path: &Path, label: String) -> Result<FeatureReference> {
    Ok(FeatureReference {
        path: label,
        fingerprint: corpus::fingerprint_file(path)?,
    })
}

/// Top-k lists per task, scanning the pool's embeddings once for all tasks'
/// queries together. With `topk_dir` set, previously written lists are read
/// instead.
pub(crate) fn task_topk(cfg: &RunConfig, pool: &DataPool, tasks: &[QuerySet], k: usize) -> Result<TaskLists> {
    let out_dir = cfg.require_out_dir()?;
    let features = cfg.require_features()?;
    let mut references = Vec::new();

    let pool_src = embedding_source(features, out_dir, "pool")?;
    references.push(reference(&pool_src.path, pool_src.label.clone())?);
    let mut task_srcs = Vec::new();
    for t in &cfg.tasks {
        let src = embedding_source(&t.features, out_dir, &t.store_name())?;
        references.push(reference(&src.path, src.label.clone())?);
        task_srcs.push(src);
    }

    if let Some(dir) = &cfg.topk_dir {
        let mut per_task = Vec::new();
        for (t, qs) in cfg.tasks.iter().zip(tasks) {
            let path = dir.join(format!("{}.bin", t.id));
            let lists = read_topk(&path)?;
            if lists.len() != qs.len() {
                bail!("{} holds {} lists but task {} has {} queries", path.display(), lists.len(), t.id, qs.len());
            }
            if let Some(short) = lists.iter().find(|l| l.k < k.min(pool.len())) {
                bail!("{} was built with k = {}, below the required {k}", path.display(), short.k);
            }
            per_task.push((t.id.clone(), lists));
        }
        return Ok(TaskLists { per_task, references });
    }

    let pool_store = open_checked(&pool_src.path, &pool.identity(), "the pool")?;
    let mut all_queries = Matrix::empty(pool_store.manifest.dim);
    let mut bounds = Vec::new();
    for ((t, qs), src) in cfg.tasks.iter().zip(tasks).zip(&task_srcs) {
        let store = open_checked(&src.path, &qs.identity(), &format!("task {}", t.id))?;
        let q = store.read_all_embeddings()?;
        if q.dim() != all_queries.dim() {
            bail!("task {} embeddings have dim {}, pool has {}", t.id, q.dim(), all_queries.dim());
        }
        let start = all_queries.rows();
        for row in q.iter_rows() {
            all_queries.push_row(row)?;
        }
        bounds.push(start..all_queries.rows());
    }
    let lists = cosine_topk(&all_queries, pool_store.embedding_blocks(), k)?;
    let per_task = cfg
        .tasks
        .iter()
        .zip(bounds)
        .map(|(t, range)| {
            let start = range.start;
            let own = lists[range]
                .iter()
                .map(|l| TopK {
                    query: l.query - start,
                    ..l.clone()
                })
                .collect();
            (t.id.clone(), own)
        })
        .collect();
    Ok(TaskLists { per_task, references })
}

/// Writes `topk/<task>.bin` for every task plus a `topk/summary.tsv`.
pub(super) fn run(cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.require_out_dir()?;
    cfg.require_features()?;
    let pool = load_pool(cfg)?;
    let tasks = load_tasks(cfg)?;
    let k = match (cfg.k, cfg.n) {
        (Some(0), _) => return Err(crate::args::usage("k must be positive")),
        (Some(k), _) => k,
        (None, Some(n)) => default_k(n, &tasks, pool.len()),
        (None, None) => return Err(crate::args::usage("set `k`, or `n` to derive it")),
    };
    let lists = task_topk(&RunConfig { topk_dir: None, ..cfg.clone() }, &pool, &tasks, k)?;
    std::fs::create_dir_all(out_dir.join("topk"))?;
    let mut summary = String::from("task\tqueries\tk\tpath\n");
    for (task, task_lists) in &lists.per_task {
        let rel = format!("topk/{task}.bin");
        let path = out_dir.join(&rel);
        write_topk(&path, task_lists).with_context(|| format!("writing {}", path.display()))?;
        summary.push_str(&format!("{task}\t{}\t{k}\t{rel}\n", task_lists.len()));
    }
    write_text(&out_dir.join("topk/summary.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}
