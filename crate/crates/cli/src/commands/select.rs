use anyhow::Result;
use sift_core::corpus::{self, DataPool};
use sift_core::scorers::{
    balanced_random_select, random_select, select_ifd, select_length, select_mid_ppl, select_top_ppl,
    token_counts,
};
use sift_core::selection::{
    aggregate_task_scores, mean_max_select, round_robin_multitask, round_robin_single, Aggregation,
    FeatureReference, SelectionManifest, SelectionMethod, SelectionParameters, TaskCount,
};
use sift_core::store::FeatureManifest;

use super::score::{method_scores, pool_losses};
use super::topk::{default_k, task_topk};
use super::{load_pool, load_tasks, write_text};
use crate::config::RunConfig;

/// Run the configured method and build its manifest without writing
/// anything.
pub fn select(cfg: &RunConfig) -> Result<(SelectionManifest, DataPool)> {
    let method = cfg.check_selection()?;
    let n = cfg.require_n()?;
    let pool = load_pool(cfg)?;
    let mut params = SelectionParameters {
        n,
        ..Default::default()
    };
    let mut warnings = Vec::new();
    let mut references = Vec::new();
    let mut per_task_counts = Vec::new();

    let selected = match method {
        SelectionMethod::Random => {
            params.seed = cfg.seed;
            random_select(pool.len(), n, cfg.seed.unwrap_or_default())?
        }
        SelectionMethod::BalancedRandom => {
            params.seed = cfg.seed;
            balanced_random_select(&pool, n, cfg.seed.unwrap_or_default())?.indices
        }
        SelectionMethod::Length | SelectionMethod::TopPpl | SelectionMethod::MidPpl | SelectionMethod::Ifd => {
            let features = cfg.require_features()?;
            let losses = pool_losses(cfg, &pool)?;
            references.push(FeatureReference {
                path: features.display().to_string(),
                fingerprint: corpus::fingerprint_file(features)?,
            });
            params.extractor_model = Some(FeatureManifest::load(features)?.extractor_model);
            match method {
                SelectionMethod::Length => select_length(&token_counts(&losses), n)?,
                SelectionMethod::Ifd => {
                    let filter = cfg.ifd_filter.unwrap_or(true);
                    params.ifd_filter = Some(filter);
                    let table = method_scores(cfg, method, &losses)?;
                    if !table.excluded.is_empty() {
                        warnings.push(format!(
                            "{} samples could not be scored (no answer tokens or zero unconditional loss)",
                            table.excluded.len()
                        ));
                    }
                    if filter {
                        let dropped = table.entries.iter().filter(|e| e.1 >= 1.0).count();
                        if dropped > 0 {
                            warnings.push(format!("{dropped} samples with IFD >= 1 filtered out"));
                        }
                    }
                    select_ifd(&table, n, filter)?
                }
                _ => {
                    params.perplexity_basis = Some(cfg.perplexity_basis.unwrap_or_default());
                    let table = method_scores(cfg, method, &losses)?;
                    if method == SelectionMethod::TopPpl {
                        select_top_ppl(&table, n)?
                    } else {
                        select_mid_ppl(&table, n)?
                    }
                }
            }
        }
        SelectionMethod::Less | SelectionMethod::Embedding | SelectionMethod::Rds => {
            let tasks = load_tasks(cfg)?;
            let k = cfg.k.unwrap_or_else(|| default_k(n, &tasks, pool.len()));
            let aggregation = cfg.aggregation.unwrap_or_default();
            params.k = Some(k);
            params.aggregation = Some(aggregation);
            params.task_order = cfg.tasks.iter().map(|t| t.id.clone()).collect();
            if method == SelectionMethod::Rds {
                params.pooling = Some(cfg.pooling_strategy());
            }
            if n > pool.len() {
                warnings.push(format!("n = {n} exceeds the pool; selecting all {} samples", pool.len()));
            }
            let lists = task_topk(cfg, &pool, &tasks, k)?;
            references = lists.references;
            params.extractor_model = Some(FeatureManifest::load(cfg.require_features()?)?.extractor_model);

            match (aggregation, lists.per_task.as_slice()) {
                (Aggregation::RoundRobin, [(task, only)]) => {
                    let outcome = round_robin_single(only, n, pool.len())?;
                    per_task_counts.push(TaskCount {
                        task: task.clone(),
                        count: outcome.indices.len(),
                    });
                    outcome.indices
                }
                (Aggregation::RoundRobin, many) => {
                    let tables = aggregate_task_scores(many)?;
                    let outcome = round_robin_multitask(&tables, n, pool.len())?;
                    per_task_counts.extend(many.iter().zip(&outcome.contributions).map(|((task, _), &count)| {
                        TaskCount {
                            task: task.clone(),
                            count,
                        }
                    }));
                    outcome.indices
                }
                (Aggregation::MeanMax, many) => {
                    let floor = cfg.mean_max_floor();
                    params.mean_max_floor = Some(floor);
                    let tables = aggregate_task_scores(many)?;
                    let outcome = mean_max_select(&tables, n.min(pool.len()), floor)?;
                    if outcome.floored > 0 {
                        warnings.push(format!(
                            "{} candidates were missing from some task's top-k and scored with the floor; \
                             k >= pool size gives exact mean-max",
                            outcome.floored
                        ));
                    }
                    outcome.indices()
                }
            }
        }
    };

    let mut manifest = SelectionManifest::new(method, params, &pool, selected)?;
    manifest.feature_manifests = references;
    manifest.per_task_counts = per_task_counts;
    manifest.warnings = warnings;
    Ok((manifest, pool))
}

/// Writes `selection.json`, `selected.tsv`, and with `materialize` also
/// `selected.jsonl`.
pub(super) fn run(cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.require_out_dir()?;
    let (manifest, pool) = select(cfg)?;

    let mut listing = String::from("rank\tpool_index\tsource\n");
    for (rank, &i) in manifest.selected.iter().enumerate() {
        let source = &pool.get(i).expect("manifest indices are in range").source;
        listing.push_str(&format!("{}\t{i}\t{source}\n", rank + 1));
    }
    if cfg.materialize.unwrap_or(false) {
        let subset = DataPool::from_records(
            manifest
                .selected
                .iter()
                .map(|&i| {
                    let s = pool.get(i).expect("manifest indices are in range");
                    (s.source.clone(), s.messages.clone())
                })
                .collect(),
        );
        write_text(&out_dir.join("selected.jsonl"), &subset.to_jsonl())?;
    }
    write_text(&out_dir.join("selected.tsv"), &listing)?;
    write_text(&out_dir.join("selection.json"), &manifest.to_json())?;

    println!("source\tcount");
    for (source, count) in &manifest.per_source_counts {
        println!("{source}\t{count}");
    }
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}
