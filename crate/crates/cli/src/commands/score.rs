use anyhow::{bail, Result};
use sift_core::corpus::DataPool;
use sift_core::scorers::{ifd_scores, perplexity_scores_with, token_counts, ScoreMethod};
use sift_core::selection::SelectionMethod;
use sift_core::store::{write_scores, LossRecord, RecordKind};
use sift_core::ScoreTable;

use super::{load_pool, open_checked, write_text};
use crate::args::usage;
use crate::config::RunConfig;

/// Loss records for every pool index, in pool order.
pub(crate) fn pool_losses(cfg: &RunConfig, pool: &DataPool) -> Result<Vec<LossRecord>> {
    let features = cfg.require_features()?;
    let store = open_checked(features, &pool.identity(), "the pool")?;
    if !store.manifest.has(RecordKind::Loss) {
        bail!("{} has no loss records", features.display());
    }
    let mut losses = store.losses()?;
    losses.sort_by_key(|r| r.pool_index);
    Ok(losses)
}

/// The score table a loss-based method ranks by.
pub(crate) fn method_scores(cfg: &RunConfig, method: SelectionMethod, losses: &[LossRecord]) -> Result<ScoreTable> {
    Ok(match method {
        SelectionMethod::TopPpl | SelectionMethod::MidPpl => {
            perplexity_scores_with(losses, cfg.perplexity_basis.unwrap_or_default())?
        }
        SelectionMethod::Ifd => ifd_scores(losses)?,
        SelectionMethod::Length => {
            let entries = token_counts(losses)
                .into_iter()
                .enumerate()
                .map(|(i, c)| (i, f64::from(c)))
                .collect();
            ScoreTable::new(ScoreMethod::Length, entries)?
        }
        other => return Err(usage(format!("method {other} is not score-based"))),
    })
}

/// Writes `scores/<score>.bin` and `scores/<score>.tsv`.
pub(super) fn run(cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.require_out_dir()?;
    let method = cfg.require_method()?;
    if !method.needs_losses() {
        return Err(usage(format!("method {method} has no per-sample scores")));
    }
    cfg.require_features()?;
    let pool = load_pool(cfg)?;
    let losses = pool_losses(cfg, &pool)?;
    let table = method_scores(cfg, method, &losses)?;
    let name = table.method.name();
    let bin = out_dir.join(format!("scores/{name}.bin"));
    std::fs::create_dir_all(out_dir.join("scores"))?;
    write_scores(&bin, &table)?;
    write_text(&out_dir.join(format!("scores/{name}.tsv")), &table.to_tsv())?;
    println!("score\tscored\texcluded\tpath");
    println!("{name}\t{}\t{}\tscores/{name}.bin", table.len(), table.excluded.len());
    Ok(())
}
