use anyhow::Result;
use sift_core::corpus::dedup_pool;

use super::{load_pool, write_text};
use crate::config::RunConfig;

/// Writes `pool.dedup.jsonl`, the per-source `dedup_report.tsv` (also
/// printed) and `dedup_removed.tsv` listing every dropped sample.
pub(super) fn run(cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.require_out_dir()?;
    let pool = load_pool(cfg)?;
    let (kept, report) = dedup_pool(&pool);

    let mut removed = String::from("pool_index\tsource\tduplicate_of\n");
    for r in &report.removed {
        removed.push_str(&format!("{}\t{}\t{}\n", r.pool_index, r.source, r.duplicate_of));
    }
    let summary = report.to_tsv();
    write_text(&out_dir.join("pool.dedup.jsonl"), &kept.to_jsonl())?;
    write_text(&out_dir.join("dedup_removed.tsv"), &removed)?;
    write_text(&out_dir.join("dedup_report.tsv"), &summary)?;
    print!("{summary}");
    eprintln!("kept {} of {} samples", kept.len(), pool.len());
    Ok(())
}
