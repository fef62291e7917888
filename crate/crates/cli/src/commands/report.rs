use std::path::PathBuf;

use anyhow::{Context, Result};
use sift_core::corpus::{self, PoolFormat};
use sift_core::flops::{tsv_row, CostMethod, CostModelParams, TSV_HEADER};
use sift_core::selection::{SelectionManifest, SelectionMethod};

use super::write_text;
use crate::args::{load_config, usage, FlopsArgs, ReportArgs};
use crate::config::FlopsConfig;

/// Model size assumed when none is configured: the 7B setting.
pub const DEFAULT_MODEL_PARAMS: u64 = 7_000_000_000;

fn cost_params(cfg: &FlopsConfig, pool_size: u64, selected: u64) -> CostModelParams {
    let mut p = CostModelParams::new(cfg.model_params.unwrap_or(DEFAULT_MODEL_PARAMS), pool_size, selected);
    p.selector_params = cfg.selector_params;
    if let Some(t) = cfg.tokens_per_sample {
        p.tokens_per_sample = t;
    }
    if let Some(e) = cfg.epochs {
        p.epochs = e;
    }
    p
}

fn parse_cost_method(s: &str) -> Result<CostMethod> {
    s.parse::<CostMethod>()
        .or_else(|_| s.parse::<SelectionMethod>().map(SelectionMethod::cost_method))
        .map_err(|_| usage(format!("unknown method {s:?}")))
}

/// FLOPs TSV for the given formulas.
pub fn flops_table(methods: &[CostMethod], params: &CostModelParams) -> Result<String> {
    let mut out = format!("{TSV_HEADER}\n");
    for &m in methods {
        out.push_str(&tsv_row(m, params)?);
        out.push('\n');
    }
    Ok(out)
}

pub(super) fn flops(args: &FlopsArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    args.params.apply(&mut cfg);
    let methods = match (&args.method, cfg.method) {
        (Some(m), _) => vec![parse_cost_method(m)?],
        (None, Some(m)) => vec![m.cost_method()],
        (None, None) => CostMethod::ALL.to_vec(),
    };
    let pool_size = match (args.pool_size, &cfg.pool) {
        (Some(p), _) => p,
        (None, Some(path)) => corpus::load_pool(path, PoolFormat::Jsonl)?.len() as u64,
        (None, None) => return Err(usage("set --pool-size or a pool")),
    };
    let selected = args
        .selected
        .or(cfg.n.map(|n| n as u64))
        .ok_or_else(|| usage("set --selected or n"))?;
    let params = cost_params(&cfg.flops, pool_size, selected);
    params.validate().map_err(|e| usage(e.to_string()))?;
    print!("{}", flops_table(&methods, &params)?);
    Ok(())
}

/// Composition table (one row per manifest and source) and FLOPs table (one
/// row per manifest), each with its own header.
pub fn report_tables(manifests: &[(String, SelectionManifest)], flops: &FlopsConfig) -> Result<(String, String)> {
    let mut composition = String::from("manifest\tmethod\tsource\tcount\tfraction\n");
    let mut cost = format!("manifest\t{TSV_HEADER}\n");
    for (label, m) in manifests {
        let total = m.len().max(1) as f64;
        for (source, &count) in &m.per_source_counts {
            composition.push_str(&format!(
                "{label}\t{}\t{source}\t{count}\t{:.6}\n",
                m.method,
                count as f64 / total
            ));
        }
        let params = cost_params(flops, m.pool_size as u64, m.len() as u64);
        let row = tsv_row(m.method.cost_method(), &params)
            .with_context(|| format!("FLOPs for {label}"))?;
        cost.push_str(&format!("{label}\t{row}\n"));
    }
    Ok((composition, cost))
}

pub(super) fn report(args: &ReportArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    args.params.apply(&mut cfg);
    let manifests = args
        .manifests
        .iter()
        .map(|p: &PathBuf| Ok((p.display().to_string(), SelectionManifest::load(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let (composition, cost) = report_tables(&manifests, &cfg.flops)?;
    let text = format!("{composition}\n{cost}");
    if let Some(dir) = &args.out_dir {
        write_text(&dir.join("report.tsv"), &text)?;
    }
    print!("{text}");
    Ok(())
}
