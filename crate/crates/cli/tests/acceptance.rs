//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Oracles here are written independently of the library code paths
//! they check.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Display;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sift_cli::commands::select;
use sift_cli::config::RunConfig;
use sift_core::corpus::{dedup_pool, load_pool, DataPool, Message, PoolFormat, Role};
use sift_core::flops::{estimate, CostMethod, CostModelParams};
use sift_core::pooling::{pool, position_weights, PoolingKind, PoolingStrategy, SpanKind, TokenSpans};
use sift_core::scorers::{
    balanced_budgets, balanced_random_select, ifd_scores, select_mid_ppl, select_top_ppl, ScoreMethod,
};
use sift_core::selection::{
    aggregate_task_scores, round_robin_multitask, round_robin_single, SelectionManifest, SelectionMethod,
};
use sift_core::similarity::{blocks_of, cosine, cosine_topk};
use sift_core::store::{
    read_embeddings, read_topk, write_embeddings, write_topk, FeatureManifest, FeatureStore, LossRecord,
    RecordKind, ShardEntry,
};
use sift_core::{Matrix, ScoreTable, TopK};

use common::{p, sift_in, stderr, write_pool, write_store, Kinds};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);
type Transform = (&'static str, fn(f64) -> f64);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

trait OrFail<T> {
    fn or_fail(self, what: &str) -> Result<T, String>;
}

impl<T, E: Display> OrFail<T> for Result<T, E> {
    fn or_fail(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

const SCALE_CHILD_ENV: &str = "SIFT_ACCEPTANCE_SCALE_DIR";

fn main() {
    if let Ok(dir) = std::env::var(SCALE_CHILD_ENV) {
        scale_child(Path::new(&dir));
        return;
    }
    let criteria: [Criterion; 10] = [
        ("round-robin matches the dense simulation", round_robin_equivalence),
        ("multi-task round-robin", multitask_round_robin),
        ("top-k exactness and shard/thread invariance", topk_exactness),
        ("pooling weights and convex hull", pooling),
        ("FLOPs model", flops_model),
        ("balanced random", balanced_random),
        ("scorers", scorers),
        ("dedup", dedup),
        ("end-to-end determinism", end_to_end),
        ("scale: 1M x 256 streamed top-k", scale),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.2}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.2}s) {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Shared oracles

/// Best remaining column of `row`: highest score, lowest index on ties.
fn argmax(row: &[f32], taken: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &s) in row.iter().enumerate() {
        if taken[j] {
            continue;
        }
        if best.is_none_or(|b| s > row[b]) {
            best = Some(j);
        }
    }
    best
}

/// Visit rows in order; each takes its best untaken column until `n` are
/// taken.
fn dense_round_robin(scores: &[Vec<f32>], n: usize) -> Vec<usize> {
    let width = scores[0].len();
    let target = n.min(width);
    let mut taken = vec![false; width];
    let mut out = Vec::new();
    while out.len() < target {
        for row in scores {
            if out.len() == target {
                break;
            }
            let j = argmax(row, &taken).expect("a column is left");
            taken[j] = true;
            out.push(j);
        }
    }
    out
}

/// Full ranking of a score row: descending score, ascending index.
fn ranked(row: &[f32]) -> Vec<(usize, f32)> {
    let mut v: Vec<(usize, f32)> = row.iter().copied().enumerate().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

fn topk_list(query: usize, row: &[f32], k: usize) -> TopK {
    let mut entries = ranked(row);
    entries.truncate(k);
    TopK { query, k, entries }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Matrix<f32> {
    let data = (0..rows * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Matrix::new(rows, dim, data).unwrap()
}

fn message_pair(q: &str, a: &str) -> Vec<Message> {
    vec![
        Message {
            role: Role::User,
            content: q.to_string(),
        },
        Message {
            role: Role::Assistant,
            content: a.to_string(),
        },
    ]
}

// ---------------------------------------------------------------------------
// Criteria

fn round_robin_equivalence() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for inst in 0..200 {
        let queries = rng.gen_range(1..=5);
        let pool_len = rng.gen_range(1..=50);
        let n = rng.gen_range(1..=20);
        let scores: Vec<Vec<f32>> = (0..queries)
            .map(|_| (0..pool_len).map(|_| rng.gen::<f32>()).collect())
            .collect();
        let lists: Vec<TopK> = scores
            .iter()
            .enumerate()
            .map(|(q, row)| topk_list(q, row, pool_len))
            .collect();
        let got = round_robin_single(&lists, n, pool_len).or_fail("round_robin_single")?;
        let want = dense_round_robin(&scores, n);
        ensure!(got.indices == want, "instance {inst}: got {:?}, oracle {want:?}", got.indices);
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}, limit 5 s");
    Ok("200 instances".into())
}

fn multitask_round_robin() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Dense instances: every query scores the whole pool.
    for inst in 0..100 {
        let tasks = rng.gen_range(1..=4);
        let pool_len = rng.gen_range(1..=60);
        let n = rng.gen_range(1..=pool_len);
        let mut per_task = Vec::new();
        let mut task_max = Vec::new();
        for t in 0..tasks {
            let queries = rng.gen_range(1..=4);
            let rows: Vec<Vec<f32>> = (0..queries)
                .map(|_| (0..pool_len).map(|_| rng.gen::<f32>()).collect())
                .collect();
            task_max.push(
                (0..pool_len)
                    .map(|j| rows.iter().map(|r| r[j]).fold(f32::NEG_INFINITY, f32::max))
                    .collect::<Vec<f32>>(),
            );
            let lists = rows.iter().enumerate().map(|(q, r)| topk_list(q, r, pool_len)).collect();
            per_task.push((format!("t{t}"), lists));
        }
        let tables = aggregate_task_scores(&per_task).or_fail("aggregate")?;
        let got = round_robin_multitask(&tables, n, pool_len).or_fail("multitask")?;
        let unique: HashSet<_> = got.indices.iter().collect();
        ensure!(
            got.indices.len() == n && unique.len() == n,
            "instance {inst}: {} picks, {} unique, n = {n}",
            got.indices.len(),
            unique.len()
        );
        let want = dense_round_robin(&task_max, n);
        ensure!(got.indices == want, "instance {inst}: got {:?}, oracle {want:?}", got.indices);
    }
    // Disjoint candidates: each task only ever sees its own slice of the pool.
    for inst in 0..100 {
        let tasks = rng.gen_range(1..=4);
        let part = rng.gen_range(1..=15);
        let pool_len = tasks * part;
        let n = rng.gen_range(1..=pool_len);
        let mut per_task = Vec::new();
        for t in 0..tasks {
            let own: Vec<usize> = (t * part..(t + 1) * part).collect();
            let queries = rng.gen_range(1..=3);
            let lists = (0..queries)
                .map(|q| {
                    let mut entries: Vec<(usize, f32)> = own.iter().map(|&i| (i, rng.gen::<f32>())).collect();
                    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    TopK { query: q, k: part, entries }
                })
                .collect();
            per_task.push((format!("t{t}"), lists));
        }
        let tables = aggregate_task_scores(&per_task).or_fail("aggregate")?;
        let got = round_robin_multitask(&tables, n, pool_len).or_fail("multitask")?;
        let (lo, hi) = (
            got.contributions.iter().min().unwrap(),
            got.contributions.iter().max().unwrap(),
        );
        ensure!(hi - lo <= 1, "instance {inst}: contributions {:?}", got.contributions);
        ensure!(got.indices.len() == n, "instance {inst}: {} picks for n = {n}", got.indices.len());
    }
    // Both tasks rank the same sample first.
    let shared = 0;
    let per_task = vec![
        ("task1".to_string(), vec![TopK { query: 0, k: 2, entries: vec![(shared, 0.9), (1, 0.5)] }]),
        ("task2".to_string(), vec![TopK { query: 0, k: 2, entries: vec![(shared, 0.8), (2, 0.7)] }]),
    ];
    let tables = aggregate_task_scores(&per_task).or_fail("aggregate")?;
    let got = round_robin_multitask(&tables, 2, 3).or_fail("multitask")?;
    ensure!(got.indices == vec![shared, 2], "coinciding rank-1 trace gave {:?}", got.indices);
    Ok("100 dense + 100 disjoint instances, rank-1 trace".into())
}

fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn topk_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let many = std::thread::available_parallelism().map_or(4, |n| n.get()).max(4);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let multi = rayon::ThreadPoolBuilder::new().num_threads(many).build().unwrap();
    let mut ties = 0;
    for inst in 0..100 {
        let queries = rng.gen_range(1..=20);
        let pool_len = rng.gen_range(1..=2000);
        let dim = rng.gen_range(1..=64);
        let k = if rng.gen_bool(0.2) { pool_len + 5 } else { rng.gen_range(1..=pool_len) };
        let q = random_matrix(&mut rng, queries, dim);
        let mut pool_m = random_matrix(&mut rng, pool_len, dim);
        // Duplicate rows tie exactly; the lower index must come first.
        for i in 1..pool_len {
            if rng.gen_bool(0.1) {
                let src = pool_m.row(rng.gen_range(0..i)).to_vec();
                pool_m.row_mut(i).copy_from_slice(&src);
                ties += 1;
            }
        }
        let oracle: Vec<TopK> = q
            .iter_rows()
            .enumerate()
            .map(|(qi, qrow)| {
                let row: Vec<f32> = pool_m.iter_rows().map(|p| cosine(qrow, p).unwrap()).collect();
                topk_list(qi, &row, k)
            })
            .collect();
        for list in &oracle {
            for &(j, s) in &list.entries {
                let exact = cosine_f64(q.row(list.query), pool_m.row(j));
                ensure!((s as f64 - exact).abs() <= 1e-5, "instance {inst}: score {s} vs f64 {exact}");
            }
        }
        for shards in [1usize, 3, 7] {
            let rows_per = pool_len.div_ceil(shards).max(1);
            for (label, threads) in [("1 thread", &single), ("max threads", &multi)] {
                let got = threads
                    .install(|| cosine_topk(&q, blocks_of(&pool_m, rows_per), k))
                    .or_fail("cosine_topk")?;
                ensure!(
                    got == oracle,
                    "instance {inst}: {shards} shards, {label}: differs from the argsort oracle"
                );
            }
        }
    }
    Ok(format!("100 instances, {ties} duplicated rows, {many} threads"))
}

fn pooling() -> Check {
    for len in 1..=4096 {
        let w: Vec<f64> = position_weights(len).or_fail("weights")?;
        let total: f64 = w.iter().sum();
        ensure!((total - 1.0).abs() <= 1e-6, "L = {len}: weights sum to {total}");
    }
    let exact: Vec<Ratio<i64>> = position_weights(3).or_fail("rational weights")?;
    let want: Vec<Ratio<i64>> = (1..=3).map(|i| Ratio::new(i, 6)).collect();
    ensure!(exact == want, "L = 3 weights {exact:?}");

    let h = Matrix::from_rows(&[[1.0f64, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
    let spans = TokenSpans {
        prompt: 0..1,
        answer: 1..3,
    };
    let out = pool(&h, &spans, PoolingStrategy::default(), 0).or_fail("pool")?;
    ensure!(
        (out[0] - 4.0 / 6.0).abs() <= 1e-6 && (out[1] - 5.0 / 6.0).abs() <= 1e-6,
        "worked example pooled to {out:?}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let kinds = [PoolingKind::Weighted, PoolingKind::Uniform, PoolingKind::EosOnly];
    let span_kinds = [SpanKind::Full, SpanKind::PromptOnly, SpanKind::LabelOnly];
    for inst in 0..1000 {
        let len = rng.gen_range(2..=64);
        let dim = rng.gen_range(1..=16);
        let prompt = rng.gen_range(1..len);
        let h = random_matrix(&mut rng, len, dim);
        let spans = TokenSpans {
            prompt: 0..prompt,
            answer: prompt..len,
        };
        let strategy = PoolingStrategy::new(*kinds.choose(&mut rng).unwrap(), *span_kinds.choose(&mut rng).unwrap());
        let rows = spans.select(strategy.span, len);
        let v = pool(&h, &spans, strategy, inst).or_fail("pool")?;
        for (c, &x) in v.iter().enumerate() {
            let col = rows.clone().map(|r| h.row(r)[c]);
            let (lo, hi) = col.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
            let slack = 1e-6 * (1.0 + lo.abs().max(hi.abs()));
            ensure!(
                x >= lo - slack && x <= hi + slack,
                "matrix {inst} ({strategy:?}): column {c} pooled to {x} outside [{lo}, {hi}]"
            );
        }
    }
    Ok("L in 1..=4096, rational L = 3, worked example, 1000 hulls".into())
}

fn big(x: u64) -> BigUint {
    BigUint::from(x)
}

/// The cost table with its default constants written out.
fn transcribed(method: CostMethod, n: u64, n_sel: u64, p: u64, d: u64) -> BigUint {
    let (n, s, p, d) = (big(n), big(n_sel), big(p), big(d));
    let train = big(2) * big(2048) * big(6) * &n * &d;
    let pool = big(2) * big(2048) * big(2) * &s * &p;
    match method {
        CostMethod::Random => train,
        CostMethod::Perplexity | CostMethod::Embedding | CostMethod::Rds => pool + train,
        CostMethod::Ifd => {
            big(200_000) * big(2049) * big(2) * &s + big(1000) * big(2048) * big(6) * &n * &d + pool + train
        }
        CostMethod::Less => big(3) * big(2048) * big(6) * &s * &p + train,
    }
}

fn flops_model() -> Check {
    let base = CostModelParams::new(7_000_000_000, 10_000, 10_000);
    let random = estimate(CostMethod::Random, &base).or_fail("estimate")?;
    ensure!(random == 1_720_320_000_000_000_000, "random at 7B / 1e4 = {random}");
    ensure!(random as f64 == 1.72032e18, "random at 7B / 1e4 = {random}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for setting in 0..5 {
        let n = rng.gen_range(100_000_000..80_000_000_000u64);
        let n_sel = rng.gen_range(100_000_000..=n);
        let pool = rng.gen_range(1_000..10_000_000u64);
        let d = rng.gen_range(1..=pool);
        let mut params = CostModelParams::new(n, pool, d);
        params.selector_params = Some(n_sel);
        for m in CostMethod::ALL {
            let got = BigUint::from(estimate(m, &params).or_fail("estimate")?);
            let want = transcribed(m, n, n_sel, pool, d);
            ensure!(got == want, "setting {setting}, {m}: {got} != {want}");
        }
    }
    let empty = CostModelParams::new(7_000_000_000, 0, 10_000);
    let ppl = estimate(CostMethod::Perplexity, &empty).or_fail("estimate")?;
    let rnd = estimate(CostMethod::Random, &empty).or_fail("estimate")?;
    ensure!(ppl == rnd, "perplexity at P = 0 is {ppl}, random is {rnd}");
    Ok("1.72032e18 exact, 5 settings x 6 formulas, P = 0".into())
}

fn sized_pool(sizes: &[(&str, usize)]) -> DataPool {
    DataPool::from_records(
        sizes
            .iter()
            .flat_map(|&(src, n)| (0..n).map(move |i| (src.to_string(), message_pair(&format!("{src} {i}"), "a"))))
            .collect(),
    )
}

fn balanced_random() -> Check {
    let example = sized_pool(&[("A", 4), ("B", 100), ("C", 100)]);
    let sel = balanced_random_select(&example, 30, 7).or_fail("balanced")?;
    let counts = example.count_sources(&sel.indices);
    let want: BTreeMap<String, usize> = [("A", 4), ("B", 13), ("C", 13)].map(|(k, v)| (k.to_string(), v)).into();
    ensure!(counts == want, "A/B/C example gave {counts:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for config in 0..500 {
        let sources = rng.gen_range(1..=8);
        let sizes: BTreeMap<String, usize> = (0..sources)
            .map(|s| (format!("s{s}"), rng.gen_range(1..=200)))
            .collect();
        let total: usize = sizes.values().sum();
        let n = rng.gen_range(1..=total);
        let budgets = balanced_budgets(&sizes, n).or_fail("budgets")?;
        ensure!(budgets.values().sum::<usize>() == n, "config {config}: budgets {budgets:?} miss n = {n}");
        for (s, &b) in &budgets {
            ensure!(b <= sizes[s], "config {config}: {s} gets {b} of {}", sizes[s]);
        }
        let open: Vec<usize> = budgets.iter().filter(|(s, &b)| b < sizes[*s]).map(|(_, &b)| b).collect();
        if let (Some(lo), Some(hi)) = (open.iter().min(), open.iter().max()) {
            ensure!(hi - lo <= 1, "config {config}: unexhausted budgets {open:?}");
        }
        if config % 25 == 0 {
            let names: Vec<(String, usize)> = sizes.iter().map(|(k, &v)| (k.clone(), v)).collect();
            let refs: Vec<(&str, usize)> = names.iter().map(|(k, v)| (k.as_str(), *v)).collect();
            let pool = sized_pool(&refs);
            let sel = balanced_random_select(&pool, n, config).or_fail("balanced")?;
            let unique: HashSet<_> = sel.indices.iter().collect();
            ensure!(unique.len() == n, "config {config}: duplicate picks");
            ensure!(pool.count_sources(&sel.indices) == budgets, "config {config}: drawn counts off budget");
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let pool_path = dir.path().join("pool.jsonl");
    write_pool(&pool_path, &sized_pool(&[("A", 40), ("B", 300), ("C", 120)]));
    let cfg = RunConfig {
        pool: Some(pool_path.clone()),
        method: Some(SelectionMethod::BalancedRandom),
        n: Some(90),
        seed: Some(1234),
        ..Default::default()
    };
    let a = select(&cfg).or_fail("select")?.0.to_json();
    let b = select(&cfg).or_fail("select")?.0.to_json();
    ensure!(a == b, "same seed produced different manifests");
    let mut outputs = Vec::new();
    for run in ["one", "two"] {
        let out = dir.path().join(run);
        let o = sift_in(
            dir.path(),
            &["select", "--pool", p(&pool_path), "--out-dir", p(&out), "--method", "balanced-random", "--n", "90", "--seed", "1234"],
        );
        ensure!(o.status.success(), "sift select failed: {}", stderr(&o));
        outputs.push(fs::read(out.join("selection.json")).unwrap());
    }
    ensure!(outputs[0] == outputs[1], "two CLI runs wrote different selection.json bytes");
    ensure!(outputs[0] == a.as_bytes(), "CLI manifest differs from the library manifest");
    Ok("{4, 13, 13}, 500 configurations, byte-identical manifests".into())
}

fn loss(rng: &mut ChaCha8Rng, i: usize) -> LossRecord {
    let answer = rng.gen_range(1..80u32);
    let prompt = rng.gen_range(1..80u32);
    let uncond = rng.gen_range(0.1f32..4.0) * answer as f32;
    LossRecord {
        pool_index: i,
        full_token_count: prompt + answer,
        prompt_token_count: prompt,
        answer_token_count: answer,
        full_nll_sum: rng.gen_range(0.1f32..4.0) * (prompt + answer) as f32,
        answer_cond_nll_sum: uncond * rng.gen_range(0.2f32..1.5),
        answer_uncond_nll_sum: uncond,
    }
}

fn scorers() -> Check {
    let window = ScoreTable::new(ScoreMethod::Perplexity, (0..10).map(|i| (i, (i + 1) as f64)).collect())
        .or_fail("table")?;
    let mut mid: Vec<f64> = select_mid_ppl(&window, 4)
        .or_fail("mid")?
        .iter()
        .map(|&i| (i + 1) as f64)
        .collect();
    mid.sort_by(f64::total_cmp);
    ensure!(mid == vec![4.0, 5.0, 6.0, 7.0], "mid-ppl window on 1..10 picked scores {mid:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let transforms: [Transform; 2] = [("2x+3", |x| 2.0 * x + 3.0), ("x^3", |x| x * x * x)];
    for t in 0..100 {
        let len = rng.gen_range(1..200);
        let table = ScoreTable::new(
            ScoreMethod::Perplexity,
            (0..len).map(|i| (i, rng.gen_range(0.05f64..30.0))).collect(),
        )
        .or_fail("table")?;
        let n = rng.gen_range(1..=len);
        for (name, f) in transforms {
            let mapped = table.map_scores(f);
            ensure!(
                select_top_ppl(&table, n).or_fail("top")? == select_top_ppl(&mapped, n).or_fail("top")?,
                "table {t}: top-ppl changed under {name}"
            );
            ensure!(
                select_mid_ppl(&table, n).or_fail("mid")? == select_mid_ppl(&mapped, n).or_fail("mid")?,
                "table {t}: mid-ppl changed under {name}"
            );
        }
    }

    for t in 0..100 {
        let losses: Vec<LossRecord> = (0..rng.gen_range(1..100)).map(|i| loss(&mut rng, i)).collect();
        let base: ScoreTable = ifd_scores(&losses).or_fail("ifd")?;
        for c in [0.5f32, 2.0, 10.0] {
            let scaled: Vec<LossRecord> = losses
                .iter()
                .map(|l| LossRecord {
                    full_nll_sum: l.full_nll_sum * c,
                    answer_cond_nll_sum: l.answer_cond_nll_sum * c,
                    answer_uncond_nll_sum: l.answer_uncond_nll_sum * c,
                    ..*l
                })
                .collect();
            let got: ScoreTable = ifd_scores(&scaled).or_fail("ifd")?;
            ensure!(got.len() == base.len(), "table {t}, c = {c}: scored set changed");
            for (a, b) in base.entries.iter().zip(&got.entries) {
                // Powers of two rescale f32 sums exactly; c = 10 rounds each sum once.
                let tol = if c == 10.0 { 1e-6 * a.1.abs() } else { 0.0 };
                ensure!(a.0 == b.0 && (a.1 - b.1).abs() <= tol, "table {t}, c = {c}: {a:?} vs {b:?}");
            }
        }
    }
    Ok("mid window, 100 tables x 2 transforms, IFD c in {0.5, 2, 10}".into())
}

fn dedup() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sources = ["flan", "dolly", "oasst"];
    let mut injected = 0;
    for inst in 0..100 {
        let len = rng.gen_range(1..150);
        let mut records: Vec<(String, Vec<Message>)> = Vec::new();
        for _ in 0..len {
            let src = sources.choose(&mut rng).unwrap().to_string();
            if !records.is_empty() && rng.gen_bool(0.25) {
                let copy = records[rng.gen_range(0..records.len())].1.clone();
                records.push((src, copy));
                injected += 1;
            } else {
                let q = format!("q{}", rng.gen_range(0..40));
                let a = format!("a{}", rng.gen_range(0..3));
                records.push((src, message_pair(&q, &a)));
            }
        }
        let original = DataPool::from_records(records.clone());
        let (kept, report) = dedup_pool(&original);

        let mut first: Vec<(usize, &Vec<Message>)> = Vec::new();
        let mut want_kept = Vec::new();
        let mut want_removed = Vec::new();
        for (i, (src, msgs)) in records.iter().enumerate() {
            match first.iter().find(|(_, m)| *m == msgs) {
                Some(&(j, _)) => want_removed.push((i, j)),
                None => {
                    first.push((i, msgs));
                    want_kept.push((src.clone(), msgs.clone()));
                }
            }
        }
        let got_kept: Vec<(String, Vec<Message>)> =
            kept.samples().iter().map(|s| (s.source.clone(), s.messages.clone())).collect();
        ensure!(got_kept == want_kept, "pool {inst}: kept samples differ from first occurrences");
        let got_removed: Vec<(usize, usize)> = report.removed.iter().map(|r| (r.pool_index, r.duplicate_of)).collect();
        ensure!(got_removed == want_removed, "pool {inst}: removed {got_removed:?}, want {want_removed:?}");
        ensure!(
            kept.len() + report.removed.len() == original.len(),
            "pool {inst}: {} kept + {} removed != {}",
            kept.len(),
            report.removed.len(),
            original.len()
        );
        let (again, second) = dedup_pool(&kept);
        ensure!(
            second.removed.is_empty() && again.to_jsonl() == kept.to_jsonl(),
            "pool {inst}: dedup is not idempotent"
        );
    }
    Ok(format!("100 pools, {injected} injected duplicates"))
}

// ---------------------------------------------------------------------------
// End to end through the binary

fn run_step(dir: &Path, args: &[&str]) -> Result<String, String> {
    let o = sift_in(dir, args);
    ensure!(o.status.success(), "`sift {}` exited {:?}: {}", args.join(" "), o.status.code(), stderr(&o));
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn end_to_end() -> Check {
    let root = tempfile::tempdir().unwrap();
    let inputs = root.path().join("inputs");

    // 10k distinct samples plus injected copies that dedup must drop.
    let base = common::synth_pool(10_000, &["flan", "dolly", "oasst", "sharegpt"], "pool");
    let mut records: Vec<(String, Vec<Message>)> =
        base.samples().iter().map(|s| (s.source.clone(), s.messages.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..250 {
        let src = records[rng.gen_range(0..10_000)].clone();
        let at = rng.gen_range(10_000..=records.len());
        records.insert(at, ("mirror".into(), src.1));
    }
    let raw = inputs.join("raw.jsonl");
    write_pool(&raw, &DataPool::from_records(records));

    let stage = root.path().join("stage");
    run_step(root.path(), &["dedup", "--pool", p(&raw), "--out-dir", p(&stage)])?;
    let pool_path = stage.join("pool.dedup.jsonl");
    let deduped = load_pool(&pool_path, PoolFormat::Jsonl).or_fail("loading the deduplicated pool")?;
    ensure!(deduped.len() == 10_000, "dedup kept {} samples", deduped.len());

    // Feature extraction stand-in: hidden states and losses for pool and tasks.
    let dim = 32;
    let pool_features = write_store(&inputs.join("features/pool"), &deduped, dim, 11, 2_500, Kinds {
        hidden: true,
        losses: true,
        embeddings: false,
    });
    let mut config = format!(
        "pool = {}\nfeatures = {}\nmethod = \"rds\"\nn = 500\nseed = 5\n\n[pooling]\nkind = \"weighted\"\nspan = \"full\"\n",
        common::toml_path(&pool_path),
        common::toml_path(&pool_features)
    );
    for (t, queries) in [("mmlu", 12), ("bbh", 9), ("tydiqa", 15)] {
        let qs = common::synth_pool(queries, &["dev"], t);
        let qpath = inputs.join(format!("tasks/{t}.jsonl"));
        write_pool(&qpath, &qs);
        let seed = 100 + t.len() as u64;
        let store = write_store(&inputs.join(format!("features/{t}")), &qs, dim, seed, 8, Kinds {
            hidden: true,
            ..Default::default()
        });
        config.push_str(&format!(
            "\n[[tasks]]\nid = \"{t}\"\nqueries = {}\nfeatures = {}\n",
            common::toml_path(&qpath),
            common::toml_path(&store)
        ));
    }
    let config_path = inputs.join("run.toml");
    fs::write(&config_path, config).unwrap();
    let cfg = p(&config_path);

    let mut runs = Vec::new();
    for name in ["run1", "run2"] {
        let started = Instant::now();
        let out = root.path().join(name);
        fs::create_dir_all(&out).unwrap();
        let o = p(&out);
        run_step(&out, &["validate", "--config", cfg, "--out-dir", o])?;
        run_step(&out, &["pool-embeddings", "--config", cfg, "--out-dir", o])?;
        run_step(&out, &["topk", "--config", cfg, "--out-dir", o])?;
        let topk = out.join("topk");
        run_step(&out, &["select", "--config", cfg, "--out-dir", o, "--topk-dir", p(&topk)])?;
        let rnd = out.join("random");
        run_step(&out, &["select", "--config", cfg, "--out-dir", p(&rnd), "--method", "random"])?;
        run_step(&out, &["report", "selection.json", "random/selection.json", "--out-dir", o])?;
        let elapsed = started.elapsed();
        ensure!(elapsed < Duration::from_secs(60), "{name} took {elapsed:?}, limit 60 s");
        let read = |f: &str| fs::read(out.join(f)).unwrap_or_default();
        runs.push((read("selection.json"), read("random/selection.json"), read("report.tsv"), elapsed));
    }
    for (what, a, b) in [
        ("rds manifest", &runs[0].0, &runs[1].0),
        ("random manifest", &runs[0].1, &runs[1].1),
        ("report", &runs[0].2, &runs[1].2),
    ] {
        ensure!(!a.is_empty() && a == b, "{what} differs between runs (or is missing)");
    }
    let manifest = SelectionManifest::load(&root.path().join("run1/selection.json")).or_fail("manifest")?;
    let unique: HashSet<_> = manifest.selected.iter().collect();
    ensure!(
        manifest.len() == 500 && unique.len() == 500,
        "rds selected {} ({} unique)",
        manifest.len(),
        unique.len()
    );
    ensure!(
        manifest.per_task_counts.iter().map(|c| c.count).sum::<usize>() == 500,
        "per-task counts {:?}",
        manifest.per_task_counts
    );
    Ok(format!(
        "runs took {:.1}s and {:.1}s",
        runs[0].3.as_secs_f64(),
        runs[1].3.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// Scale: a child process scans the store so its peak RSS is its own.

const SCALE_ROWS: usize = 1_000_000;
const SCALE_DIM: usize = 256;
const SCALE_QUERIES: usize = 100;
const SCALE_K: usize = 1000;
const SCALE_SHARD: usize = 50_000;
const SCALE_SUBSAMPLE: usize = 10_000;
const RSS_LIMIT_BYTES: u64 = 2_000_000_000;

fn scale_child(dir: &Path) {
    let queries = read_embeddings(&dir.join("queries.bin")).expect("queries").vectors;
    let store = FeatureStore::open(&dir.join("manifest.json")).expect("store");
    let lists = cosine_topk(&queries, store.embedding_blocks(), SCALE_K).expect("scan");
    write_topk(&dir.join("topk.bin"), &lists).expect("write top-k");
    let status = fs::read_to_string("/proc/self/status").expect("/proc/self/status");
    let hwm = status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse::<u64>().ok())
        .expect("VmHWM");
    println!("VmHWM_KB {hwm}");
}

fn scale() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut sample: Vec<usize> = rand::seq::index::sample(&mut rng, SCALE_ROWS, SCALE_SUBSAMPLE).into_vec();
    sample.sort_unstable();
    let mut sub_rows = Matrix::empty(SCALE_DIM);
    let mut next_sample = sample.iter().peekable();

    let mut manifest = FeatureManifest::new("synthetic", "synthetic-lm", SCALE_DIM);
    for (shard, start) in (0..SCALE_ROWS).step_by(SCALE_SHARD).enumerate() {
        let count = SCALE_SHARD.min(SCALE_ROWS - start);
        let block = random_matrix(&mut rng, count, SCALE_DIM);
        while let Some(&&i) = next_sample.peek() {
            if i >= start + count {
                break;
            }
            sub_rows.push_row(block.row(i - start)).unwrap();
            next_sample.next();
        }
        let name = format!("emb-{shard:04}.bin");
        write_embeddings(&dir.path().join(&name), start, &block).or_fail("writing shard")?;
        manifest.shards.push(ShardEntry {
            kind: RecordKind::Embedding,
            path: name.into(),
            start,
            count,
        });
    }
    manifest.save(&dir.path().join("manifest.json")).or_fail("manifest")?;
    let queries = random_matrix(&mut rng, SCALE_QUERIES, SCALE_DIM);
    write_embeddings(&dir.path().join("queries.bin"), 0, &queries).or_fail("queries")?;

    let started = Instant::now();
    let child = Command::new(std::env::current_exe().unwrap())
        .env(SCALE_CHILD_ENV, dir.path())
        .output()
        .or_fail("spawning the scan")?;
    let scan_time = started.elapsed();
    ensure!(child.status.success(), "scan failed: {}", String::from_utf8_lossy(&child.stderr));
    let out = String::from_utf8_lossy(&child.stdout);
    let hwm_kb: u64 = out
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM_KB "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("no VmHWM in child output {out:?}"))?;
    let peak = hwm_kb * 1024;
    ensure!(peak < RSS_LIMIT_BYTES, "peak RSS {peak} bytes exceeds {RSS_LIMIT_BYTES}");

    let lists = read_topk(&dir.path().join("topk.bin")).or_fail("reading top-k")?;
    ensure!(lists.len() == SCALE_QUERIES, "{} lists", lists.len());
    let in_sample: HashSet<usize> = sample.iter().copied().collect();
    let mut matched = 0;
    for (qi, list) in lists.iter().enumerate() {
        ensure!(list.entries.len() == SCALE_K, "query {qi}: {} entries", list.entries.len());
        let row: Vec<f32> = sub_rows.iter_rows().map(|r| cosine(queries.row(qi), r).unwrap()).collect();
        let oracle: Vec<(usize, f32)> = ranked(&row).into_iter().map(|(j, s)| (sample[j], s)).collect();
        let filtered: Vec<(usize, f32)> = list.entries.iter().copied().filter(|e| in_sample.contains(&e.0)).collect();
        ensure!(
            filtered[..] == oracle[..filtered.len()],
            "query {qi}: sampled entries of the full list differ from the dense ranking"
        );
        // Nothing sampled that was left out may outrank the list's last entry.
        let last = *list.entries.last().unwrap();
        if let Some(&(j, s)) = oracle.get(filtered.len()) {
            ensure!(
                s < last.1 || (s == last.1 && j > last.0),
                "query {qi}: sample {j} ({s}) should have made the top {SCALE_K}"
            );
        }
        matched += filtered.len();
    }
    Ok(format!(
        "scan {:.1}s, peak RSS {:.0} MB, {matched} sampled hits checked",
        scan_time.as_secs_f64(),
        peak as f64 / 1e6
    ))
}
