//! Synthetic pools and feature stores standing in for extractor output.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sift_core::corpus::{DataPool, Message, Role};
use sift_core::pooling::TokenSpans;
use sift_core::store::{
    write_embeddings, write_hidden_states, write_losses, FeatureManifest, HiddenStateRecord, LossRecord,
    RecordKind, ShardEntry,
};
use sift_core::Matrix;

pub fn sift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sift"))
        .args(args)
        .output()
        .expect("sift runs")
}

/// Run `sift` with `dir` as the working directory.
pub fn sift_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sift"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("sift runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// `n` distinct user/assistant samples spread round-robin over `sources`.
pub fn synth_pool(n: usize, sources: &[&str], tag: &str) -> DataPool {
    DataPool::from_records(
        (0..n)
            .map(|i| {
                (
                    sources[i % sources.len()].to_string(),
                    vec![
                        Message {
                            role: Role::User,
                            content: format!("{tag} question {i}"),
                        },
                        Message {
                            role: Role::Assistant,
                            content: format!("answer {}", i * 7 % 13),
                        },
                    ],
                )
            })
            .collect(),
    )
}

pub fn write_pool(path: &Path, pool: &DataPool) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, pool.to_jsonl()).unwrap();
}

/// Which record kinds a synthetic store holds.
#[derive(Clone, Copy, Default)]
pub struct Kinds {
    pub hidden: bool,
    pub losses: bool,
    pub embeddings: bool,
}

/// Deterministic per-sample token states: `2..=7` tokens, prompt of at
/// least one token.
pub fn hidden_record(pool_index: usize, dim: usize, seed: u64) -> HiddenStateRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pool_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let len = rng.gen_range(2..=7usize);
    let prompt = rng.gen_range(1..len);
    let data = (0..len * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    HiddenStateRecord {
        pool_index,
        spans: TokenSpans {
            prompt: 0..prompt,
            answer: prompt..len,
        },
        states: Matrix::new(len, dim, data).unwrap(),
    }
}

pub fn loss_record(pool_index: usize, seed: u64) -> LossRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(pool_index as u64 * 31));
    let prompt = rng.gen_range(1..40u32);
    let answer = rng.gen_range(1..60u32);
    let uncond = rng.gen_range(0.5f32..3.0) * answer as f32;
    LossRecord {
        pool_index,
        full_token_count: prompt + answer + 4,
        prompt_token_count: prompt,
        answer_token_count: answer,
        full_nll_sum: rng.gen_range(0.2f32..4.0) * (prompt + answer + 4) as f32,
        answer_cond_nll_sum: uncond * rng.gen_range(0.3f32..1.3),
        answer_uncond_nll_sum: uncond,
    }
}

pub fn embedding_row(pool_index: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD ^ ((pool_index as u64) << 20));
    (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Write a feature store for `pool` into `dir`, `shard_rows` records per
/// shard; returns the manifest path.
pub fn write_store(dir: &Path, pool: &DataPool, dim: usize, seed: u64, shard_rows: usize, kinds: Kinds) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let mut manifest = FeatureManifest::new(pool.fingerprint(), "synthetic-lm", dim);
    let mut start = 0;
    let mut shard = 0;
    while start < pool.len() {
        let end = (start + shard_rows).min(pool.len());
        let mut add = |kind: RecordKind, name: String| {
            manifest.shards.push(ShardEntry {
                kind,
                path: name.into(),
                start,
                count: end - start,
            });
        };
        if kinds.hidden {
            let recs: Vec<_> = (start..end).map(|i| hidden_record(i, dim, seed)).collect();
            let name = format!("hidden-{shard:04}.bin");
            write_hidden_states(&dir.join(&name), &recs).unwrap();
            add(RecordKind::HiddenState, name);
        }
        if kinds.losses {
            let recs: Vec<_> = (start..end).map(|i| loss_record(i, seed)).collect();
            let name = format!("loss-{shard:04}.bin");
            write_losses(&dir.join(&name), &recs).unwrap();
            add(RecordKind::Loss, name);
        }
        if kinds.embeddings {
            let mut m = Matrix::empty(dim);
            for i in start..end {
                m.push_row(&embedding_row(i, dim, seed)).unwrap();
            }
            let name = format!("emb-{shard:04}.bin");
            write_embeddings(&dir.join(&name), start, &m).unwrap();
            add(RecordKind::Embedding, name);
        }
        start = end;
        shard += 1;
    }
    let path = dir.join("manifest.json");
    manifest.save(&path).unwrap();
    path
}

/// A TOML string value for a path.
pub fn toml_path(path: &Path) -> String {
    format!("{:?}", p(path))
}
