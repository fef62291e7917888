//! Seeded random baselines.
//!
//! The generator is ChaCha20 (`rand_chacha`) seeded with `seed_from_u64`;
//! index draws go through `u64` ranges so results do not depend on the
//! platform's pointer width.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::corpus::DataPool;
use crate::error::{Error, Result};

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// First `n` positions of a Fisher-Yates shuffle of `items`.
fn partial_shuffle<T: Copy>(rng: &mut ChaCha20Rng, items: &mut [T], n: usize) -> Vec<T> {
    let len = items.len() as u64;
    for i in 0..n {
        let j = rng.gen_range(i as u64..len) as usize;
        items.swap(i, j);
    }
    items[..n].to_vec()
}

/// `n` distinct pool indices drawn uniformly without replacement, in draw
/// order.
pub fn random_select(pool_len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > pool_len {
        return Err(Error::NotEnough {
            requested: n,
            available: pool_len,
        });
    }
    let mut all: Vec<usize> = (0..pool_len).collect();
    Ok(partial_shuffle(&mut rng(seed), &mut all, n))
}

/// Per-source sample counts for a balanced draw of `n`.
///
/// Every active source gets `remaining / active`, with the remainder handed
/// out one each in ascending source-name order. Sources smaller than their
/// budget contribute everything and drop out; the rest split what is left.
/// Repeats until every budget fits.
pub fn balanced_budgets(sizes: &BTreeMap<String, usize>, n: usize) -> Result<BTreeMap<String, usize>> {
    let total: usize = sizes.values().sum();
    if n > total {
        return Err(Error::NotEnough {
            requested: n,
            available: total,
        });
    }
    let mut budgets = BTreeMap::new();
    let mut active: Vec<(&String, usize)> = sizes
        .iter()
        .filter(|(_, &s)| s > 0)
        .map(|(k, &s)| (k, s))
        .collect();
    let mut remaining = n;
    while !active.is_empty() {
        let share = remaining / active.len();
        let extra = remaining % active.len();
        let budget = |i: usize| share + usize::from(i < extra);
        let exhausted: Vec<usize> = (0..active.len())
            .filter(|&i| active[i].1 < budget(i))
            .collect();
        if exhausted.is_empty() {
            for (i, (name, _)) in active.iter().enumerate() {
                budgets.insert((*name).clone(), budget(i));
            }
            break;
        }
        for &i in exhausted.iter().rev() {
            let (name, size) = active.remove(i);
            budgets.insert(name.clone(), size);
            remaining -= size;
        }
    }
    for name in sizes.keys() {
        budgets.entry(name.clone()).or_insert(0);
    }
    Ok(budgets)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedSelection {
    /// Selected pool indices, grouped by source in name order.
    pub indices: Vec<usize>,
    pub per_source: BTreeMap<String, usize>,
}

/// Equal per-source budgets with shortfall redistribution; uniform without
/// replacement inside each source. One generator is shared across sources,
/// consumed in source-name order.
pub fn balanced_random_select(pool: &DataPool, n: usize, seed: u64) -> Result<BalancedSelection> {
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for s in pool.samples() {
        members.entry(s.source.clone()).or_default().push(s.pool_index);
    }
    let sizes = members.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let budgets = balanced_budgets(&sizes, n)?;
    let mut rng = rng(seed);
    let mut indices = Vec::with_capacity(n);
    for (source, idx) in members.iter_mut() {
        indices.extend(partial_shuffle(&mut rng, idx, budgets[source]));
    }
    Ok(BalancedSelection {
        indices,
        per_source: budgets,
    })
}
