use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Clips per class in the forecasting pool.
pub const POOL_PER_CLASS: usize = 20;
pub const SHOTS: [usize; 3] = [2, 3, 4];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    /// 1 for pre-ictal, 0 for interictal.
    pub label: u8,
}

impl PoolEntry {
    pub fn new(id: impl Into<String>, label: u8) -> Self {
        Self { id: id.into(), label }
    }
}

/// One few-shot task. Support holds `shot` positives then `shot` negatives;
/// query is the rest of the pool in pool order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub shot: usize,
    pub seed: u64,
    pub support: Vec<PoolEntry>,
    pub query: Vec<PoolEntry>,
}

/// Checks the pool layout: unique ids, binary labels, `POOL_PER_CLASS` of each.
pub fn validate_pool(pool: &[PoolEntry]) -> Result<()> {
    let mut seen = HashSet::with_capacity(pool.len());
    for e in pool {
        if e.label > 1 {
            return Err(Error::Protocol(format!("clip {} has non-binary label {}", e.id, e.label)));
        }
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Protocol(format!("duplicate clip id {}", e.id)));
        }
    }
    let pos = pool.iter().filter(|e| e.label == 1).count();
    let neg = pool.len() - pos;
    if pos != POOL_PER_CLASS || neg != POOL_PER_CLASS {
        return Err(Error::Protocol(format!(
            "pool has {pos} positive and {neg} negative clips, expected {POOL_PER_CLASS} of each"
        )));
    }
    Ok(())
}

/// Seeded uniform draw of `shot` clips per class; query is everything else.
pub fn sample_episode(pool: &[PoolEntry], shot: usize, seed: u64) -> Result<Episode> {
    if !SHOTS.contains(&shot) {
        return Err(Error::Protocol(format!("shot {shot} not in {SHOTS:?}")));
    }
    validate_pool(pool)?;
    let mut rng = seeds::rng(seeds::derive(seed, "episode"));
    let mut in_support = vec![false; pool.len()];
    let mut support = Vec::with_capacity(2 * shot);
    for label in [1, 0] {
        let members: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label == label).collect();
        let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), shot)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picked.sort_unstable();
        for i in picked {
            in_support[i] = true;
            support.push(pool[i].clone());
        }
    }
    let query = pool
        .iter()
        .zip(&in_support)
        .filter(|(_, &s)| !s)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(Episode {
        shot,
        seed,
        support,
        query,
    })
}

/// Seed of split `split` for `shot`; shared across configurations so every
/// configuration sees the same episodes.
pub fn episode_seed(seed: u64, shot: usize, split: usize) -> u64 {
    seeds::derive_indexed(seeds::derive_indexed(seed, "shot", shot as u64), "split", split as u64)
}
