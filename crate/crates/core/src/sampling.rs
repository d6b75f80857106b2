//! Demonstration sampling.
//!
//! Priority sampling biases the demo set toward pool examples that contain
//! the test input's ciphered tokens, so the model sees each substitution in
//! context. Sampling always runs on original (unciphered) text.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cipher::CipheredSet;
use crate::corpus::DemoPool;
use crate::rng::{self, DetRng, TAG_SAMPLE};
use crate::tokenization::TokenId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplingError {
    #[error("demo pool has {available} candidates, {requested} requested")]
    PoolExhausted { available: usize, requested: usize },
    #[error("shot count must be at least 1")]
    ZeroShots,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Priority,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub n: usize,
    pub mode: SampleMode,
    pub seed: u64,
}

/// Unique ids of `test_tokens` that are in `set`, in first-occurrence order.
pub fn ciphered_tokens_in(test_tokens: &[TokenId], set: &CipheredSet) -> Vec<TokenId> {
    let mut seen = BTreeSet::new();
    test_tokens
        .iter()
        .copied()
        .filter(|t| set.contains(*t) && seen.insert(*t))
        .collect()
}

fn candidates(pool: &DemoPool, exclude: Option<&str>) -> Vec<usize> {
    (0..pool.len())
        .filter(|&i| Some(pool.get(i).id.as_str()) != exclude)
        .collect()
}

fn check(available: usize, n: usize) -> Result<(), SamplingError> {
    if n == 0 {
        return Err(SamplingError::ZeroShots);
    }
    if available < n {
        return Err(SamplingError::PoolExhausted {
            available,
            requested: n,
        });
    }
    Ok(())
}

fn take_uniform(rng: &mut DetRng, from: &mut Vec<usize>) -> usize {
    let i = rng.random_range(0..from.len());
    from.swap_remove(i)
}

/// Priority sampling.
///
/// With `m` ciphered tokens in the test input: when `m ≥ n`, a random
/// `n`-subset of them is covered; when `m < n`, all `m` are covered and the
/// remaining `n − m` demos are uniform picks. Each covered token gets one
/// uniform pick among unused pool instances containing it, or a uniform
/// fallback pick when none remain. The result is shuffled. Returns pool
/// positions.
pub fn priority_sample(
    pool: &DemoPool,
    test_id: &str,
    test_tokens: &[TokenId],
    set: &CipheredSet,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>, SamplingError> {
    let mut remaining = candidates(pool, Some(test_id));
    check(remaining.len(), n)?;
    let mut rng = rng::keyed(seed, &[TAG_SAMPLE, rng::hash_str(test_id)]);

    let ciphered = ciphered_tokens_in(test_tokens, set);
    let targets: Vec<TokenId> = if ciphered.len() > n {
        index::sample(&mut rng, ciphered.len(), n)
            .into_iter()
            .map(|i| ciphered[i])
            .collect()
    } else {
        ciphered
    };

    let mut picked = Vec::with_capacity(n);
    let mut used = BTreeSet::new();
    for token in targets {
        let mut containing: Vec<usize> = pool
            .containing(token)
            .iter()
            .copied()
            .filter(|i| !used.contains(i) && pool.get(*i).id != test_id)
            .collect();
        let pick = if containing.is_empty() {
            take_uniform(&mut rng, &mut remaining)
        } else {
            let p = take_uniform(&mut rng, &mut containing);
            remaining.retain(|&i| i != p);
            p
        };
        used.insert(pick);
        picked.push(pick);
    }
    while picked.len() < n {
        picked.push(take_uniform(&mut rng, &mut remaining));
    }
    picked.shuffle(&mut rng);
    Ok(picked)
}

/// Uniform sampling without replacement, excluding `exclude`.
pub fn random_sample(
    pool: &DemoPool,
    n: usize,
    seed: u64,
    exclude: Option<&str>,
) -> Result<Vec<usize>, SamplingError> {
    let remaining = candidates(pool, exclude);
    check(remaining.len(), n)?;
    let mut rng = rng::keyed(
        seed,
        &[TAG_SAMPLE, exclude.map(rng::hash_str).unwrap_or(0), 1],
    );
    let mut picked: Vec<usize> = index::sample(&mut rng, remaining.len(), n)
        .into_iter()
        .map(|i| remaining[i])
        .collect();
    picked.shuffle(&mut rng);
    Ok(picked)
}

/// Dispatches on `plan.mode`.
pub fn sample(
    plan: &SamplePlan,
    pool: &DemoPool,
    test_id: &str,
    test_tokens: &[TokenId],
    set: &CipheredSet,
) -> Result<Vec<usize>, SamplingError> {
    match plan.mode {
        SampleMode::Priority => priority_sample(pool, test_id, test_tokens, set, plan.n, plan.seed),
        SampleMode::Random => random_sample(pool, plan.n, plan.seed, Some(test_id)),
    }
}
