use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// A category that had fewer than `k` positive arguments to draw from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortfall {
    pub category: usize,
    pub available: usize,
    pub requested: usize,
}

#[derive(Debug, Clone)]
pub struct FewShotSample {
    pub dataset: Dataset,
    pub shortfalls: Vec<Shortfall>,
}

/// Draws up to `k` positives per category without replacement and returns the
/// de-duplicated union in original dataset order.
pub fn sample_few_shot(dataset: &Dataset, k: usize, seed: u64) -> Result<FewShotSample> {
    if k == 0 {
        return Err(Error::contract("few-shot k must be at least 1"));
    }
    let labels = dataset.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    let mut shortfalls = Vec::new();
    for category in 0..labels.num_labels() {
        let mut positives: Vec<usize> = (0..labels.len()).filter(|&r| labels.get(r, category) == 1).collect();
        if positives.len() < k {
            log::warn!(
                "category {category}: only {} positives for {k}-shot sampling",
                positives.len()
            );
            shortfalls.push(Shortfall {
                category,
                available: positives.len(),
                requested: k,
            });
        }
        positives.shuffle(&mut rng);
        chosen.extend(positives.into_iter().take(k));
    }
    let indices: Vec<usize> = chosen.into_iter().collect();
    Ok(FewShotSample {
        dataset: dataset.select(&indices),
        shortfalls,
    })
}

/// Uniform subset of `ceil(fraction * N)` arguments, kept in original order.
pub fn sample_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.len();
    // Guard against 0.05 * 200 = 10.000000000000002 style rounding.
    let take = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let take = take.min(n);
    if take == n {
        return Ok(dataset.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = index::sample(&mut rng, n, take).into_vec();
    indices.sort_unstable();
    Ok(dataset.select(&indices))
}
