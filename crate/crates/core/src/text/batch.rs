use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::ParallelExample;
use crate::error::{Error, Result};

/// Indices into the example slice handed to [`make_batches`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Padded size of a batch: source and target are padded separately and
/// the larger of the two governs.
pub fn padded_tokens(examples: &[&ParallelExample]) -> usize {
    let src = examples.iter().map(|e| e.source_ids.len()).max().unwrap_or(0);
    let tgt = examples.iter().map(|e| e.target_ids.len()).max().unwrap_or(0);
    src.max(tgt) * examples.len()
}

fn length(e: &ParallelExample) -> usize {
    e.source_ids.len().max(e.target_ids.len())
}

/// Sorts examples by length and packs them greedily so that every batch's
/// padded token count stays within `max_tokens`. With a seed, ties in
/// length are broken by a seeded shuffle and the batch order is shuffled.
pub fn make_batches(examples: &[ParallelExample], max_tokens: usize, seed: Option<u64>) -> Result<Vec<Batch>> {
    if let Some(e) = examples.iter().find(|e| length(e) > max_tokens) {
        return Err(Error::Config(format!(
            "example {} has {} tokens, above max_tokens {max_tokens}",
            e.example_id,
            length(e)
        )));
    }
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(rng) = rng.as_mut() {
        order.shuffle(rng);
    }
    order.sort_by_key(|&i| {
        let e = &examples[i];
        (length(e), e.source_ids.len(), e.target_ids.len())
    });

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let (mut max_src, mut max_tgt) = (0, 0);
    for i in order {
        let e = &examples[i];
        let src = max_src.max(e.source_ids.len());
        let tgt = max_tgt.max(e.target_ids.len());
        if !current.is_empty() && src.max(tgt) * (current.len() + 1) > max_tokens {
            batches.push(Batch {
                indices: std::mem::take(&mut current),
            });
            max_src = e.source_ids.len();
            max_tgt = e.target_ids.len();
        } else {
            max_src = src;
            max_tgt = tgt;
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(Batch { indices: current });
    }
    if let Some(rng) = rng.as_mut() {
        batches.shuffle(rng);
    }
    Ok(batches)
}
