use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mix_seed;
use super::sample::{Corpus, MixedSample};

/// Shuffled index batches for one epoch; a pure function of `(len, batch_size, seed, epoch)`.
/// The last batch may be short.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn batches(corpus: &Corpus, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<&MixedSample>> {
    batch_indices(corpus.len(), batch_size, seed, epoch)
        .into_iter()
        .map(|b| b.into_iter().map(|i| &corpus.samples[i]).collect())
        .collect()
}
