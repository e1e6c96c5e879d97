//! Seeded mini-batch index iteration.

use crate::rng::indexed_stream_rng;
use rand::seq::SliceRandom;

/// A seeded permutation of `0..n`, chunked into batches. The last partial
/// batch is kept. The permutation is a pure function of `(seed, epoch)`,
/// so the same pair always reproduces the same batch sequence.
pub fn minibatch_iterator(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut indexed_stream_rng(seed, "shuffle", epoch));
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
