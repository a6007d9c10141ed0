use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{usage_err, Result};

/// Seeded permutation of `0..n` split into batches of `batch_size`; the last
/// batch may be short. The order depends only on `(shuffle_seed, epoch)`.
pub fn batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(usage_err!("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn sizes_and_determinism() {
        let b = batches(10, 4, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, batches(10, 4, 1, 0).unwrap());
        assert_ne!(b, batches(10, 4, 1, 1).unwrap());
        assert!(batches(10, 0, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn every_sample_once_per_epoch(n in 1usize..200, bs in 1usize..40, seed: u64, epochs in 1u64..4) {
            let mut seen = vec![0u64; n];
            for e in 0..epochs {
                for batch in batches(n, bs, seed, e).unwrap() {
                    prop_assert!(!batch.is_empty() && batch.len() <= bs);
                    for i in batch {
                        seen[i] += 1;
                    }
                }
            }
            prop_assert!(seen.iter().all(|&c| c == epochs));
        }
    }
}
