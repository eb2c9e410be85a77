use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Smallest batch that batch norm can train on.
pub const MIN_BATCH: usize = 2;

/// Shuffles `samples` with a stream keyed by `(seed, epoch)` and cuts it
/// into batches of `batch_size`. A final batch smaller than [`MIN_BATCH`]
/// is dropped; any other short final batch is kept.
pub fn batches(samples: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < MIN_BATCH {
        return Err(Error::Config(format!(
            "batch size must be at least {MIN_BATCH}, got {batch_size}"
        )));
    }
    let mut order = samples.to_vec();
    order.shuffle(&mut epoch_rng(seed, epoch));
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= MIN_BATCH)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Independent stream per epoch; the same `(seed, epoch)` always yields
/// the same generator.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sizes_for_130() {
        let s: Vec<usize> = (0..130).collect();
        let b = batches(&s, 64, 0, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 64, 2]);
        let b = batches(&s[..129], 64, 0, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 64]);
    }

    #[test]
    fn order_is_keyed_by_seed_and_epoch() {
        let s: Vec<usize> = (0..200).collect();
        assert_eq!(batches(&s, 64, 7, 3).unwrap(), batches(&s, 64, 7, 3).unwrap());
        assert_ne!(batches(&s, 64, 7, 3).unwrap(), batches(&s, 64, 7, 4).unwrap());
        assert_ne!(batches(&s, 64, 7, 3).unwrap(), batches(&s, 64, 8, 3).unwrap());
    }

    #[test]
    fn batch_of_one_is_rejected() {
        assert!(matches!(batches(&[1, 2], 1, 0, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn batches_partition_the_input(n in 0usize..300, size in 2usize..70, seed: u64, epoch in 0u64..50) {
            let s: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
            let b = batches(&s, size, seed, epoch).unwrap();
            let mut seen: Vec<usize> = b.iter().flatten().copied().collect();
            seen.sort_unstable();
            let dropped = if n % size == 1 { 1 } else { 0 };
            prop_assert_eq!(seen.len(), n - dropped);
            prop_assert!(seen.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(seen.iter().all(|x| s.contains(x)));
            prop_assert!(b.iter().all(|c| c.len() >= MIN_BATCH && c.len() <= size));
        }
    }
}
