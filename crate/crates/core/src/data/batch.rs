use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::{Error, Result, Tensor};

/// Samples stacked along a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, C, H, W]`
    pub images: Tensor<f32>,
    /// `B·H·W` class indices
    pub masks: Vec<u8>,
}

/// Sample indices of every batch of one epoch: a shuffle keyed by
/// `(seed, epoch)`, cut into batches of `batch_size` with a final short
/// batch when `n` does not divide evenly.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Empty("split"));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks `samples[i]` for each `i` in `indices`.
pub fn stack(samples: &[Sample], indices: &[usize]) -> Result<Batch> {
    let first = samples
        .get(*indices.first().ok_or(Error::Empty("batch"))?)
        .ok_or_else(|| Error::invalid("stack", "sample index out of range"))?;
    let shape = first.image.shape().to_vec();
    let mut images = Vec::with_capacity(indices.len() * first.image.len());
    let mut masks = Vec::with_capacity(indices.len() * first.mask.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::invalid("stack", format!("sample index {i} out of range")))?;
        if s.image.shape() != shape {
            return Err(Error::Shape {
                op: "stack",
                lhs: shape,
                rhs: s.image.shape().to_vec(),
            });
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(&s.mask);
    }
    let mut batch_shape = vec![indices.len()];
    batch_shape.extend(shape);
    Ok(Batch {
        images: Tensor::new(batch_shape, images)?,
        masks,
    })
}

/// All batches of one epoch, in order.
pub fn batch_iter(samples: &[Sample], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    batch_order(samples.len(), batch_size, seed, epoch)?
        .iter()
        .map(|idx| stack(samples, idx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn five_samples_in_batches_of_two() {
        let sizes: Vec<usize> = batch_order(5, 2, 0, 0).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, [2, 2, 1]);
    }

    #[test]
    fn order_is_keyed_by_seed_and_epoch() {
        assert_eq!(batch_order(20, 3, 1, 2).unwrap(), batch_order(20, 3, 1, 2).unwrap());
        assert_ne!(batch_order(20, 3, 1, 2).unwrap(), batch_order(20, 3, 1, 3).unwrap());
        assert_ne!(batch_order(20, 3, 1, 2).unwrap(), batch_order(20, 3, 2, 2).unwrap());
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(matches!(batch_order(0, 2, 0, 0), Err(Error::Empty(_))));
    }

    #[test]
    fn stacking_preserves_sample_layout() {
        let a = Sample::new(Tensor::full([1, 2, 2], 1.0), vec![1, 0, 0, 1]).unwrap();
        let b = Sample::new(Tensor::full([1, 2, 2], 2.0), vec![2, 2, 0, 0]).unwrap();
        let batch = stack(&[a, b], &[1, 0]).unwrap();
        assert_eq!(batch.images.shape(), [2, 1, 2, 2]);
        assert_eq!(batch.images.data(), &[2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(batch.masks, [2, 2, 0, 0, 1, 0, 0, 1]);
    }

    proptest! {
        #[test]
        fn one_epoch_covers_the_split_exactly_once(n in 1usize..60, bs in 1usize..9, seed in any::<u64>(), epoch in 0usize..5) {
            let mut all: Vec<usize> = batch_order(n, bs, seed, epoch).unwrap().concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
