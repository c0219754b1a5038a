//! Seeded shuffling into mini-batches, and nearest-neighbour resizing.

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::dataset::Sample;

/// One mini-batch: images `[N, 1, H, W]` and the matching masks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub masks: Vec<LabelMask>,
}

/// Visiting order for one epoch: Fisher–Yates on a stream keyed by
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed).fork(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    order
}

/// Index partition of one epoch; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_iter", "batch size must be at least 1"));
    }
    if n == 0 {
        return Err(Error::invalid("batch_iter", "no samples"));
    }
    Ok(epoch_order(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Stacks the listed samples into a batch. All must share one size.
pub fn collate(samples: &[Sample], indices: &[usize]) -> Result<Batch> {
    let first = samples
        .get(
            *indices
                .first()
                .ok_or_else(|| Error::invalid("collate", "empty batch"))?,
        )
        .ok_or_else(|| Error::invalid("collate", "index out of range"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(indices.len() * h * w);
    let mut masks = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::invalid("collate", "index out of range"))?;
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::SampleShape {
                id: s.id.clone(),
                image: vec![h, w],
                mask: vec![s.height(), s.width()],
            });
        }
        data.extend_from_slice(&s.image);
        masks.push(s.mask.clone());
    }
    Ok(Batch {
        indices: indices.to_vec(),
        images: Tensor::new(&[indices.len(), 1, h, w], data)?,
        masks,
    })
}

/// All batches of one epoch, in visiting order.
pub fn batch_iter(samples: &[Sample], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    batch_indices(samples.len(), batch_size, seed, epoch)?
        .iter()
        .map(|idx| collate(samples, idx))
        .collect()
}

/// Source index for destination index `i` when mapping `from` onto `to`.
fn nearest(i: usize, from: usize, to: usize) -> usize {
    i * from / to
}

/// Resizes image and mask to `target × target` by nearest neighbour.
pub fn resize_nearest(sample: &Sample, target: usize) -> Result<Sample> {
    if target == 0 || !target.is_multiple_of(32) {
        return Err(Error::invalid(
            "resize_nearest",
            format!("target {target} must be a positive multiple of 32"),
        ));
    }
    let (h, w) = (sample.height(), sample.width());
    let mut image = Vec::with_capacity(target * target);
    let mut labels = Vec::with_capacity(target * target);
    for y in 0..target {
        let sy = nearest(y, h, target);
        for x in 0..target {
            let sx = nearest(x, w, target);
            image.push(sample.image[sy * w + sx]);
            labels.push(sample.mask.get(sy, sx));
        }
    }
    Sample::new(sample.id.clone(), image, LabelMask::new(target, target, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(n: usize, size: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                Sample::new(
                    format!("s{i}"),
                    vec![i as f64; size * size],
                    LabelMask::filled(size, size, (i % 4) as u8).unwrap(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn remainder_batch_kept() {
        let b = batch_iter(&dummy(10, 2), 8, 1, 0).unwrap();
        assert_eq!(b.iter().map(|b| b.masks.len()).collect::<Vec<_>>(), vec![8, 2]);
        assert_eq!(b[0].images.shape(), &[8, 1, 2, 2]);
        // image values record the sample index
        for batch in &b {
            for (k, &i) in batch.indices.iter().enumerate() {
                assert_eq!(batch.images.data()[k * 4], i as f64);
            }
        }
    }

    #[test]
    fn partition_for_all_small_cases() {
        for n in 1..=64 {
            for bs in 1..=n + 1 {
                let parts = batch_indices(n, bs, 9, 3).unwrap();
                let mut all: Vec<usize> = parts.concat();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
                assert!(parts[..parts.len() - 1].iter().all(|p| p.len() == bs));
                assert!(!parts.last().unwrap().is_empty());
            }
        }
    }

    #[test]
    fn order_depends_on_seed_and_epoch() {
        assert_eq!(epoch_order(20, 5, 1), epoch_order(20, 5, 1));
        assert_ne!(epoch_order(20, 5, 1), epoch_order(20, 5, 2));
        assert_ne!(epoch_order(20, 5, 1), epoch_order(20, 6, 1));
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(batch_iter(&[], 8, 0, 0).is_err());
        assert!(batch_iter(&dummy(2, 2), 0, 0, 0).is_err());
    }

    #[test]
    fn resize_identity_and_factor_two_inverse() {
        let mut rng = Rng::new(2);
        let s = Sample::new(
            "r",
            (0..64 * 64).map(|_| rng.uniform()).collect(),
            LabelMask::new(64, 64, (0..64 * 64).map(|_| rng.below(3) as u8).collect()).unwrap(),
        )
        .unwrap();
        assert_eq!(resize_nearest(&s, 64).unwrap(), s);
        let up = resize_nearest(&s, 128).unwrap();
        assert_eq!(resize_nearest(&up, 64).unwrap(), s);
        assert!(up.mask.labels().iter().all(|&l| l < 3));
        assert!(resize_nearest(&s, 48).is_err());
        assert!(resize_nearest(&s, 0).is_err());
    }
}
