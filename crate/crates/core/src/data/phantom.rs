//! Synthetic short-axis cardiac phantom: an LV disk inside a myocardium
//! ring, with an RV crescent on one side.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::rng::Rng;

use super::dataset::{split_counts, write_dataset, DatasetSplit, Sample};

pub const PHANTOM_CLASSES: usize = 4;
pub const PHANTOM_MIN_SIZE: usize = 64;
pub const NOISE_SIGMA: f64 = 0.05;

pub const BACKGROUND: u8 = 0;
pub const RV: u8 = 1;
pub const MYO: u8 = 2;
pub const LV: u8 = 3;

/// Base intensity per class, indexed by label.
pub const INTENSITY: [f64; 4] = [0.15, 0.6, 0.35, 0.85];

/// Random geometry of one phantom, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomGeometry {
    pub center: (f64, f64),
    pub r_lv: f64,
    pub r_myo: f64,
    pub rv_center: (f64, f64),
    pub r_rv: f64,
}

impl PhantomGeometry {
    pub fn sample(rng: &mut Rng, size: usize) -> Self {
        let s = size as f64;
        let cx = s / 2.0 + rng.uniform_range(-0.08, 0.08) * s;
        let cy = s / 2.0 + rng.uniform_range(-0.08, 0.08) * s;
        let r_lv = rng.uniform_range(0.08, 0.12) * s;
        let r_myo = r_lv + rng.uniform_range(0.05, 0.07) * s;
        let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
        let r_rv = r_myo * rng.uniform_range(0.85, 1.0);
        let dist = 0.9 * r_myo;
        PhantomGeometry {
            center: (cx, cy),
            r_lv,
            r_myo,
            rv_center: (cx + dist * angle.cos(), cy + dist * angle.sin()),
            r_rv,
        }
    }

    /// Label at the centre of pixel `(y, x)`.
    pub fn label(&self, y: usize, x: usize) -> u8 {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let d = (px - self.center.0).hypot(py - self.center.1);
        if d < self.r_lv {
            LV
        } else if d < self.r_myo {
            MYO
        } else if (px - self.rv_center.0).hypot(py - self.rv_center.1) < self.r_rv {
            RV
        } else {
            BACKGROUND
        }
    }
}

/// One `size × size` phantom drawn from `rng`.
pub fn generate_phantom(rng: &mut Rng, size: usize, id: impl Into<String>) -> Result<Sample> {
    if size < PHANTOM_MIN_SIZE {
        return Err(Error::invalid(
            "generate_phantom",
            format!("size {size} below minimum {PHANTOM_MIN_SIZE}"),
        ));
    }
    let geo = PhantomGeometry::sample(rng, size);
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            labels.push(geo.label(y, x));
        }
    }
    let image = labels
        .iter()
        .map(|&l| (INTENSITY[l as usize] + NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0))
        .collect();
    Sample::new(id, image, LabelMask::new(size, size, labels)?)
}

/// `n` phantoms, each from its own stream of `seed`, with ids
/// `phantom_0000, …` assigned to train/val/test in order.
pub fn phantom_dataset(n: usize, size: usize, seed: u64, fracs: [f64; 3]) -> Result<(Vec<Sample>, DatasetSplit)> {
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let counts = split_counts(n, fracs)?;
    let root = Rng::new(seed);
    let samples = (0..n)
        .map(|i| generate_phantom(&mut root.fork(i as u64), size, format!("phantom_{i:04}")))
        .collect::<Result<Vec<_>>>()?;
    let mut split = DatasetSplit::default();
    let mut ids = samples.iter().map(|s| s.id.clone());
    split.train.extend(ids.by_ref().take(counts[0]));
    split.val.extend(ids.by_ref().take(counts[1]));
    split.test.extend(ids);
    Ok((samples, split))
}

/// Generates a phantom dataset and writes it under `root`.
pub fn write_phantom_dataset(root: &Path, n: usize, size: usize, seed: u64, fracs: [f64; 3]) -> Result<DatasetSplit> {
    let (samples, split) = phantom_dataset(n, size, seed, fracs)?;
    write_dataset(root, &samples, &split)?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(&mut Rng::new(3), 64, "x").unwrap();
        let b = generate_phantom(&mut Rng::new(3), 64, "x").unwrap();
        let c = generate_phantom(&mut Rng::new(4), 64, "x").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mask, c.mask);
    }

    #[test]
    fn too_small_rejected() {
        assert!(generate_phantom(&mut Rng::new(0), 63, "x").is_err());
    }

    #[test]
    fn background_dominates_and_all_classes_present() {
        for seed in 0..100 {
            let s = generate_phantom(&mut Rng::new(seed), 64, "x").unwrap();
            let h = s.mask.histogram(PHANTOM_CLASSES);
            assert_eq!(h.iter().sum::<usize>(), 64 * 64);
            assert!(h[0] as f64 / 4096.0 >= 0.8, "seed {seed}: {h:?}");
            assert!(h[1..].iter().all(|&c| c > 0), "seed {seed}: {h:?}");
        }
    }

    #[test]
    fn lv_strictly_inside_myocardium() {
        for seed in 0..20 {
            let s = generate_phantom(&mut Rng::new(seed), 64, "x").unwrap();
            let m = &s.mask;
            for y in 0..64 {
                for x in 0..64 {
                    if m.get(y, x) != LV {
                        continue;
                    }
                    assert!(y > 0 && x > 0 && y < 63 && x < 63);
                    for (dy, dx) in [(0, 1), (2, 1), (1, 0), (1, 2)] {
                        let n = m.get(y + dy - 1, x + dx - 1);
                        assert!(n == LV || n == MYO, "seed {seed} at ({y},{x})");
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_split_follows_fractions() {
        let (samples, split) = phantom_dataset(100, 64, 1, [0.6, 0.1, 0.3]).unwrap();
        assert_eq!(samples.len(), 100);
        assert_eq!(split.counts(), (60, 10, 30));
    }
}
