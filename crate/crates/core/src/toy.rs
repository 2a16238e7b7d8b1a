//! Procedural image datasets for smoke tests and demos. Class `k` is a
//! bright blob at its own grid position over a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datasets::{Dataset, ImageShape, LabeledImageSet, SplitTag};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySpec {
    pub num_classes: usize,
    pub size: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            num_classes: 4,
            size: 12,
            channels: 1,
            train_per_class: 40,
            val_per_class: 10,
            test_per_class: 40,
            noise: 0.05,
            seed: 0,
        }
    }
}

fn centre(class: usize, classes: usize, size: usize) -> (f64, f64) {
    let side = (classes as f64).sqrt().ceil() as usize;
    let step = size as f64 / side as f64;
    let (r, c) = (class / side, class % side);
    ((r as f64 + 0.5) * step, (c as f64 + 0.5) * step)
}

fn sample_image(class: usize, spec: &ToySpec, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let (cy, cx) = centre(class, spec.num_classes, spec.size);
    let cy = cy + rng.random_range(-0.75..0.75);
    let cx = cx + rng.random_range(-0.75..0.75);
    let amp = rng.random_range(0.6..0.9);
    let width = spec.size as f64 / (2.0 * (spec.num_classes as f64).sqrt().ceil());
    let bg = Normal::new(0.15, spec.noise.max(1e-12)).unwrap();
    for y in 0..spec.size {
        for x in 0..spec.size {
            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
            let blob = amp * (-d2 / (2.0 * width * width)).exp();
            for ch in 0..spec.channels {
                let tint = 1.0 - 0.2 * ((class + ch) % 3) as f64;
                let v = bg.sample(rng) + blob * tint;
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
}

fn split(spec: &ToySpec, per_class: usize, tag: SplitTag, rng: &mut ChaCha8Rng) -> Result<LabeledImageSet> {
    let shape = ImageShape { height: spec.size, width: spec.size, channels: spec.channels };
    let mut px = Vec::with_capacity(per_class * spec.num_classes * shape.pixels());
    let mut labels = Vec::new();
    for k in 0..spec.num_classes {
        for _ in 0..per_class {
            sample_image(k, spec, rng, &mut px);
            labels.push(k);
        }
    }
    LabeledImageSet::new(shape, spec.num_classes, px, labels, tag)
}

/// A deterministic dataset with the given per-class split sizes.
pub fn make_dataset(spec: &ToySpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.size < 8 {
        return Err(Error::Config("toy data needs ≥ 1 class and size ≥ 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(Dataset {
        num_classes: spec.num_classes,
        train: split(spec, spec.train_per_class, SplitTag::Train, &mut rng)?,
        val: split(spec, spec.val_per_class, SplitTag::Val, &mut rng)?,
        test: split(spec, spec.test_per_class, SplitTag::Test, &mut rng)?,
    })
}
