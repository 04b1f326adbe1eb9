//! Seeded synthetic two-class images and stratified k-fold plans.
//!
//! Class 0 is a smooth sinusoidal texture with pixel noise; class 1 adds a
//! handful of Gaussian bright blobs. A random per-image base brightness keeps
//! mean intensity only weakly informative, so the blobs have to be found.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{RaaError, Result};
use crate::par;
use crate::tensor::{load_set, save_set, NamedTensorSet, Tensor};

pub const CHANNELS: usize = 3;
pub const MIN_SIZE: usize = 32;
pub const NOISE_SIGMA: f64 = 0.05;
pub const BLOB_AMPLITUDE: f64 = 0.5;
pub const BLOB_COUNT: (usize, usize) = (3, 6);
pub const BLOB_RADIUS: (f64, f64) = (4.0, 8.0);
/// Per-image base brightness range.
pub const BASE_BRIGHTNESS: (f64, f64) = (0.3, 0.42);
const WAVES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[size, size, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub id: u64,
}

/// splitmix64 finalizer; decorrelates per-sample streams.
fn mix(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn render(size: usize, label: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = rng.random_range(BASE_BRIGHTNESS.0..BASE_BRIGHTNESS.1);
    let tint: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            (
                rng.random_range(0.03..0.08),
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let blobs: Vec<(f64, f64, f64)> = if label == 1 {
        let count = rng.random_range(BLOB_COUNT.0..=BLOB_COUNT.1);
        (0..count)
            .map(|_| {
                let r = rng.random_range(BLOB_RADIUS.0..BLOB_RADIUS.1);
                let cy = rng.random_range(r..size as f64 - r);
                let cx = rng.random_range(r..size as f64 - r);
                (cy, cx, r)
            })
            .collect()
    } else {
        Vec::new()
    };
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let s = size as f64;
    let mut img = vec![0.0; size * size * CHANNELS];
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f64, x as f64);
            let mut v = base;
            for &(a, fy, fx, phase) in &waves {
                v += a * (TAU * (fy * yf + fx * xf) / s + phase).sin();
            }
            for &(cy, cx, r) in &blobs {
                // radius is two standard deviations
                let sigma = r / 2.0;
                let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                v += BLOB_AMPLITUDE * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            for (c, t) in tint.iter().enumerate() {
                img[(y * size + x) * CHANNELS + c] = (v + t + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// `n` balanced samples (label = id mod 2), each drawn from its own stream
/// derived from `(seed, id)` so generation order does not matter.
pub fn generate(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if n % 2 != 0 || n == 0 {
        return Err(RaaError::Config(format!("sample count must be even and positive, got {n}")));
    }
    if size < MIN_SIZE {
        return Err(RaaError::Config(format!("image size must be >= {MIN_SIZE}, got {size}")));
    }
    Ok(par::map_indexed(n, |i| {
        let id = i as u64;
        let label = i % 2;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, id));
        let data = render(size, label, &mut rng);
        Sample {
            image: Tensor::new(vec![size, size, CHANNELS], data).expect("shape"),
            label,
            id,
        }
    }))
}

/// Entries `img.<id>` and `label.<id>`, in sample order.
pub fn to_named_set(samples: &[Sample]) -> NamedTensorSet {
    let mut set = NamedTensorSet::new();
    for s in samples {
        set.insert(format!("img.{}", s.id), s.image.clone()).expect("unique ids");
        set.insert(format!("label.{}", s.id), Tensor::scalar(s.label as f64)).expect("unique ids");
    }
    set
}

pub fn from_named_set(set: &NamedTensorSet) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (name, t) in set.iter() {
        let Some(id) = name.strip_prefix("img.") else {
            continue;
        };
        let id: u64 = id
            .parse()
            .map_err(|_| RaaError::Config(format!("bad sample entry `{name}`")))?;
        let label = set.require(&format!("label.{id}"))?.data()[0];
        if label != 0.0 && label != 1.0 {
            return Err(RaaError::Config(format!("label.{id} = {label} is not 0 or 1")));
        }
        if t.rank() != 3 || t.shape()[2] != CHANNELS {
            return Err(RaaError::dim("dataset", format!("img.{id} has shape {:?}", t.shape())));
        }
        out.push(Sample {
            image: t.clone(),
            label: label as usize,
            id,
        });
    }
    Ok(out)
}

pub fn save_dataset(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    save_set(&to_named_set(samples), path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    from_named_set(&load_set(path)?)
}

/// Mean over all pixels and channels.
pub fn mean_intensity(image: &Tensor) -> f64 {
    image.sum() / image.len() as f64
}

/// Training accuracy of the best single threshold on mean intensity, in
/// either direction.
pub fn threshold_accuracy(samples: &[Sample]) -> f64 {
    let mut v: Vec<(f64, usize)> = samples.iter().map(|s| (mean_intensity(&s.image), s.label)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = v.len();
    let pos = v.iter().filter(|p| p.1 == 1).count();
    // predict 1 above the cut: correct = negatives below + positives above
    let mut best = pos.max(n - pos);
    let (mut neg_below, mut pos_below) = (0, 0);
    for (k, &(_, y)) in v.iter().enumerate() {
        if y == 1 {
            pos_below += 1;
        } else {
            neg_below += 1;
        }
        if k + 1 < n && v[k + 1].0 == v[k].0 {
            continue;
        }
        let above = neg_below + (pos - pos_below);
        best = best.max(above).max(n - above);
    }
    best as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    /// Validation fold of each sample, by position.
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// `(train positions, validation positions)` of fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, &a) in self.assignments.iter().enumerate() {
            if a == f {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val)
    }
}

/// Stratified assignment: each class is shuffled and dealt round-robin, the
/// second class continuing where the first stopped so fold sizes stay within
/// one of each other.
pub fn kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(RaaError::Config(format!("k must be >= 2, got {k}")));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(RaaError::Config("labels must be 0 or 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0; labels.len()];
    let mut next = 0;
    for class in 0..2 {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(RaaError::Config(format!(
                "k = {k} exceeds the {} samples of class {class}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            assignments[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldPlan { k, assignments, seed })
}
