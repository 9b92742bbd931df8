//! Deterministic synthetic image classification data.
//!
//! Each class owns a random mean image; samples are that mean plus
//! Gaussian noise, clipped to `[0, 1]`. Labels cycle through the classes so
//! every split is balanced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel range of generated images. FGSM clamps to the same range.
pub const PIXEL_RANGE: (f64, f64) = (0.0, 1.0);

fn default_noise() -> f64 {
    0.35
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub image_size: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub seed: u64,
    /// Standard deviation of the per-pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::config("n_train and n_val must be positive"));
        }
        if self.image_size == 0 || self.channels == 0 || self.n_classes == 0 {
            return Err(Error::config("image_size, channels and n_classes must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// Images stored `[n][c][h][w]` row-major with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_len: usize,
    pub n_classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.sample_len..(i + 1) * self.sample_len]
    }

    /// Gather the images and labels at `indices` into one batch.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.sample_len);
        for &i in indices {
            x.extend_from_slice(self.image(i));
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Contiguous batches of at most `size` samples, in order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = (Vec<f64>, Vec<usize>)> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1))
            .map(|c| self.gather(c))
            .collect::<Vec<_>>()
            .into_iter()
    }
}

/// Training and validation splits drawn from the same class means.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let len = spec.sample_len();
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..len).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let (lo, hi) = PIXEL_RANGE;

    let mut split = |n: usize| {
        let mut images = Vec::with_capacity(n * len);
        let labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
        for &y in &labels {
            images.extend(means[y].iter().map(|m| (m + noise.sample(&mut rng)).clamp(lo, hi)));
        }
        Dataset {
            sample_len: len,
            n_classes: spec.n_classes,
            images,
            labels,
        }
    };
    let train = split(spec.n_train);
    let val = split(spec.n_val);
    Ok((train, val))
}
