use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::seeded_rng;
use crate::nn::Batch;
use crate::{Error, Result};

const BLOB_RADIUS: f64 = 2.5;
const BLOB_STD: f64 = 0.5;
const MOON_NOISE: f64 = 0.1;
const RING_NOISE: f64 = 0.1;
/// Standard deviation of the uninformative coordinates beyond the first two.
const EXTRA_DIM_STD: f64 = 0.5;

const MAX_BLOB_CLASSES: usize = 16;
const MAX_RING_CLASSES: usize = 5;

const TRAIN_STREAM: u64 = 0;
const HOLDOUT_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// Isotropic blobs centered on a circle.
    GaussianBlobs,
    /// Two interleaved half circles; binary only.
    Moons,
    /// Concentric rings, one per class.
    Rings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub class_geometry: Geometry,
    pub samples_per_domain: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(Error::config("input_dim must be at least 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        let max = match self.class_geometry {
            Geometry::GaussianBlobs => MAX_BLOB_CLASSES,
            Geometry::Moons => 2,
            Geometry::Rings => MAX_RING_CLASSES,
        };
        if self.num_classes > max {
            return Err(Error::config(format!(
                "{:?} supports at most {max} classes, got {}",
                self.class_geometry, self.num_classes
            )));
        }
        if self.samples_per_domain < self.num_classes {
            return Err(Error::config("samples_per_domain must cover every class"));
        }
        Ok(())
    }

    /// Holdout size drawn alongside the training split.
    pub fn holdout_size(&self) -> usize {
        (self.samples_per_domain / 4).max(self.num_classes)
    }
}

/// Source-domain data: a labeled training set and a disjoint labeled holdout.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub train: Batch,
    pub holdout: Batch,
}

pub fn generate_task(spec: &TaskSpec) -> Result<SourceData> {
    spec.validate()?;
    let train = sample_domain(spec, spec.samples_per_domain, &mut seeded_rng(spec.seed, TRAIN_STREAM))?;
    let holdout = sample_domain(spec, spec.holdout_size(), &mut seeded_rng(spec.seed, HOLDOUT_STREAM))?;
    Ok(SourceData { train, holdout })
}

/// `n` labeled source-distribution samples with class counts differing by at most one.
pub fn sample_domain(spec: &TaskSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    spec.validate()?;
    let k = spec.num_classes;
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    let extra = Normal::new(0.0, EXTRA_DIM_STD).expect("valid std");
    let mut inputs = Vec::with_capacity(n * spec.input_dim);
    for &y in &labels {
        let (a, b) = match spec.class_geometry {
            Geometry::GaussianBlobs => {
                let noise = Normal::new(0.0, BLOB_STD).expect("valid std");
                let angle = TAU * y as f64 / k as f64;
                (
                    BLOB_RADIUS * angle.cos() + noise.sample(rng),
                    BLOB_RADIUS * angle.sin() + noise.sample(rng),
                )
            }
            Geometry::Moons => {
                let noise = Normal::new(0.0, MOON_NOISE).expect("valid std");
                let t = rng.random_range(0.0..PI);
                let (x, y2) = if y == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                // center the pair of moons on the origin
                (x - 0.5 + noise.sample(rng), y2 - 0.25 + noise.sample(rng))
            }
            Geometry::Rings => {
                let noise = Normal::new(0.0, RING_NOISE).expect("valid std");
                let angle = rng.random_range(0.0..TAU);
                let r = 1.0 + y as f64 + noise.sample(rng);
                (r * angle.cos(), r * angle.sin())
            }
        };
        inputs.push(a);
        inputs.push(b);
        for _ in 2..spec.input_dim {
            inputs.push(extra.sample(rng));
        }
    }
    Batch::new(inputs, spec.input_dim, Some(labels))
}
