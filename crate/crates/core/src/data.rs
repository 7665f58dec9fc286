//! Raw client inputs and a synthetic patch-classification task.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::OneHotLabel;

/// A raw client input: `n_patches` rows of `raw_dim` values, patch-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInput {
    values: Vec<f64>,
    n_patches: usize,
    raw_dim: usize,
}

impl RawInput {
    pub fn new(values: Vec<f64>, n_patches: usize, raw_dim: usize) -> Result<Self> {
        if n_patches == 0 || raw_dim == 0 {
            return Err(Error::Dimension("raw input needs N >= 1 and raw_dim >= 1".into()));
        }
        if values.len() != n_patches * raw_dim {
            return Err(Error::Dimension(format!(
                "expected {} raw values, got {}",
                n_patches * raw_dim,
                values.len()
            )));
        }
        Ok(Self {
            values,
            n_patches,
            raw_dim,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        &self.values[p * self.raw_dim..(p + 1) * self.raw_dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: RawInput,
    pub label: OneHotLabel,
}

/// Two-class synthetic task. Every patch of a class-`c` sample is
/// `centre_c + jitter`, with `centre_1 = -centre_0 = separation · u` along
/// a fixed unit direction `u`, and per-entry jitter uniform in
/// `[-jitter, jitter]`. Class 1 samples are additionally scaled by
/// `class_one_scale`, which makes the two classes differ in magnitude as
/// well as direction.
///
/// With `jitter · √raw_dim < separation` the classes are linearly separable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub n_patches: usize,
    pub raw_dim: usize,
    pub separation: f64,
    pub jitter: f64,
    #[serde(default = "one")]
    pub class_one_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            n_patches: 16,
            raw_dim: 4,
            separation: 1.0,
            jitter: 0.4,
            class_one_scale: 1.0,
        }
    }
}

impl SyntheticTask {
    pub fn is_separable(&self) -> bool {
        self.jitter * (self.raw_dim as f64).sqrt() < self.separation
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Result<Sample> {
        if class > 1 {
            return Err(Error::param("class", format!("binary task, got class {class}")));
        }
        let u = 1.0 / (self.raw_dim as f64).sqrt();
        let (sign, scale) = if class == 1 { (1.0, self.class_one_scale) } else { (-1.0, 1.0) };
        let values = (0..self.n_patches * self.raw_dim)
            .map(|_| {
                let j = if self.jitter > 0.0 {
                    rng.random_range(-self.jitter..=self.jitter)
                } else {
                    0.0
                };
                scale * (sign * self.separation * u + j)
            })
            .collect();
        Ok(Sample {
            input: RawInput::new(values, self.n_patches, self.raw_dim)?,
            label: OneHotLabel::new(class, 2)?,
        })
    }

    /// `count` samples with alternating classes (balanced, class 0 first).
    pub fn generate<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Sample>> {
        (0..count).map(|i| self.sample(i % 2, rng)).collect()
    }

    /// `count` samples with classes drawn uniformly at random.
    pub fn generate_shuffled<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Sample>> {
        (0..count)
            .map(|_| {
                let c = rng.random_range(0..2);
                self.sample(c, rng)
            })
            .collect()
    }
}
