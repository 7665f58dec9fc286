//! Domain value types shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cut-layer activations of one sample: `n_patches` rows of `features`
/// values each, stored patch-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmashedData {
    values: Vec<f64>,
    n_patches: usize,
    features: usize,
    delta: f64,
}

impl SmashedData {
    /// Build a fresh (pre-noise) tensor; every entry must lie in `[0, delta]`.
    pub fn new(values: Vec<f64>, n_patches: usize, features: usize, delta: f64) -> Result<Self> {
        let t = Self::released(values, n_patches, features, delta)?;
        if let Some((i, v)) = t
            .values
            .iter()
            .enumerate()
            .find(|(_, &v)| !(0.0..=delta).contains(&v))
        {
            return Err(Error::Invariant(format!(
                "smashed entry {i} = {v} outside [0, {delta}]"
            )));
        }
        Ok(t)
    }

    /// Build a tensor that has already passed through a noise mechanism, so
    /// the `[0, delta]` range no longer applies.
    pub fn released(values: Vec<f64>, n_patches: usize, features: usize, delta: f64) -> Result<Self> {
        if n_patches == 0 || features == 0 {
            return Err(Error::Dimension("smashed data needs N >= 1 and F >= 1".into()));
        }
        if !(delta > 0.0) {
            return Err(Error::param("delta", format!("must be > 0, got {delta}")));
        }
        if values.len() != n_patches * features {
            return Err(Error::Dimension(format!(
                "expected {} values for {n_patches}x{features}, got {}",
                n_patches * features,
                values.len()
            )));
        }
        Ok(Self {
            values,
            n_patches,
            features,
            delta,
        })
    }

    pub fn zeros(n_patches: usize, features: usize, delta: f64) -> Result<Self> {
        Self::new(vec![0.0; n_patches * features], n_patches, features, delta)
    }

    pub fn filled(value: f64, n_patches: usize, features: usize, delta: f64) -> Result<Self> {
        Self::new(vec![value; n_patches * features], n_patches, features, delta)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        &self.values[p * self.features..(p + 1) * self.features]
    }

    /// Same shape and bound, new values (range unchecked).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::released(values, self.n_patches, self.features, self.delta)
    }

    pub fn same_shape(&self, other: &SmashedData) -> bool {
        self.n_patches == other.n_patches && self.features == other.features
    }
}

/// A label vector. Created as a one-hot vector; mixing and noise turn it
/// into a soft label stored as plain `Vec<f64>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneHotLabel {
    values: Vec<f64>,
}

impl OneHotLabel {
    pub fn new(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::param(
                "class",
                format!("class {class} out of range for {classes} classes"),
            ));
        }
        let mut values = vec![0.0; classes];
        values[class] = 1.0;
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn classes(&self) -> usize {
        self.values.len()
    }

    pub fn class(&self) -> usize {
        self.values.iter().position(|&v| v == 1.0).unwrap_or(0)
    }
}

/// Selection of patches owned by one client.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchMask {
    selected: Vec<bool>,
}

impl PatchMask {
    pub fn new(selected: Vec<bool>) -> Self {
        Self { selected }
    }

    pub fn full(n: usize) -> Self {
        Self::new(vec![true; n])
    }

    pub fn empty(n: usize) -> Self {
        Self::new(vec![false; n])
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Self {
        let mut selected = vec![false; n];
        for &i in indices {
            selected[i] = true;
        }
        Self { selected }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, patch: usize) -> bool {
        self.selected[patch]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.selected
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn complement(&self) -> PatchMask {
        PatchMask::new(self.selected.iter().map(|b| !b).collect())
    }

    /// Zero every patch outside the mask. `values` is patch-major with
    /// `features` entries per patch.
    pub fn apply(&self, values: &[f64], features: usize) -> Vec<f64> {
        let mut out = vec![0.0; values.len()];
        for p in self.indices() {
            let r = p * features..(p + 1) * features;
            out[r.clone()].copy_from_slice(&values[r]);
        }
        out
    }
}

/// Check that `masks` form an exact partition of their common patch set.
pub fn check_partition(masks: &[PatchMask]) -> Result<usize> {
    let n = masks
        .first()
        .map(PatchMask::len)
        .ok_or_else(|| Error::Invariant("empty mask list".into()))?;
    if masks.iter().any(|m| m.len() != n) {
        return Err(Error::Invariant("masks have differing lengths".into()));
    }
    for p in 0..n {
        let owners = masks.iter().filter(|m| m.contains(p)).count();
        if owners != 1 {
            return Err(Error::Invariant(format!(
                "patch {p} is owned by {owners} masks"
            )));
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioSource {
    DirichletDraw,
    Realized,
}

/// Mixing weights, nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRatios {
    lambdas: Vec<f64>,
    source: RatioSource,
}

pub const RATIO_SUM_TOLERANCE: f64 = 1e-12;

impl MixRatios {
    pub fn new(lambdas: Vec<f64>, source: RatioSource) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::param("lambdas", "at least one ratio required"));
        }
        if lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::param("lambdas", format!("negative or non-finite: {lambdas:?}")));
        }
        let sum: f64 = lambdas.iter().sum();
        if (sum - 1.0).abs() > RATIO_SUM_TOLERANCE {
            return Err(Error::param("lambdas", format!("sum to {sum}, not 1")));
        }
        Ok(Self { lambdas, source })
    }

    /// Equal weights `1/k`.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("k", "must be >= 1"));
        }
        Self::new(vec![1.0 / k as f64; k], RatioSource::DirichletDraw)
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn source(&self) -> RatioSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.lambdas.iter().copied().fold(0.0, f64::max)
    }
}
