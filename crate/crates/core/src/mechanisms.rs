//! Private release mechanisms: per-client Gaussian noise (DP-SL), Mixup
//! over a group (DP-MixSL) and patch-wise random CutMix (DP-CutMixSL), plus
//! the Vanilla CutMix and Random Cutout baselines.
//!
//! Every mixing mechanism is expressed as per-client uploads followed by a
//! mixer-side [`aggregate`], which is exactly how the protocol runs them.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::{apportion, gaussian_noise, realized_ratios};
use crate::tensor::{check_partition, MixRatios, OneHotLabel, PatchMask, SmashedData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "dp_sl")]
    DpSl,
    #[serde(rename = "dp_mixsl")]
    DpMixSl,
    #[serde(rename = "dp_cutmixsl")]
    DpCutMixSl,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::DpSl, Mechanism::DpMixSl, Mechanism::DpCutMixSl];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::DpSl => "dp_sl",
            Mechanism::DpMixSl => "dp_mixsl",
            Mechanism::DpCutMixSl => "dp_cutmixsl",
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::param("mechanism", format!("unknown mechanism `{s}`")))
    }
}

/// Where the Gaussian noise enters a CutMix upload.
///
/// * `MaskedNoise`: `s̄ = M ⊙ (s + n)` and `ȳ = λ (y + n_y)`; noise outside the
///   client's mask is discarded and label noise is scaled with the label.
/// * `UnmaskedNoise`: `s̄ = M ⊙ s + n` and `ȳ = λ y + n_y`; every client's full
///   noise tensor reaches the mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    MaskedNoise,
    UnmaskedNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismConfig {
    pub sigma_s_sq: f64,
    pub sigma_y_sq: f64,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    #[serde(default = "default_clamp")]
    pub clamp_labels: bool,
}

fn default_clamp() -> bool {
    true
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            sigma_s_sq: 0.0,
            sigma_y_sq: 0.0,
            noise_mode: NoiseMode::MaskedNoise,
            clamp_labels: true,
        }
    }
}

impl MechanismConfig {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s_sq >= 0.0) || !self.sigma_s_sq.is_finite() {
            return Err(Error::param("sigma_s_sq", format!("must be finite and >= 0, got {}", self.sigma_s_sq)));
        }
        if !(self.sigma_y_sq >= 0.0) || !self.sigma_y_sq.is_finite() {
            return Err(Error::param("sigma_y_sq", format!("must be finite and >= 0, got {}", self.sigma_y_sq)));
        }
        Ok(())
    }
}

/// How much of a released batch one client contributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Share {
    Mask(PatchMask),
    Ratio(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub client: usize,
    pub share: Share,
}

/// A released (smashed, label) pair as seen by the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedBatch {
    pub smashed: SmashedData,
    pub label: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

/// One client's contribution before mixing: `(s̄ᵢ, ȳᵢ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Upload {
    pub smashed: Vec<f64>,
    pub label: Vec<f64>,
}

pub fn clamp_unit(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// Build a CutMix upload for one client. Smashed noise is drawn before
/// label noise.
pub fn cutmix_upload<R: Rng + ?Sized>(
    s: &SmashedData,
    y: &[f64],
    mask: &PatchMask,
    lambda: f64,
    cfg: &MechanismConfig,
    rng: &mut R,
) -> Result<Upload> {
    cfg.validate()?;
    if mask.len() != s.n_patches() {
        return Err(Error::Dimension(format!(
            "mask covers {} patches, smashed data has {}",
            mask.len(),
            s.n_patches()
        )));
    }
    let f = s.features();
    let n_s = gaussian_noise(s.len(), cfg.sigma_s_sq, rng)?;
    let n_y = gaussian_noise(y.len(), cfg.sigma_y_sq, rng)?;
    let (smashed, label) = match cfg.noise_mode {
        NoiseMode::MaskedNoise => {
            let noisy: Vec<f64> = s.values().iter().zip(&n_s).map(|(a, b)| a + b).collect();
            let label = y.iter().zip(&n_y).map(|(a, b)| lambda * (a + b)).collect();
            (mask.apply(&noisy, f), label)
        }
        NoiseMode::UnmaskedNoise => {
            let kept = mask.apply(s.values(), f);
            let smashed = kept.iter().zip(&n_s).map(|(a, b)| a + b).collect();
            let label = y.iter().zip(&n_y).map(|(a, b)| lambda * a + b).collect();
            (smashed, label)
        }
    };
    Ok(Upload { smashed, label })
}

/// Build a Mixup upload: `λ s + n`, `λ y + n_y`.
pub fn mixup_upload<R: Rng + ?Sized>(
    s: &SmashedData,
    y: &[f64],
    lambda: f64,
    cfg: &MechanismConfig,
    rng: &mut R,
) -> Result<Upload> {
    cfg.validate()?;
    let n_s = gaussian_noise(s.len(), cfg.sigma_s_sq, rng)?;
    let n_y = gaussian_noise(y.len(), cfg.sigma_y_sq, rng)?;
    Ok(Upload {
        smashed: s.values().iter().zip(&n_s).map(|(a, b)| lambda * a + b).collect(),
        label: y.iter().zip(&n_y).map(|(a, b)| lambda * a + b).collect(),
    })
}

/// Mixer-side aggregation: sum the uploads, then clamp labels if configured.
pub fn aggregate(
    uploads: &[Upload],
    template: &SmashedData,
    cfg: &MechanismConfig,
    provenance: Vec<Provenance>,
) -> Result<MixedBatch> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Dimension("no uploads to aggregate".into()))?;
    let mut smashed = vec![0.0; template.len()];
    let mut label = vec![0.0; first.label.len()];
    for u in uploads {
        if u.smashed.len() != smashed.len() || u.label.len() != label.len() {
            return Err(Error::Dimension("uploads disagree in shape".into()));
        }
        for (acc, v) in smashed.iter_mut().zip(&u.smashed) {
            *acc += v;
        }
        for (acc, v) in label.iter_mut().zip(&u.label) {
            *acc += v;
        }
    }
    if cfg.clamp_labels {
        label = clamp_unit(&label);
    }
    Ok(MixedBatch {
        smashed: template.with_values(smashed)?,
        label,
        provenance,
    })
}

fn check_group(s_list: &[SmashedData], y_list: &[OneHotLabel]) -> Result<()> {
    let first = s_list
        .first()
        .ok_or_else(|| Error::Dimension("empty client list".into()))?;
    if s_list.len() != y_list.len() {
        return Err(Error::Dimension(format!(
            "{} smashed tensors but {} labels",
            s_list.len(),
            y_list.len()
        )));
    }
    if s_list.iter().any(|s| !s.same_shape(first)) {
        return Err(Error::Dimension("smashed tensors differ in shape".into()));
    }
    let classes = y_list[0].classes();
    if y_list.iter().any(|y| y.classes() != classes) {
        return Err(Error::Dimension("labels differ in class count".into()));
    }
    Ok(())
}

/// DP-SL: Gaussian noise on one client's smashed data and label, no mixing.
pub fn dp_sl<R: Rng + ?Sized>(
    s: &SmashedData,
    y: &OneHotLabel,
    cfg: &MechanismConfig,
    rng: &mut R,
) -> Result<MixedBatch> {
    cfg.validate()?;
    let n_s = gaussian_noise(s.len(), cfg.sigma_s_sq, rng)?;
    let n_y = gaussian_noise(y.classes(), cfg.sigma_y_sq, rng)?;
    let smashed: Vec<f64> = s.values().iter().zip(&n_s).map(|(a, b)| a + b).collect();
    let mut label: Vec<f64> = y.values().iter().zip(&n_y).map(|(a, b)| a + b).collect();
    if cfg.clamp_labels {
        label = clamp_unit(&label);
    }
    Ok(MixedBatch {
        smashed: s.with_values(smashed)?,
        label,
        provenance: vec![Provenance {
            client: 0,
            share: Share::Ratio(1.0),
        }],
    })
}

/// DP-MixSL: `Σ(λᵢsᵢ + nᵢ)`, `Σ(λᵢyᵢ + n_{y,i})`.
pub fn dp_mix<R: Rng + ?Sized>(
    s_list: &[SmashedData],
    y_list: &[OneHotLabel],
    ratios: &MixRatios,
    cfg: &MechanismConfig,
    rng: &mut R,
) -> Result<MixedBatch> {
    check_group(s_list, y_list)?;
    if ratios.len() != s_list.len() {
        return Err(Error::Dimension(format!(
            "{} ratios for {} clients",
            ratios.len(),
            s_list.len()
        )));
    }
    let mut uploads = Vec::with_capacity(s_list.len());
    let mut provenance = Vec::with_capacity(s_list.len());
    for (i, ((s, y), &lambda)) in s_list.iter().zip(y_list).zip(ratios.lambdas()).enumerate() {
        uploads.push(mixup_upload(s, y.values(), lambda, cfg, rng)?);
        provenance.push(Provenance {
            client: i,
            share: Share::Ratio(lambda),
        });
    }
    aggregate(&uploads, &s_list[0], cfg, provenance)
}

/// DP-CutMixSL: each patch of the output comes from exactly one client;
/// labels mix by realized patch fractions.
pub fn dp_cutmix<R: Rng + ?Sized>(
    s_list: &[SmashedData],
    y_list: &[OneHotLabel],
    masks: &[PatchMask],
    cfg: &MechanismConfig,
    rng: &mut R,
) -> Result<MixedBatch> {
    check_group(s_list, y_list)?;
    if masks.len() != s_list.len() {
        return Err(Error::Dimension(format!(
            "{} masks for {} clients",
            masks.len(),
            s_list.len()
        )));
    }
    let ratios = realized_ratios(masks)?;
    let mut uploads = Vec::with_capacity(s_list.len());
    let mut provenance = Vec::with_capacity(s_list.len());
    for (i, ((s, y), mask)) in s_list.iter().zip(y_list).zip(masks).enumerate() {
        uploads.push(cutmix_upload(s, y.values(), mask, ratios.lambdas()[i], cfg, rng)?);
        provenance.push(Provenance {
            client: i,
            share: Share::Mask(mask.clone()),
        });
    }
    aggregate(&uploads, &s_list[0], cfg, provenance)
}

/// Rectangle side lengths `(rows, cols)` for a box of `target` patches on a
/// `grid`: nearest area first, then the most square shape, then the wider one.
pub fn box_shape(target: usize, grid: (usize, usize)) -> (usize, usize) {
    let (rows, cols) = grid;
    if target == 0 {
        return (0, 0);
    }
    let mut best = (1, 1);
    let mut best_key = (usize::MAX, usize::MAX, usize::MAX);
    for h in 1..=rows {
        for w in 1..=cols {
            let key = ((h * w).abs_diff(target), h.abs_diff(w), cols - w);
            if key < best_key {
                best_key = key;
                best = (h, w);
            }
        }
    }
    best
}

fn ceil_count(ratio: f64, n: usize) -> usize {
    // Guard against products like 0.25 * 64 = 16.000000000000004.
    let x = ratio * n as f64;
    let c = (x - 1e-9).ceil().max(0.0) as usize;
    c.min(n)
}

/// Vanilla CutMix masks for two clients: client 2 gets an axis-aligned box
/// placed uniformly at random, client 1 the complement.
pub fn vanilla_cutmix_masks<R: Rng + ?Sized>(
    ratios: &MixRatios,
    grid: (usize, usize),
    rng: &mut R,
) -> Result<Vec<PatchMask>> {
    if ratios.len() != 2 {
        return Err(Error::Unsupported(format!(
            "vanilla CutMix is defined for two clients, got {}",
            ratios.len()
        )));
    }
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 {
        return Err(Error::param("grid", "rows and cols must be >= 1"));
    }
    let n = rows * cols;
    let (h, w) = box_shape(ceil_count(ratios.lambdas()[1], n), grid);
    let mut indices = Vec::with_capacity(h * w);
    if h > 0 {
        let top = rng.random_range(0..=rows - h);
        let left = rng.random_range(0..=cols - w);
        for r in top..top + h {
            for c in left..left + w {
                indices.push(r * cols + c);
            }
        }
    }
    let boxed = PatchMask::from_indices(n, &indices);
    Ok(vec![boxed.complement(), boxed])
}

/// Random Cutout: a single client keeps `⌈ratio·N⌉` random patches.
pub fn random_cutout<R: Rng + ?Sized>(
    s: &SmashedData,
    y: &OneHotLabel,
    ratio: f64,
    cfg: &MechanismConfig,
    rng: &mut R,
) -> Result<MixedBatch> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::param("ratio", format!("must lie in (0, 1], got {ratio}")));
    }
    let n = s.n_patches();
    let keep = ceil_count(ratio, n).max(1);
    let chosen = sample(rng, n, keep).into_vec();
    let mask = PatchMask::from_indices(n, &chosen);
    let lambda = keep as f64 / n as f64;
    let upload = cutmix_upload(s, y.values(), &mask, lambda, cfg, rng)?;
    aggregate(
        &[upload],
        s,
        cfg,
        vec![Provenance {
            client: 0,
            share: Share::Mask(mask),
        }],
    )
}

/// Sizes a CutMix with `ratios` would produce on `n` patches.
pub fn cutmix_sizes(ratios: &MixRatios, n: usize) -> Vec<usize> {
    apportion(ratios.lambdas(), n)
}

/// Owner index of every patch, given a partition.
pub fn patch_owners(masks: &[PatchMask]) -> Result<Vec<usize>> {
    let n = check_partition(masks)?;
    let mut owners = vec![0; n];
    for (i, m) in masks.iter().enumerate() {
        for p in m.indices() {
            owners[p] = i;
        }
    }
    Ok(owners)
}
