//! Experiment configuration: a single JSON document with defaults for
//! every field except `seed`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use cutmixsl::accountant::AccountantParams;
use cutmixsl::data::SyntheticTask;
use cutmixsl::mechanisms::{Mechanism, MechanismConfig, NoiseMode};
use cutmixsl::protocol::ProtocolConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_mechanism")]
    pub mechanism: Mechanism,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "one")]
    pub alpha_m: f64,
    #[serde(default = "default_noise")]
    pub noise: MechanismConfig,
    #[serde(default)]
    pub accountant: AccountantOverrides,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub avg_cut_grad: bool,
    #[serde(default)]
    pub weight_avg: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub sweep: SweepAxes,
    /// Excluded from the config digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_mechanism() -> Mechanism {
    Mechanism::DpCutMixSl
}
fn default_n() -> usize {
    10
}
fn default_k() -> usize {
    2
}
fn one() -> f64 {
    1.0
}
fn default_noise() -> MechanismConfig {
    MechanismConfig {
        sigma_s_sq: 1.0,
        sigma_y_sq: 1.0,
        noise_mode: NoiseMode::MaskedNoise,
        clamp_labels: true,
    }
}
fn default_rounds() -> usize {
    200
}
fn default_lr() -> f64 {
    0.1
}

/// Accounting inputs. Unset fields fall back to the reference measurement
/// setting (`α = 2`, `δ = 2e-4`, `Δ = 0.15`, `D_s = 10`, `D_y = 2`),
/// the noise variances under `noise`, and `λ_max = 1/k`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountantOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_y: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_s_sq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_y_sq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_max: Option<f64>,
    #[serde(default)]
    pub fractional_alpha: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub task: SyntheticTask,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "one")]
    pub pixel_bound: f64,
    /// Size of the fixed training set cycled through by the clients.
    #[serde(default = "default_train_set")]
    pub train_size: usize,
}

fn default_train_set() -> usize {
    128
}
fn default_features() -> usize {
    4
}
fn default_hidden() -> usize {
    16
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTask::default(),
            features: default_features(),
            hidden: default_hidden(),
            pixel_bound: 1.0,
            train_size: default_train_set(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Membership trials per cell (even).
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Membership record geometry.
    #[serde(default = "default_mi_patches")]
    pub n_patches: usize,
    #[serde(default = "one_usize")]
    pub features: usize,
    #[serde(default = "default_train")]
    pub train_size: usize,
    #[serde(default = "default_test")]
    pub test_size: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_rpe")]
    pub rounds_per_epoch: usize,
    #[serde(default = "default_ref")]
    pub reference_rounds: usize,
    #[serde(default)]
    pub stratify_by_own_label: bool,
}

fn default_trials() -> usize {
    2000
}
fn default_mi_patches() -> usize {
    4
}
fn one_usize() -> usize {
    1
}
fn default_train() -> usize {
    400
}
fn default_test() -> usize {
    200
}
fn default_ridge() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    6
}
fn default_rpe() -> usize {
    300
}
fn default_ref() -> usize {
    100
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            n_patches: default_mi_patches(),
            features: 1,
            train_size: default_train(),
            test_size: default_test(),
            ridge: default_ridge(),
            epochs: default_epochs(),
            rounds_per_epoch: default_rpe(),
            reference_rounds: default_ref(),
            stratify_by_own_label: false,
        }
    }
}

/// Sweep axes. An absent axis contributes the scalar value from the top
/// level; a present axis must be nonempty. `sigma_sq` sets both variances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mechanism: Option<Vec<Mechanism>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_m: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_sq: Option<Vec<f64>>,
    /// Also train each cell for `rounds` rounds and report loss/accuracy.
    #[serde(default)]
    pub simulate: bool,
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    pub mechanism: Mechanism,
    pub k: usize,
    pub alpha_m: f64,
    pub sigma_s_sq: f64,
    pub sigma_y_sq: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Config {
            path: "seed".into(),
            reason: "a seed is required (config field or --seed)".into(),
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, reason: String| CliError::Config {
            path: path.into(),
            reason,
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad("schema_version", format!("unsupported version {}", self.schema_version)));
        }
        self.noise
            .validate()
            .map_err(|e| param_error("noise", e))?;
        // Zero noise is a valid experiment without a finite budget; the
        // variances are checked where a budget is requested.
        let stand_in = |v: f64| if v == 0.0 { 1.0 } else { v };
        self.accountant_params(self.k, stand_in(self.noise.sigma_s_sq), stand_in(self.noise.sigma_y_sq))
            .validate()
            .map_err(|e| param_error("accountant", e))?;
        self.protocol(self.mechanism, self.k, self.alpha_m, self.noise)
            .validate()
            .map_err(|e| param_error("", e))?;
        if self.rounds == 0 {
            return Err(bad("rounds", "must be >= 1".into()));
        }
        let m = &self.model;
        if m.features == 0 || m.hidden == 0 || m.train_size == 0 || m.task.n_patches == 0 || m.task.raw_dim == 0 {
            return Err(bad("model", "task dimensions, features, hidden and train_size must be >= 1".into()));
        }
        if !(m.pixel_bound >= 0.0) || !m.pixel_bound.is_finite() {
            return Err(bad("model.pixel_bound", format!("must be finite and >= 0, got {}", m.pixel_bound)));
        }
        if self.attack.trials == 0 || self.attack.trials % 2 != 0 {
            return Err(bad("attack.trials", "must be even and >= 2".into()));
        }
        let s = &self.sweep;
        let empty = [
            ("sweep.mechanism", s.mechanism.as_ref().map(Vec::len)),
            ("sweep.k", s.k.as_ref().map(Vec::len)),
            ("sweep.alpha_m", s.alpha_m.as_ref().map(Vec::len)),
            ("sweep.sigma_sq", s.sigma_sq.as_ref().map(Vec::len)),
        ];
        for (path, len) in empty {
            if len == Some(0) {
                return Err(bad(path, "sweep axes must be nonempty".into()));
            }
        }
        for (i, &k) in s.k.iter().flatten().enumerate() {
            if k == 0 || k > self.n {
                return Err(bad(&format!("sweep.k[{i}]"), format!("need 1 <= k <= n = {}, got {k}", self.n)));
            }
        }
        for (i, &a) in s.alpha_m.iter().flatten().enumerate() {
            if !(a > 0.0) || !a.is_finite() {
                return Err(bad(&format!("sweep.alpha_m[{i}]"), format!("must be > 0, got {a}")));
            }
        }
        for (i, &v) in s.sigma_sq.iter().flatten().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(bad(&format!("sweep.sigma_sq[{i}]"), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn accountant_params(&self, k: usize, sigma_s_sq: f64, sigma_y_sq: f64) -> AccountantParams {
        let o = &self.accountant;
        let base = AccountantParams::reference(k, sigma_s_sq, sigma_y_sq);
        AccountantParams {
            alpha: o.alpha.unwrap_or(base.alpha),
            delta: o.delta.unwrap_or(base.delta),
            pixel_bound: o.pixel_bound.unwrap_or(base.pixel_bound),
            d_s: o.d_s.unwrap_or(base.d_s),
            d_y: o.d_y.unwrap_or(base.d_y),
            sigma_s_sq: o.sigma_s_sq.unwrap_or(sigma_s_sq),
            sigma_y_sq: o.sigma_y_sq.unwrap_or(sigma_y_sq),
            lambda_max: o.lambda_max.unwrap_or(base.lambda_max),
            n: self.n,
            k,
            fractional_alpha: o.fractional_alpha,
        }
    }

    pub fn protocol(&self, mechanism: Mechanism, k: usize, alpha_m: f64, noise: MechanismConfig) -> ProtocolConfig {
        ProtocolConfig {
            n: self.n,
            k,
            alpha_m,
            mechanism,
            mech: noise,
            lr: self.lr,
            avg_cut_grad: self.avg_cut_grad,
            weight_avg: self.weight_avg,
        }
    }

    /// Cartesian product in axis order mechanism, k, alpha_m, sigma_sq
    /// (last axis fastest).
    pub fn cells(&self) -> Vec<Cell> {
        let s = &self.sweep;
        let mechs = s.mechanism.clone().unwrap_or_else(|| vec![self.mechanism]);
        let ks = s.k.clone().unwrap_or_else(|| vec![self.k]);
        let alphas = s.alpha_m.clone().unwrap_or_else(|| vec![self.alpha_m]);
        let sigmas: Vec<(f64, f64)> = match &s.sigma_sq {
            Some(v) => v.iter().map(|&x| (x, x)).collect(),
            None => vec![(self.noise.sigma_s_sq, self.noise.sigma_y_sq)],
        };
        let mut cells = Vec::with_capacity(mechs.len() * ks.len() * alphas.len() * sigmas.len());
        for &mechanism in &mechs {
            for &k in &ks {
                for &alpha_m in &alphas {
                    for &(sigma_s_sq, sigma_y_sq) in &sigmas {
                        cells.push(Cell {
                            index: cells.len(),
                            mechanism,
                            k,
                            alpha_m,
                            sigma_s_sq,
                            sigma_y_sq,
                        });
                    }
                }
            }
        }
        cells
    }

    /// sha256 of the canonical JSON of the config without `output_dir`.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let text = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Budget inputs for `k` and the given variances, validated.
    pub fn budget_params(&self, k: usize, sigma_s_sq: f64, sigma_y_sq: f64) -> Result<AccountantParams, CliError> {
        let p = self.accountant_params(k, sigma_s_sq, sigma_y_sq);
        p.validate().map_err(|e| param_error("accountant", e))?;
        Ok(p)
    }
}

fn param_error(prefix: &str, e: cutmixsl::Error) -> CliError {
    match e {
        cutmixsl::Error::Parameter { name, reason } => CliError::Config {
            path: if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            },
            reason,
        },
        other => CliError::Config {
            path: prefix.to_string(),
            reason: other.to_string(),
        },
    }
}
