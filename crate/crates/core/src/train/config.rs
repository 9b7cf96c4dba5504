use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::iss::{OverlapPolicy, DEFAULT_EPSILON};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    #[default]
    GroupLasso,
    L1,
    None,
}

impl std::str::FromStr for RegMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group_lasso" | "group-lasso" => Ok(Self::GroupLasso),
            "l1" => Ok(Self::L1),
            "none" => Ok(Self::None),
            _ => Err(Error::Parameter(format!("unknown regularizer {s:?} (group_lasso | l1 | none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub mode: RegMode,
    pub lambda: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub l1_decay: f64,
    pub policy: OverlapPolicy,
    /// First epoch (1-based) with the regularizer on.
    pub sparsify_from: usize,
    /// Last epoch with the regularizer on. Later epochs run with λ and the
    /// ℓ1 decay at 0 and hold the groups that were zero at that point at zero.
    pub sparsify_until: Option<usize>,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            mode: RegMode::GroupLasso,
            lambda: 0.0,
            epsilon: DEFAULT_EPSILON,
            tau: 1e-4,
            l1_decay: 1e-4,
            policy: OverlapPolicy::Distinct,
            sparsify_from: 1,
            sparsify_until: None,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.tau >= 0.0) || !(self.l1_decay >= 0.0) || !(self.epsilon >= 0.0) {
            return Err(Error::Parameter("λ, τ, ε and the ℓ1 decay must be non-negative".into()));
        }
        if self.sparsify_until.is_some_and(|n| n < self.sparsify_from) {
            return Err(Error::Parameter("sparsify_until precedes sparsify_from".into()));
        }
        if self.mode == RegMode::GroupLasso && !(self.epsilon > 0.0) {
            return Err(Error::Parameter("group Lasso needs ε > 0".into()));
        }
        Ok(())
    }

    /// Whether the regularizer is active during `epoch` (1-based).
    pub fn regularizing(&self, epoch: usize) -> bool {
        epoch >= self.sparsify_from && self.sparsify_until.is_none_or(|n| epoch <= n)
    }

    /// Whether `epoch` is the first one after the regularized window.
    pub fn freezes_at(&self, epoch: usize) -> bool {
        self.sparsify_until.is_some_and(|n| epoch == n + 1)
    }

    /// The configuration with the regularization strength set to zero.
    pub fn unregularized(&self) -> Self {
        Self { lambda: 0.0, l1_decay: 0.0, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied once per epoch after `decay_after` epochs.
    pub lr_decay: f64,
    pub decay_after: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub unroll_steps: usize,
    pub dropout_keep: f32,
    pub seed: u64,
    pub clip_norm: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            lr_decay: 0.8,
            decay_after: 6,
            epochs: 12,
            batch_size: 32,
            unroll_steps: 35,
            dropout_keep: 1.0,
            seed: 1,
            clip_norm: 5.0,
            eval_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Parameter(format!("dropout keep {} outside (0, 1]", self.dropout_keep)));
        }
        if self.unroll_steps == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Parameter("unroll steps and batch sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Parameter("learning rate and decay must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = epoch.saturating_sub(self.decay_after + 1);
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    LstmStack {
        embed: usize,
        hidden: Vec<usize>,
    },
    Rhn {
        embed: usize,
        width: usize,
        depth: usize,
        #[serde(default)]
        coupled: bool,
        #[serde(default)]
        tied: bool,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::LstmStack { embed: 32, hidden: vec![64, 64] }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub reg: RegConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.reg.validate()
    }

    /// SHA-256 of the compact JSON form.
    pub fn fingerprint(&self) -> String {
        fingerprint_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

/// Hex SHA-256 of raw bytes.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a JSON value's compact serialization.
pub fn fingerprint_json(value: &serde_json::Value) -> String {
    let text = serde_json::to_string(value).expect("json value serializes");
    fingerprint_bytes(text.as_bytes())
}
