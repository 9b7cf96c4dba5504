//! Group-Lasso and ℓ1 regularized SGD with per-step thresholding, driving a
//! character-level language-model task.

mod config;
mod corpus;
mod regularizer;
mod trainer;

pub use config::{fingerprint_bytes, fingerprint_json, ExperimentConfig, ModelSpec, RegConfig, RegMode, TrainConfig};
pub use corpus::{batchify, Corpus, Window};
pub use regularizer::{
    clip_global_norm, group_lasso_penalty, hold_at_zero, sgd_step_group_lasso, sgd_step_l1, threshold_weights,
    zero_group_coords,
};
pub use trainer::{
    apply_update, calibrate_tau, mean_nll, perplexity, train_language_model, train_with_callback, EpochMetrics,
    TauCalibration, TrainMetrics, TrainOutcome,
};

use crate::error::Result;
use crate::model::{LstmLm, Model, RhnLm};
use crate::numerics::Rng;

/// Freshly initialized model for `spec` over a vocabulary of `vocab`.
pub fn build_model(spec: &ModelSpec, vocab: usize, seed: u64) -> Result<Model> {
    let mut rng = Rng::new(seed);
    Ok(match spec {
        ModelSpec::LstmStack { embed, hidden } => Model::Lstm(LstmLm::init(vocab, *embed, hidden, &mut rng)?),
        ModelSpec::Rhn { embed, width, depth, coupled, tied } => {
            Model::Rhn(RhnLm::init(vocab, *embed, *width, *depth, *coupled, *tied, &mut rng)?)
        }
    })
}
