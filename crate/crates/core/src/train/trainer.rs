use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iss::{detect_zero_groups, IssGroupMap};
use crate::model::LanguageModel;
use crate::numerics::Rng;

use super::config::{RegConfig, RegMode, TrainConfig};
use super::corpus::{batchify, Corpus};
use super::regularizer::{
    clip_global_norm, group_lasso_penalty, hold_at_zero, sgd_step_group_lasso, sgd_step_l1, threshold_weights,
    zero_group_coords,
};

const EVAL_UNROLL: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_nll: f64,
    pub train_ppl: f64,
    pub valid_nll: f64,
    pub valid_ppl: f64,
    pub penalty: f64,
    pub zero_groups: Vec<usize>,
    pub thresholded: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// Set when training stopped on a non-finite loss or gradient; the
    /// returned model is the last one that finished an epoch cleanly.
    pub diverged: Option<String>,
}

impl TrainMetrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub metrics: TrainMetrics,
}

/// `exp(mean NLL)` of `tokens` evaluated in `batch` parallel streams with
/// state carried across windows.
pub fn perplexity<M: LanguageModel>(model: &M, tokens: &[usize], batch: usize) -> Result<f64> {
    Ok(mean_nll(model, tokens, batch)?.exp())
}

pub fn mean_nll<M: LanguageModel>(model: &M, tokens: &[usize], batch: usize) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Parameter("perplexity needs at least two tokens".into()));
    }
    let batch = batch.clamp(1, tokens.len() / 2);
    let windows = batchify(tokens, batch, EVAL_UNROLL)?;
    let mut state = model.initial_state(batch);
    let (mut nll, mut count) = (0.0, 0usize);
    for w in &windows {
        let (n, next) = model.nll(&w.inputs, &w.targets, &state)?;
        nll += n;
        count += w.inputs.len() * batch;
        state = next;
    }
    Ok(nll / count as f64)
}

/// One optimizer step: regularized update, then thresholding. Returns the
/// number of weights the threshold cleared.
pub fn apply_update<M: LanguageModel>(
    model: &mut M,
    grads: &M,
    map: &IssGroupMap,
    eta: f64,
    reg: &RegConfig,
) -> Result<usize> {
    match reg.mode {
        RegMode::GroupLasso => sgd_step_group_lasso(model, grads, map, eta, reg.lambda, reg.epsilon)?,
        RegMode::L1 => sgd_step_l1(model, grads, map, eta, reg.l1_decay)?,
        RegMode::None => sgd_step_group_lasso(model, grads, map, eta, 0.0, reg.epsilon)?,
    }
    threshold_weights(model, map, reg.tau)
}

fn all_finite<M: LanguageModel>(m: &M) -> bool {
    m.tensors().iter().all(|(_, t)| t.is_finite())
}

/// Trains with truncated BPTT over `corpus.train`. Per window: forward and
/// backward, clip by global norm, regularized SGD, threshold. The regularizer
/// is on from `reg.sparsify_from` through `reg.sparsify_until`; after that,
/// training continues unregularized with the groups that were zero at that
/// point held at zero.
pub fn train_language_model<M: LanguageModel>(
    model: M,
    corpus: &Corpus,
    cfg: &TrainConfig,
    reg: &RegConfig,
    map: &IssGroupMap,
) -> Result<TrainOutcome<M>> {
    train_with_callback(model, corpus, cfg, reg, map, |_| {})
}

/// As [`train_language_model`], calling `on_epoch` after every epoch.
pub fn train_with_callback<M: LanguageModel>(
    mut model: M,
    corpus: &Corpus,
    cfg: &TrainConfig,
    reg: &RegConfig,
    map: &IssGroupMap,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    reg.validate()?;
    if model.vocab_size() != corpus.vocab_size() {
        return Err(Error::Consistency(format!(
            "model vocabulary {} differs from corpus vocabulary {}",
            model.vocab_size(),
            corpus.vocab_size()
        )));
    }
    map.bind(&model)?;
    let windows = batchify(&corpus.train, cfg.batch_size, cfg.unroll_steps)?;
    let mut dropout_rng = Rng::new(cfg.seed).fork(1);
    let mut metrics = TrainMetrics::default();
    let mut last_good = model.clone();
    let unregularized = reg.unregularized();
    let mut frozen = Vec::new();

    for epoch in 1..=cfg.epochs {
        let eta = cfg.learning_rate_at(epoch);
        if reg.freezes_at(epoch) {
            frozen = zero_group_coords(map, &detect_zero_groups(&model, map, 0.0)?);
        }
        let step_reg = if reg.regularizing(epoch) { reg } else { &unregularized };
        let mut state = model.initial_state(cfg.batch_size);
        let (mut nll_sum, mut count, mut thresholded) = (0.0, 0usize, 0usize);
        let mut failure = None;
        for w in &windows {
            let dropout = (cfg.dropout_keep < 1.0).then_some((cfg.dropout_keep, &mut dropout_rng));
            let lg = match model.loss_and_grad(&w.inputs, &w.targets, &state, dropout) {
                Ok(lg) if lg.loss.is_finite() => lg,
                Ok(lg) => {
                    failure = Some(format!("epoch {epoch}: loss became {}", lg.loss));
                    break;
                }
                Err(e) => return Err(e),
            };
            let mut grads = lg.grads;
            clip_global_norm(&mut grads, cfg.clip_norm);
            match apply_update(&mut model, &grads, map, eta, step_reg) {
                Ok(n) => {
                    thresholded += n;
                    hold_at_zero(&mut model, map, &frozen)?;
                }
                Err(Error::Numeric(msg)) => {
                    failure = Some(format!("epoch {epoch}: {msg}"));
                    break;
                }
                Err(e) => return Err(e),
            }
            let steps = w.inputs.len() * cfg.batch_size;
            nll_sum += lg.loss * steps as f64;
            count += steps;
            state = lg.state;
        }
        if failure.is_none() && !all_finite(&model) {
            failure = Some(format!("epoch {epoch}: weights became non-finite"));
        }
        let valid_nll = match failure {
            None => mean_nll(&model, &corpus.valid, cfg.eval_batch_size)?,
            Some(_) => f64::NAN,
        };
        if failure.is_none() && !valid_nll.is_finite() {
            failure = Some(format!("epoch {epoch}: validation loss became {valid_nll}"));
        }
        if let Some(msg) = failure {
            metrics.diverged = Some(msg);
            return Ok(TrainOutcome { model: last_good, metrics });
        }
        let report = detect_zero_groups(&model, map, 0.0)?;
        let train_nll = nll_sum / count as f64;
        let m = EpochMetrics {
            epoch,
            learning_rate: eta,
            train_nll,
            train_ppl: train_nll.exp(),
            valid_nll,
            valid_ppl: valid_nll.exp(),
            penalty: group_lasso_penalty(&model, map, reg.epsilon)?,
            zero_groups: report.zero_per_layer(),
            thresholded,
        };
        on_epoch(&m);
        metrics.epochs.push(m);
        last_good = model.clone();
    }
    Ok(TrainOutcome { model, metrics })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauCalibration {
    pub tau: f64,
    pub baseline_ppl: f64,
    /// `(τ, perplexity after thresholding)` for every grid point.
    pub evaluated: Vec<(f64, f64)>,
    /// No grid point met the tolerance; `tau` is the grid minimum.
    pub warning: bool,
}

/// Largest `τ` in the ascending `grid` whose thresholded model keeps
/// validation perplexity within `(1 + tolerance)` of the unthresholded one.
pub fn calibrate_tau<M: LanguageModel>(
    model: &M,
    valid: &[usize],
    grid: &[f64],
    tolerance: f64,
    map: &IssGroupMap,
    batch: usize,
) -> Result<TauCalibration> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] <= w[1])) || grid.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::Parameter("τ grid must be non-empty, non-negative and ascending".into()));
    }
    let baseline_ppl = perplexity(model, valid, batch)?;
    let limit = baseline_ppl * (1.0 + tolerance);
    let mut evaluated = Vec::with_capacity(grid.len());
    let mut chosen = None;
    for &tau in grid {
        let mut m = model.clone();
        threshold_weights(&mut m, map, tau)?;
        let ppl = perplexity(&m, valid, batch)?;
        if ppl <= limit {
            chosen = Some(tau);
        }
        evaluated.push((tau, ppl));
    }
    Ok(TauCalibration { tau: chosen.unwrap_or(grid[0]), baseline_ppl, evaluated, warning: chosen.is_none() })
}
