//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::{Matrix64, Rng};

use super::lstm::{lstm_backward, lstm_sequence_forward, LstmLayerParams, LstmState};
use super::rhn::{rhn_backward, rhn_forward, RhnLayerParams};

/// Denominator floor for the relative error, so parameters whose gradient is
/// essentially zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `analytic` with `(E(w+ε) - E(w-ε)) / 2ε` for every parameter.
pub fn finite_difference_check(
    params: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    epsilon: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::Parameter(format!("epsilon {epsilon} outside [1e-6, 1e-4]")));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!("{} parameters but {} gradient entries", params.len(), analytic.len())));
    }
    let mut w = params.to_vec();
    let mut report = GradCheckReport {
        checked: params.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        tol,
        passed: true,
    };
    for j in 0..w.len() {
        let orig = w[j];
        w[j] = orig + epsilon;
        let plus = loss(&w);
        w[j] = orig - epsilon;
        let minus = loss(&w);
        w[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite around parameter {j}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let abs = (numeric - analytic[j]).abs();
        let rel = abs / numeric.abs().max(analytic[j].abs()).max(REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = j;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

fn flatten_lstm(layers: &[LstmLayerParams<f64>]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied()).collect()
}

fn unflatten_lstm(layers: &mut [LstmLayerParams<f64>], flat: &[f64]) {
    let mut at = 0;
    for l in layers {
        for m in [&mut l.weight, &mut l.bias] {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }
}

/// Gradient check of a random stacked LSTM with loss `Σ_t r_t · h_t` over the
/// top layer, with fixed random dropout masks on every layer input.
pub fn check_lstm_toy(
    seed: u64,
    input: usize,
    hidden: &[usize],
    steps: usize,
    batch: usize,
    epsilon: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut layers = Vec::new();
    let mut below = input;
    for &h in hidden {
        let w = rng.uniform(-0.6, 0.6, below + h, 4 * h)?;
        let b = rng.uniform(-0.6, 0.6, 1, 4 * h)?;
        layers.push(LstmLayerParams::new(below, h, w, b)?.cast::<f64>());
        below = h;
    }
    let inputs: Vec<Matrix64> =
        (0..steps).map(|_| rng.uniform(-1.0, 1.0, batch, input).map(|m| m.cast())).collect::<Result<_>>()?;
    let weights: Vec<Matrix64> =
        (0..steps).map(|_| rng.uniform(-1.0, 1.0, batch, below).map(|m| m.cast())).collect::<Result<_>>()?;
    let mut sizes = vec![input];
    sizes.extend_from_slice(&hidden[..hidden.len() - 1]);
    let masks: Vec<Vec<Matrix64>> =
        sizes.iter().map(|&n| (0..steps).map(|_| rng.dropout_mask(0.8, batch, n).cast()).collect()).collect();
    let init: Vec<LstmState<f64>> = hidden
        .iter()
        .map(|&h| Ok(LstmState { h: rng.uniform(-0.5, 0.5, batch, h)?.cast(), c: rng.uniform(-0.5, 0.5, batch, h)?.cast() }))
        .collect::<Result<_>>()?;

    let loss_of = |ls: &[LstmLayerParams<f64>]| -> Result<f64> {
        let out = lstm_sequence_forward(ls, &inputs, &init, Some(&masks))?;
        Ok(out.outputs.iter().zip(&weights).map(|(h, r)| h.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()).sum())
    };
    let out = lstm_sequence_forward(&layers, &inputs, &init, Some(&masks))?;
    let grads = lstm_backward(&layers, &out.caches, &weights)?;
    let analytic = flatten_lstm(&grads.layers);
    let params = flatten_lstm(&layers);
    let mut scratch = layers.clone();
    finite_difference_check(
        &params,
        &analytic,
        |w| {
            unflatten_lstm(&mut scratch, w);
            loss_of(&scratch).unwrap_or(f64::NAN)
        },
        epsilon,
        tol,
    )
}

fn rhn_tensors_mut(p: &mut RhnLayerParams<f64>) -> Vec<&mut Matrix64> {
    p.input_w.iter_mut().chain(p.rec_w.iter_mut().flatten()).chain(p.bias.iter_mut().flatten()).collect()
}

fn flatten_rhn(p: &RhnLayerParams<f64>) -> Vec<f64> {
    p.input_w
        .iter()
        .chain(p.rec_w.iter().flatten())
        .chain(p.bias.iter().flatten())
        .flat_map(|m| m.data().iter().copied())
        .collect()
}

/// Gradient check of a random RHN unrolled over `steps` with loss
/// `Σ_t r_t · s_t`.
#[allow(clippy::too_many_arguments)]
pub fn check_rhn_toy(
    seed: u64,
    input: usize,
    width: usize,
    depth: usize,
    coupled: bool,
    steps: usize,
    batch: usize,
    epsilon: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut p32 = RhnLayerParams::<f32>::zeros(input, width, depth, coupled)?;
    for m in p32.input_w.iter_mut().chain(p32.rec_w.iter_mut().flatten()).chain(p32.bias.iter_mut().flatten()) {
        *m = rng.uniform(-0.6, 0.6, m.rows(), m.cols())?;
    }
    let params = p32.cast::<f64>();
    let inputs: Vec<Matrix64> =
        (0..steps).map(|_| rng.uniform(-1.0, 1.0, batch, input).map(|m| m.cast())).collect::<Result<_>>()?;
    let weights: Vec<Matrix64> =
        (0..steps).map(|_| rng.uniform(-1.0, 1.0, batch, width).map(|m| m.cast())).collect::<Result<_>>()?;
    let masks: Vec<Matrix64> = (0..steps).map(|_| rng.dropout_mask(0.8, batch, input).cast()).collect();
    let s0: Matrix64 = rng.uniform(-0.5, 0.5, batch, width)?.cast();

    let run = |p: &RhnLayerParams<f64>| -> Result<(f64, Vec<_>)> {
        let mut s = s0.clone();
        let mut caches = Vec::with_capacity(steps);
        let mut e = 0.0;
        for t in 0..steps {
            let (next, cache) = rhn_forward(p, &inputs[t], &s, Some(&masks[t]))?;
            e += next.data().iter().zip(weights[t].data()).map(|(a, b)| a * b).sum::<f64>();
            caches.push(cache);
            s = next;
        }
        Ok((e, caches))
    };
    let (_, caches) = run(&params)?;
    let grads = rhn_backward(&params, &caches, &weights)?;
    let analytic = flatten_rhn(&grads.params);
    let flat = flatten_rhn(&params);
    let mut scratch = params.clone();
    finite_difference_check(
        &flat,
        &analytic,
        |w| {
            let mut at = 0;
            for m in rhn_tensors_mut(&mut scratch) {
                let n = m.len();
                m.data_mut().copy_from_slice(&w[at..at + n]);
                at += n;
            }
            run(&scratch).map(|r| r.0).unwrap_or(f64::NAN)
        },
        epsilon,
        tol,
    )
}
