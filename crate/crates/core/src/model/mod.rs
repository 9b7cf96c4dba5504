//! Character-level language models built on the recurrent cells, exposed as
//! named tensor collections.

mod lstm_lm;
mod rhn_lm;

pub use lstm_lm::LstmLm;
pub use rhn_lm::RhnLm;

use crate::error::{Error, Result};
use crate::iss::{IssGroupMap, OverlapPolicy};
use crate::numerics::{Mat, Matrix, Real, Rng};

/// A model viewed as an ordered list of named tensors. Two values of the
/// same concrete type with the same shapes list their tensors in the same
/// order, which lets gradients be stored as a second model.
pub trait TensorStore<T: Real> {
    fn tensors(&self) -> Vec<(String, &Mat<T>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<T>)>;

    /// Re-derives cached layer sizes after tensors were reshaped.
    fn resync(&mut self) -> Result<()> {
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Recurrent state carried between windows: `[h_0, c_0, h_1, c_1, ...]` for
/// LSTM stacks, `[s]` for an RHN.
pub type RecurrentState<T = f32> = Vec<Mat<T>>;

/// A window of token ids, indexed `[step][batch]`.
pub type TokenWindow = [Vec<usize>];

#[derive(Clone, Debug)]
pub struct LossGrad<M> {
    /// Mean negative log-likelihood over every target in the window.
    pub loss: f64,
    pub grads: M,
    pub state: RecurrentState,
}

/// Hidden activations of every layer and output logits, per step.
#[derive(Clone, Debug)]
pub struct Trace<T = f32> {
    /// `hidden[step][layer]`, `batch x K(layer)`.
    pub hidden: Vec<Vec<Mat<T>>>,
    pub logits: Vec<Mat<T>>,
    pub state: RecurrentState<T>,
}

/// Operations the training loop needs from a model.
pub trait LanguageModel: TensorStore<f32> + Clone + Send + Sync {
    fn vocab_size(&self) -> usize;
    fn initial_state(&self, batch: usize) -> RecurrentState;
    fn zeros_like(&self) -> Self;

    /// Mean NLL of `targets` given `inputs`, with gradients. `dropout` holds
    /// the keep probability and the mask source.
    fn loss_and_grad(
        &self,
        inputs: &TokenWindow,
        targets: &TokenWindow,
        state: &[Matrix],
        dropout: Option<(f32, &mut Rng)>,
    ) -> Result<LossGrad<Self>>;

    /// Summed NLL without dropout, plus the carried state.
    fn nll(&self, inputs: &TokenWindow, targets: &TokenWindow, state: &[Matrix]) -> Result<(f64, RecurrentState)>;

    fn trace(&self, inputs: &TokenWindow, state: &[Matrix]) -> Result<Trace>;

    fn group_map(&self, policy: OverlapPolicy) -> Result<IssGroupMap>;
}

/// Either supported model family.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Lstm(LstmLm),
    Rhn(RhnLm),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Lstm(_) => "lstm_stack",
            Model::Rhn(_) => "rhn",
        }
    }
}

impl TensorStore<f32> for Model {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        match self {
            Model::Lstm(m) => m.tensors(),
            Model::Rhn(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        match self {
            Model::Lstm(m) => m.tensors_mut(),
            Model::Rhn(m) => m.tensors_mut(),
        }
    }

    fn resync(&mut self) -> Result<()> {
        match self {
            Model::Lstm(m) => m.resync(),
            Model::Rhn(m) => m.resync(),
        }
    }
}

impl LanguageModel for Model {
    fn vocab_size(&self) -> usize {
        match self {
            Model::Lstm(m) => m.vocab_size(),
            Model::Rhn(m) => m.vocab_size(),
        }
    }

    fn initial_state(&self, batch: usize) -> RecurrentState {
        match self {
            Model::Lstm(m) => m.initial_state(batch),
            Model::Rhn(m) => m.initial_state(batch),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Model::Lstm(m) => Model::Lstm(LanguageModel::zeros_like(m)),
            Model::Rhn(m) => Model::Rhn(LanguageModel::zeros_like(m)),
        }
    }

    fn loss_and_grad(
        &self,
        inputs: &TokenWindow,
        targets: &TokenWindow,
        state: &[Matrix],
        dropout: Option<(f32, &mut Rng)>,
    ) -> Result<LossGrad<Self>> {
        match self {
            Model::Lstm(m) => {
                let r = LanguageModel::loss_and_grad(m, inputs, targets, state, dropout)?;
                Ok(LossGrad { loss: r.loss, grads: Model::Lstm(r.grads), state: r.state })
            }
            Model::Rhn(m) => {
                let r = LanguageModel::loss_and_grad(m, inputs, targets, state, dropout)?;
                Ok(LossGrad { loss: r.loss, grads: Model::Rhn(r.grads), state: r.state })
            }
        }
    }

    fn nll(&self, inputs: &TokenWindow, targets: &TokenWindow, state: &[Matrix]) -> Result<(f64, RecurrentState)> {
        match self {
            Model::Lstm(m) => LanguageModel::nll(m, inputs, targets, state),
            Model::Rhn(m) => LanguageModel::nll(m, inputs, targets, state),
        }
    }

    fn trace(&self, inputs: &TokenWindow, state: &[Matrix]) -> Result<Trace> {
        match self {
            Model::Lstm(m) => LanguageModel::trace(m, inputs, state),
            Model::Rhn(m) => LanguageModel::trace(m, inputs, state),
        }
    }

    fn group_map(&self, policy: OverlapPolicy) -> Result<IssGroupMap> {
        match self {
            Model::Lstm(m) => LanguageModel::group_map(m, policy),
            Model::Rhn(m) => LanguageModel::group_map(m, policy),
        }
    }
}

/// Rows of `table` picked by `tokens`.
pub(crate) fn lookup<T: Real>(table: &Mat<T>, tokens: &[usize]) -> Result<Mat<T>> {
    let mut out = Mat::zeros(tokens.len(), table.cols());
    for (b, &tok) in tokens.iter().enumerate() {
        if tok >= table.rows() {
            return Err(Error::Parameter(format!("token id {tok} outside vocabulary of {}", table.rows())));
        }
        out.row_mut(b).copy_from_slice(table.row(tok));
    }
    Ok(out)
}

pub(crate) fn scatter_rows<T: Real>(table: &mut Mat<T>, tokens: &[usize], grad: &Mat<T>) {
    for (b, &tok) in tokens.iter().enumerate() {
        for (d, &g) in table.row_mut(tok).iter_mut().zip(grad.row(b)) {
            *d = *d + g;
        }
    }
}

/// Softmax cross-entropy. Returns the summed NLL and `scale · (p − onehot)`.
pub(crate) fn softmax_xent<T: Real>(logits: &Mat<T>, targets: &[usize], scale: T) -> Result<(f64, Mat<T>)> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape(format!("{} targets for {} rows of logits", targets.len(), logits.rows())));
    }
    let mut grad = Mat::zeros(logits.rows(), logits.cols());
    let mut nll = 0.0;
    for (b, &y) in targets.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::Parameter(format!("target id {y} outside vocabulary of {}", logits.cols())));
        }
        let row = logits.row(b);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let g = grad.row_mut(b);
        let mut sum = T::zero();
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - max).exp();
            sum = sum + *gv;
        }
        let log_z = sum.ln() + max;
        nll += (log_z - row[y]).to_f64().unwrap_or(f64::NAN);
        for gv in g.iter_mut() {
            *gv = *gv / sum * scale;
        }
        g[y] = g[y] - scale;
    }
    Ok((nll, grad))
}

pub(crate) fn apply_mask<T: Real>(x: &Mat<T>, mask: Option<&Mat<T>>) -> Mat<T> {
    match mask {
        Some(m) => {
            let mut out = x.clone();
            for (v, &k) in out.data_mut().iter_mut().zip(m.data()) {
                *v = *v * k;
            }
            out
        }
        None => x.clone(),
    }
}

pub(crate) fn draw_mask<T: Real>(dropout: &mut Option<(f32, &mut Rng)>, rows: usize, cols: usize) -> Option<Mat<T>> {
    match dropout {
        Some((keep, rng)) if *keep < 1.0 => Some(rng.dropout_mask(*keep, rows, cols).cast()),
        _ => None,
    }
}

pub(crate) fn check_window(inputs: &TokenWindow, targets: Option<&TokenWindow>) -> Result<usize> {
    let batch = inputs.first().map_or(0, Vec::len);
    if inputs.is_empty() || batch == 0 {
        return Err(Error::Parameter("empty token window".into()));
    }
    if inputs.iter().any(|r| r.len() != batch) {
        return Err(Error::Shape("ragged token window".into()));
    }
    if let Some(t) = targets {
        if t.len() != inputs.len() || t.iter().any(|r| r.len() != batch) {
            return Err(Error::Shape("targets do not match inputs".into()));
        }
    }
    Ok(batch)
}
