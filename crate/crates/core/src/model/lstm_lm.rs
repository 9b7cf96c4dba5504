use crate::error::{Error, Result};
use crate::iss::{build_lstm_iss_groups, IssGroupMap, LstmTopology, OverlapPolicy};
use crate::numerics::{gemm, gemm_nt, gemm_tn_acc, Mat, Matrix, Real, Rng};
use crate::rnn::{check_chain, lstm_backward, lstm_sequence_forward, LayerMasks, LstmLayerParams, LstmState, SequenceOutput};

use super::{
    apply_mask, check_window, draw_mask, lookup, scatter_rows, softmax_xent, LanguageModel, LossGrad, RecurrentState,
    TensorStore, TokenWindow, Trace,
};

/// Embedding, stacked LSTM layers and a softmax output layer.
///
/// Tensors: `embedding` (V x E), `lstm.{n}.weight`, `lstm.{n}.bias`,
/// `softmax.weight` (K_top x V), `softmax.bias` (1 x V).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLm<T = f32> {
    pub embedding: Mat<T>,
    pub layers: Vec<LstmLayerParams<T>>,
    pub softmax_w: Mat<T>,
    pub softmax_b: Mat<T>,
}

struct Forward<T> {
    seq: SequenceOutput<T>,
    top: Vec<Mat<T>>,
    top_masks: Vec<Option<Mat<T>>>,
    logits: Vec<Mat<T>>,
}

impl LstmLm<f32> {
    /// Weights uniform in `[-0.1, 0.1]`, biases zero.
    pub fn init(vocab: usize, embed: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        if hidden.is_empty() || vocab == 0 || embed == 0 || hidden.contains(&0) {
            return Err(Error::Parameter("vocabulary, embedding and hidden sizes must be positive".into()));
        }
        let embedding = rng.uniform(-0.1, 0.1, vocab, embed)?;
        let mut layers = Vec::with_capacity(hidden.len());
        let mut below = embed;
        for &h in hidden {
            let w = rng.uniform(-0.1, 0.1, below + h, 4 * h)?;
            layers.push(LstmLayerParams::new(below, h, w, Matrix::zeros(1, 4 * h))?);
            below = h;
        }
        let softmax_w = rng.uniform(-0.1, 0.1, below, vocab)?;
        Self::from_parts(embedding, layers, softmax_w, Matrix::zeros(1, vocab))
    }
}

impl<T: Real> LstmLm<T> {
    pub fn from_parts(
        embedding: Mat<T>,
        layers: Vec<LstmLayerParams<T>>,
        softmax_w: Mat<T>,
        softmax_b: Mat<T>,
    ) -> Result<Self> {
        let m = Self { embedding, layers, softmax_w, softmax_b };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("LSTM language model needs at least one layer".into()));
        }
        for l in &self.layers {
            l.validate()?;
        }
        check_chain(&self.layers)?;
        let v = self.embedding.rows();
        if self.layers[0].input_size() != self.embedding.cols() {
            return Err(Error::Shape(format!(
                "embedding width {} does not match layer 0 input {}",
                self.embedding.cols(),
                self.layers[0].input_size()
            )));
        }
        let top = self.layers[self.layers.len() - 1].hidden_size();
        if self.softmax_w.shape() != (top, v) || self.softmax_b.shape() != (1, v) {
            return Err(Error::Shape(format!(
                "softmax is {}x{} + 1x{}, expected {top}x{v} + 1x{v}",
                self.softmax_w.rows(),
                self.softmax_w.cols(),
                self.softmax_b.cols()
            )));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_size(&self) -> usize {
        self.embedding.cols()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(LstmLayerParams::hidden_size).collect()
    }

    pub fn topology(&self) -> LstmTopology {
        LstmTopology::stacked_lm(self.embed_size(), &self.hidden_sizes(), self.vocab_size())
    }

    pub fn cast<U: Real>(&self) -> LstmLm<U> {
        LstmLm {
            embedding: self.embedding.cast(),
            layers: self.layers.iter().map(LstmLayerParams::cast).collect(),
            softmax_w: self.softmax_w.cast(),
            softmax_b: self.softmax_b.cast(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embedding: Mat::zeros(self.embedding.rows(), self.embedding.cols()),
            layers: self.layers.iter().map(|l| LstmLayerParams::zeros(l.input_size(), l.hidden_size())).collect(),
            softmax_w: Mat::zeros(self.softmax_w.rows(), self.softmax_w.cols()),
            softmax_b: Mat::zeros(1, self.softmax_b.cols()),
        }
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState<T> {
        self.layers.iter().flat_map(|l| [Mat::zeros(batch, l.hidden_size()), Mat::zeros(batch, l.hidden_size())]).collect()
    }

    fn unpack_state(&self, state: &[Mat<T>], batch: usize) -> Result<Vec<LstmState<T>>> {
        if state.len() != 2 * self.layers.len() {
            return Err(Error::Shape(format!(
                "state has {} tensors, model needs {}",
                state.len(),
                2 * self.layers.len()
            )));
        }
        self.layers
            .iter()
            .zip(state.chunks(2))
            .map(|(l, hc)| {
                if hc[0].shape() != (batch, l.hidden_size()) || hc[1].shape() != (batch, l.hidden_size()) {
                    return Err(Error::Shape("carried state does not match batch or hidden size".into()));
                }
                Ok(LstmState { h: hc[0].clone(), c: hc[1].clone() })
            })
            .collect()
    }

    fn forward(&self, inputs: &TokenWindow, state: &[Mat<T>], mut dropout: Option<(f32, &mut Rng)>) -> Result<Forward<T>> {
        let batch = check_window(inputs, None)?;
        let init = self.unpack_state(state, batch)?;
        let xs: Vec<Mat<T>> = inputs.iter().map(|tok| lookup(&self.embedding, tok)).collect::<Result<_>>()?;
        let masks: Option<LayerMasks<T>> = if dropout.as_ref().is_some_and(|(k, _)| *k < 1.0) {
            Some(
                self.layers
                    .iter()
                    .map(|l| {
                        (0..inputs.len())
                            .map(|_| draw_mask(&mut dropout, batch, l.input_size()).expect("dropout active"))
                            .collect()
                    })
                    .collect(),
            )
        } else {
            None
        };
        let seq = lstm_sequence_forward(&self.layers, &xs, &init, masks.as_ref())?;
        let top_k = self.softmax_w.rows();
        let mut top = Vec::with_capacity(inputs.len());
        let mut top_masks = Vec::with_capacity(inputs.len());
        let mut logits = Vec::with_capacity(inputs.len());
        for h in &seq.outputs {
            let m = draw_mask(&mut dropout, batch, top_k);
            let hm = apply_mask(h, m.as_ref());
            let mut z = gemm(&hm, &self.softmax_w)?;
            z.add_row_in_place(&self.softmax_b)?;
            top.push(hm);
            top_masks.push(m);
            logits.push(z);
        }
        Ok(Forward { seq, top, top_masks, logits })
    }

    fn pack_state(seq: &SequenceOutput<T>) -> RecurrentState<T> {
        seq.final_states.iter().flat_map(|s| [s.h.clone(), s.c.clone()]).collect()
    }

    /// Mean NLL over the window, gradients of every tensor and the carried
    /// state.
    pub fn window_loss_grad(
        &self,
        inputs: &TokenWindow,
        targets: &TokenWindow,
        state: &[Mat<T>],
        dropout: Option<(f32, &mut Rng)>,
    ) -> Result<(f64, Self, RecurrentState<T>)> {
        let batch = check_window(inputs, Some(targets))?;
        let fwd = self.forward(inputs, state, dropout)?;
        let count = inputs.len() * batch;
        let scale = T::one() / T::lit(count as f64);
        let mut grads = self.zeros_like();
        let mut nll = 0.0;
        let mut dtop = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let (n, dl) = softmax_xent(&fwd.logits[t], &targets[t], scale)?;
            nll += n;
            gemm_tn_acc(&fwd.top[t], &dl, &mut grads.softmax_w)?;
            grads.softmax_b.add_assign(&dl.sum_rows())?;
            let dh = gemm_nt(&dl, &self.softmax_w)?;
            dtop.push(apply_mask(&dh, fwd.top_masks[t].as_ref()));
        }
        let lg = lstm_backward(&self.layers, &fwd.seq.caches, &dtop)?;
        grads.layers = lg.layers;
        for (tok, dx) in inputs.iter().zip(&lg.input_grads) {
            scatter_rows(&mut grads.embedding, tok, dx);
        }
        Ok((nll / count as f64, grads, Self::pack_state(&fwd.seq)))
    }

    /// Summed NLL without dropout.
    pub fn window_nll(
        &self,
        inputs: &TokenWindow,
        targets: &TokenWindow,
        state: &[Mat<T>],
    ) -> Result<(f64, RecurrentState<T>)> {
        check_window(inputs, Some(targets))?;
        let fwd = self.forward(inputs, state, None)?;
        let mut nll = 0.0;
        for (z, y) in fwd.logits.iter().zip(targets) {
            nll += softmax_xent(z, y, T::one())?.0;
        }
        Ok((nll, Self::pack_state(&fwd.seq)))
    }

    pub fn window_trace(&self, inputs: &TokenWindow, state: &[Mat<T>]) -> Result<Trace<T>> {
        let fwd = self.forward(inputs, state, None)?;
        let state = Self::pack_state(&fwd.seq);
        Ok(Trace { hidden: fwd.seq.hidden, logits: fwd.logits, state })
    }
}

impl<T: Real> TensorStore<T> for LstmLm<T> {
    fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        for (n, l) in self.layers.iter().enumerate() {
            v.push((format!("lstm.{n}.weight"), &l.weight));
            v.push((format!("lstm.{n}.bias"), &l.bias));
        }
        v.push(("softmax.weight".into(), &self.softmax_w));
        v.push(("softmax.bias".into(), &self.softmax_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut v = vec![("embedding".to_string(), &mut self.embedding)];
        for (n, l) in self.layers.iter_mut().enumerate() {
            v.push((format!("lstm.{n}.weight"), &mut l.weight));
            v.push((format!("lstm.{n}.bias"), &mut l.bias));
        }
        v.push(("softmax.weight".into(), &mut self.softmax_w));
        v.push(("softmax.bias".into(), &mut self.softmax_b));
        v
    }

    fn resync(&mut self) -> Result<()> {
        for l in &mut self.layers {
            l.resync()?;
        }
        self.validate()
    }
}

impl LanguageModel for LstmLm<f32> {
    fn vocab_size(&self) -> usize {
        LstmLm::vocab_size(self)
    }

    fn initial_state(&self, batch: usize) -> RecurrentState {
        self.zero_state(batch)
    }

    fn zeros_like(&self) -> Self {
        LstmLm::zeros_like(self)
    }

    fn loss_and_grad(
        &self,
        inputs: &TokenWindow,
        targets: &TokenWindow,
        state: &[Matrix],
        dropout: Option<(f32, &mut Rng)>,
    ) -> Result<LossGrad<Self>> {
        let (loss, grads, state) = self.window_loss_grad(inputs, targets, state, dropout)?;
        Ok(LossGrad { loss, grads, state })
    }

    fn nll(&self, inputs: &TokenWindow, targets: &TokenWindow, state: &[Matrix]) -> Result<(f64, RecurrentState)> {
        self.window_nll(inputs, targets, state)
    }

    fn trace(&self, inputs: &TokenWindow, state: &[Matrix]) -> Result<Trace> {
        self.window_trace(inputs, state)
    }

    fn group_map(&self, policy: OverlapPolicy) -> Result<IssGroupMap> {
        build_lstm_iss_groups(&self.topology(), policy)
    }
}
