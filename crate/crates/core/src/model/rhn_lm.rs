use crate::error::{Error, Result};
use crate::iss::{build_rhn_iss_groups, IssGroupMap, OverlapPolicy, RhnTopology};
use crate::numerics::{gemm, gemm_nt, gemm_tn_acc, Mat, Matrix, Real, Rng};
use crate::rnn::{rhn_backward, rhn_forward, RhnLayerParams, RhnStepCache};

use super::{
    apply_mask, check_window, draw_mask, lookup, scatter_rows, softmax_xent, LanguageModel, LossGrad, RecurrentState,
    TensorStore, TokenWindow, Trace,
};

/// Embedding, one recurrent highway layer and a softmax output. With
/// `softmax_w == None` the output reuses the embedding (`logits = s · Eᵀ`),
/// which requires embedding width == RHN width.
///
/// Tensors: `embedding`, `rhn.input.{H,T,C}`, `rhn.{l}.rec.{H,T,C}`,
/// `rhn.{l}.bias.{H,T,C}`, optional `softmax.weight`, `softmax.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct RhnLm<T = f32> {
    pub embedding: Mat<T>,
    pub rhn: RhnLayerParams<T>,
    pub softmax_w: Option<Mat<T>>,
    pub softmax_b: Mat<T>,
}

struct Forward<T> {
    caches: Vec<RhnStepCache<T>>,
    states: Vec<Mat<T>>,
    top: Vec<Mat<T>>,
    top_masks: Vec<Option<Mat<T>>>,
    logits: Vec<Mat<T>>,
}

impl RhnLm<f32> {
    pub fn init(
        vocab: usize,
        embed: usize,
        width: usize,
        depth: usize,
        coupled: bool,
        tied: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if vocab == 0 || embed == 0 {
            return Err(Error::Parameter("vocabulary and embedding sizes must be positive".into()));
        }
        if tied && embed != width {
            return Err(Error::Topology(format!("tied output needs embedding width {embed} == RHN width {width}")));
        }
        let mut rhn = RhnLayerParams::zeros(embed, width, depth, coupled)?;
        for w in rhn.input_w.iter_mut().chain(rhn.rec_w.iter_mut().flatten()) {
            *w = rng.uniform(-0.1, 0.1, w.rows(), w.cols())?;
        }
        let embedding = rng.uniform(-0.1, 0.1, vocab, embed)?;
        let softmax_w = if tied { None } else { Some(rng.uniform(-0.1, 0.1, width, vocab)?) };
        Self::from_parts(embedding, rhn, softmax_w, Matrix::zeros(1, vocab))
    }
}

impl<T: Real> RhnLm<T> {
    pub fn from_parts(embedding: Mat<T>, rhn: RhnLayerParams<T>, softmax_w: Option<Mat<T>>, softmax_b: Mat<T>) -> Result<Self> {
        let m = Self { embedding, rhn, softmax_w, softmax_b };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.rhn.validate()?;
        let (v, e) = self.embedding.shape();
        if self.rhn.input_size() != e {
            return Err(Error::Shape(format!("embedding width {e} does not match RHN input {}", self.rhn.input_size())));
        }
        let w = self.rhn.width();
        match &self.softmax_w {
            Some(sw) if sw.shape() != (w, v) => {
                return Err(Error::Shape(format!("softmax is {}x{}, expected {w}x{v}", sw.rows(), sw.cols())));
            }
            None if e != w => {
                return Err(Error::Shape(format!("tied output needs embedding width {e} == RHN width {w}")));
            }
            _ => {}
        }
        if self.softmax_b.shape() != (1, v) {
            return Err(Error::Shape(format!("softmax bias must be 1x{v}")));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn tied(&self) -> bool {
        self.softmax_w.is_none()
    }

    pub fn topology(&self) -> RhnTopology {
        RhnTopology {
            embed: self.embedding.cols(),
            width: self.rhn.width(),
            depth: self.rhn.depth(),
            vocab: self.vocab_size(),
            coupled: self.rhn.coupled(),
            tied: self.tied(),
        }
    }

    pub fn cast<U: Real>(&self) -> RhnLm<U> {
        RhnLm {
            embedding: self.embedding.cast(),
            rhn: self.rhn.cast(),
            softmax_w: self.softmax_w.as_ref().map(Mat::cast),
            softmax_b: self.softmax_b.cast(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embedding: Mat::zeros(self.embedding.rows(), self.embedding.cols()),
            rhn: self.rhn.zeros_like(),
            softmax_w: self.softmax_w.as_ref().map(|w| Mat::zeros(w.rows(), w.cols())),
            softmax_b: Mat::zeros(1, self.softmax_b.cols()),
        }
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState<T> {
        vec![Mat::zeros(batch, self.rhn.width())]
    }

    fn forward(&self, inputs: &TokenWindow, state: &[Mat<T>], mut dropout: Option<(f32, &mut Rng)>) -> Result<Forward<T>> {
        let batch = check_window(inputs, None)?;
        if state.len() != 1 || state[0].shape() != (batch, self.rhn.width()) {
            return Err(Error::Shape("carried state does not match batch or RHN width".into()));
        }
        let mut s = state[0].clone();
        let n = inputs.len();
        let (mut caches, mut states) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut top, mut top_masks, mut logits) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for tok in inputs {
            let x = lookup(&self.embedding, tok)?;
            let mask = draw_mask(&mut dropout, batch, x.cols());
            let (next, cache) = rhn_forward(&self.rhn, &x, &s, mask.as_ref())?;
            s = next;
            let m = draw_mask(&mut dropout, batch, self.rhn.width());
            let sm = apply_mask(&s, m.as_ref());
            let mut z = match &self.softmax_w {
                Some(w) => gemm(&sm, w)?,
                None => gemm_nt(&sm, &self.embedding)?,
            };
            z.add_row_in_place(&self.softmax_b)?;
            caches.push(cache);
            states.push(s.clone());
            top.push(sm);
            top_masks.push(m);
            logits.push(z);
        }
        Ok(Forward { caches, states, top, top_masks, logits })
    }

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
        let mut ds = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let (n, dl) = softmax_xent(&fwd.logits[t], &targets[t], scale)?;
            nll += n;
            grads.softmax_b.add_assign(&dl.sum_rows())?;
            let d = match (&self.softmax_w, &mut grads.softmax_w) {
                (Some(w), Some(gw)) => {
                    gemm_tn_acc(&fwd.top[t], &dl, gw)?;
                    gemm_nt(&dl, w)?
                }
                _ => {
                    gemm_tn_acc(&dl, &fwd.top[t], &mut grads.embedding)?;
                    gemm(&dl, &self.embedding)?
                }
            };
            ds.push(apply_mask(&d, fwd.top_masks[t].as_ref()));
        }
        let rg = rhn_backward(&self.rhn, &fwd.caches, &ds)?;
        grads.rhn = rg.params;
        for (tok, dx) in inputs.iter().zip(&rg.input_grads) {
            scatter_rows(&mut grads.embedding, tok, dx);
        }
        let last = fwd.states.last().cloned().unwrap_or_else(|| state[0].clone());
        Ok((nll / count as f64, grads, vec![last]))
    }

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
        let last = fwd.states.last().cloned().unwrap_or_else(|| state[0].clone());
        Ok((nll, vec![last]))
    }

    pub fn window_trace(&self, inputs: &TokenWindow, state: &[Mat<T>]) -> Result<Trace<T>> {
        let fwd = self.forward(inputs, state, None)?;
        let last = fwd.states.last().cloned().unwrap_or_else(|| state[0].clone());
        Ok(Trace { hidden: fwd.states.into_iter().map(|s| vec![s]).collect(), logits: fwd.logits, state: vec![last] })
    }
}

impl<T: Real> TensorStore<T> for RhnLm<T> {
    fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        let names = self.rhn.transforms();
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        for (j, w) in self.rhn.input_w.iter().enumerate() {
            v.push((format!("rhn.input.{}", names[j].name()), w));
        }
        for (l, level) in self.rhn.rec_w.iter().enumerate() {
            for (j, w) in level.iter().enumerate() {
                v.push((format!("rhn.{l}.rec.{}", names[j].name()), w));
            }
        }
        for (l, level) in self.rhn.bias.iter().enumerate() {
            for (j, b) in level.iter().enumerate() {
                v.push((format!("rhn.{l}.bias.{}", names[j].name()), b));
            }
        }
        if let Some(w) = &self.softmax_w {
            v.push(("softmax.weight".into(), w));
        }
        v.push(("softmax.bias".into(), &self.softmax_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let names = self.rhn.transforms();
        let mut v = vec![("embedding".to_string(), &mut self.embedding)];
        for (j, w) in self.rhn.input_w.iter_mut().enumerate() {
            v.push((format!("rhn.input.{}", names[j].name()), w));
        }
        for (l, level) in self.rhn.rec_w.iter_mut().enumerate() {
            for (j, w) in level.iter_mut().enumerate() {
                v.push((format!("rhn.{l}.rec.{}", names[j].name()), w));
            }
        }
        for (l, level) in self.rhn.bias.iter_mut().enumerate() {
            for (j, b) in level.iter_mut().enumerate() {
                v.push((format!("rhn.{l}.bias.{}", names[j].name()), b));
            }
        }
        if let Some(w) = &mut self.softmax_w {
            v.push(("softmax.weight".into(), w));
        }
        v.push(("softmax.bias".into(), &mut self.softmax_b));
        v
    }

    fn resync(&mut self) -> Result<()> {
        self.rhn.resync()?;
        self.validate()
    }
}

impl LanguageModel for RhnLm<f32> {
    fn vocab_size(&self) -> usize {
        RhnLm::vocab_size(self)
    }

    fn initial_state(&self, batch: usize) -> RecurrentState {
        self.zero_state(batch)
    }

    fn zeros_like(&self) -> Self {
        RhnLm::zeros_like(self)
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
        build_rhn_iss_groups(&self.topology(), policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnn::finite_difference_check;

    fn flatten(m: &RhnLm<f64>) -> Vec<f64> {
        m.tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    fn unflatten(m: &mut RhnLm<f64>, w: &[f64]) {
        let mut at = 0;
        for (_, t) in m.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&w[at..at + n]);
            at += n;
        }
    }

    fn gradcheck(coupled: bool, tied: bool) {
        let mut rng = Rng::new(if tied { 3 } else { 4 });
        let mut m = RhnLm::init(5, 3, 3, 2, coupled, tied, &mut rng).unwrap();
        for (_, t) in m.tensors_mut() {
            let noise = rng.uniform(-0.4, 0.4, t.rows(), t.cols()).unwrap();
            t.add_assign(&noise).unwrap();
        }
        let m = m.cast::<f64>();
        let inputs: Vec<Vec<usize>> = (0..3).map(|_| (0..2).map(|_| rng.below(5)).collect()).collect();
        let targets: Vec<Vec<usize>> = (0..3).map(|_| (0..2).map(|_| rng.below(5)).collect()).collect();
        let state = vec![Mat::<f64>::filled(2, 3, 0.2)];
        let (_, grads, _) = m.window_loss_grad(&inputs, &targets, &state, Some((0.75, &mut Rng::new(8)))).unwrap();
        let mut scratch = m.clone();
        let report = finite_difference_check(
            &flatten(&m),
            &flatten(&grads),
            |w| {
                unflatten(&mut scratch, w);
                scratch.window_loss_grad(&inputs, &targets, &state, Some((0.75, &mut Rng::new(8)))).unwrap().0
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "coupled={coupled} tied={tied}: {report:?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradcheck(true, true);
        gradcheck(false, false);
    }

    #[test]
    fn tied_output_needs_matching_widths() {
        assert!(RhnLm::init(5, 3, 4, 1, true, true, &mut Rng::new(0)).is_err());
        let m = RhnLm::init(5, 3, 4, 1, true, false, &mut Rng::new(0)).unwrap();
        assert!(m.tensors().iter().any(|(n, _)| n == "softmax.weight"));
        assert!(m.tensors().iter().any(|(n, _)| n == "rhn.0.rec.T"));
        assert!(!m.tensors().iter().any(|(n, _)| n.ends_with(".C")));
    }
}
