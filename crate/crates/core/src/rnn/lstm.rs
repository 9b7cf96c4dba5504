//! LSTM layers with a combined gate weight.
//!
//! The weight of one layer is `(input_size + hidden_size) x 4·hidden_size`.
//! Row `r < input_size` reads input feature `r`; row `input_size + k` reads
//! the previous hidden component `k`. Columns are four blocks of width
//! `hidden_size` in the order forget, input, update, output (`"fiuo"`).

use crate::error::{shape_err, Error, Result};
use crate::numerics::{gemm, gemm_nt, gemm_tn_acc, sigmoid, Mat, Real};

/// Column block order of the combined gate weight.
pub const GATE_ORDER: &str = "fiuo";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Forget = 0,
    Input = 1,
    Update = 2,
    Output = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Forget, Gate::Input, Gate::Update, Gate::Output];

    /// Column of component `k` inside this gate's block.
    #[inline]
    pub fn column(self, hidden: usize, k: usize) -> usize {
        self as usize * hidden + k
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams<T = f32> {
    input_size: usize,
    hidden_size: usize,
    pub weight: Mat<T>,
    pub bias: Mat<T>,
}

impl<T: Real> LstmLayerParams<T> {
    pub fn new(input_size: usize, hidden_size: usize, weight: Mat<T>, bias: Mat<T>) -> Result<Self> {
        let p = Self { input_size, hidden_size, weight, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            input_size,
            hidden_size,
            weight: Mat::zeros(input_size + hidden_size, 4 * hidden_size),
            bias: Mat::zeros(1, 4 * hidden_size),
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    /// Re-derives the sizes from the tensor shapes and checks them.
    pub fn resync(&mut self) -> Result<()> {
        if !self.weight.cols().is_multiple_of(4) {
            return shape_err(format!("gate weight has {} columns, not a multiple of 4", self.weight.cols()));
        }
        self.hidden_size = self.weight.cols() / 4;
        if self.weight.rows() <= self.hidden_size {
            return shape_err("gate weight has no input rows");
        }
        self.input_size = self.weight.rows() - self.hidden_size;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let (i, h) = (self.input_size, self.hidden_size);
        if i == 0 || h == 0 {
            return shape_err(format!("LSTM sizes must be positive (input {i}, hidden {h})"));
        }
        if self.weight.shape() != (i + h, 4 * h) {
            return shape_err(format!(
                "gate weight is {}x{}, expected {}x{}",
                self.weight.rows(),
                self.weight.cols(),
                i + h,
                4 * h
            ));
        }
        if self.bias.shape() != (1, 4 * h) {
            return shape_err(format!("gate bias is {}x{}, expected 1x{}", self.bias.rows(), self.bias.cols(), 4 * h));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> LstmLayerParams<U> {
        LstmLayerParams {
            input_size: self.input_size,
            hidden_size: self.hidden_size,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Hidden and cell state, one row per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T = f32> {
    pub h: Mat<T>,
    pub c: Mat<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self { h: Mat::zeros(batch, hidden), c: Mat::zeros(batch, hidden) }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Clone, Debug)]
pub struct StepCache<T = f32> {
    /// `[x_t, h_{t-1}]` after the input dropout mask.
    pub xh: Mat<T>,
    pub mask: Option<Mat<T>>,
    pub c_prev: Mat<T>,
    pub f: Mat<T>,
    pub i: Mat<T>,
    pub u: Mat<T>,
    pub o: Mat<T>,
    pub c: Mat<T>,
    pub tanh_c: Mat<T>,
}

/// One time step. `dropout_mask`, when present, multiplies `x_t` elementwise.
pub fn lstm_step<T: Real>(
    params: &LstmLayerParams<T>,
    x: &Mat<T>,
    prev: &LstmState<T>,
    dropout_mask: Option<&Mat<T>>,
) -> Result<(LstmState<T>, StepCache<T>)> {
    let (ni, nh) = (params.input_size, params.hidden_size);
    let batch = x.rows();
    if x.cols() != ni {
        return shape_err(format!("input has {} features, layer expects {ni}", x.cols()));
    }
    if prev.h.shape() != (batch, nh) || prev.c.shape() != (batch, nh) {
        return shape_err(format!(
            "state is {}x{}/{}x{}, layer expects {batch}x{nh}",
            prev.h.rows(),
            prev.h.cols(),
            prev.c.rows(),
            prev.c.cols()
        ));
    }
    let xin = match dropout_mask {
        Some(m) => {
            if m.shape() != x.shape() {
                return shape_err("dropout mask shape differs from input");
            }
            let mut xm = x.clone();
            for (v, &k) in xm.data_mut().iter_mut().zip(m.data()) {
                *v = *v * k;
            }
            xm
        }
        None => x.clone(),
    };
    let xh = Mat::hcat(&xin, &prev.h)?;
    let mut z = gemm(&xh, &params.weight)?;
    z.add_row_in_place(&params.bias)?;

    let mut f = Mat::zeros(batch, nh);
    let mut i = Mat::zeros(batch, nh);
    let mut u = Mat::zeros(batch, nh);
    let mut o = Mat::zeros(batch, nh);
    let mut c = Mat::zeros(batch, nh);
    let mut tanh_c = Mat::zeros(batch, nh);
    let mut h = Mat::zeros(batch, nh);
    for b in 0..batch {
        let zr = z.row(b);
        for k in 0..nh {
            let fv = sigmoid(zr[Gate::Forget.column(nh, k)]);
            let iv = sigmoid(zr[Gate::Input.column(nh, k)]);
            let uv = zr[Gate::Update.column(nh, k)].tanh();
            let ov = sigmoid(zr[Gate::Output.column(nh, k)]);
            let cv = fv * prev.c.get(b, k) + iv * uv;
            let tc = cv.tanh();
            f.set(b, k, fv);
            i.set(b, k, iv);
            u.set(b, k, uv);
            o.set(b, k, ov);
            c.set(b, k, cv);
            tanh_c.set(b, k, tc);
            h.set(b, k, ov * tc);
        }
    }
    let state = LstmState { h, c: c.clone() };
    let cache = StepCache { xh, mask: dropout_mask.cloned(), c_prev: prev.c.clone(), f, i, u, o, c, tanh_c };
    Ok((state, cache))
}

/// Per-layer, per-step input masks (`masks[layer][step]`).
pub type LayerMasks<T> = Vec<Vec<Mat<T>>>;

#[derive(Clone, Debug)]
pub struct SequenceOutput<T = f32> {
    /// Top-layer hidden state per step.
    pub outputs: Vec<Mat<T>>,
    /// Hidden state of every layer per step (`hidden[step][layer]`).
    pub hidden: Vec<Vec<Mat<T>>>,
    pub final_states: Vec<LstmState<T>>,
    /// `caches[layer][step]`.
    pub caches: Vec<Vec<StepCache<T>>>,
}

/// Checks that consecutive layers chain: hidden of layer n feeds layer n+1.
pub fn check_chain<T: Real>(layers: &[LstmLayerParams<T>]) -> Result<()> {
    for (n, w) in layers.windows(2).enumerate() {
        if w[0].hidden_size != w[1].input_size {
            return shape_err(format!(
                "layer {n} hidden size {} does not match layer {} input size {}",
                w[0].hidden_size,
                n + 1,
                w[1].input_size
            ));
        }
    }
    Ok(())
}

/// Unrolls a layer stack over `inputs`, keeping all caches for BPTT.
pub fn lstm_sequence_forward<T: Real>(
    layers: &[LstmLayerParams<T>],
    inputs: &[Mat<T>],
    initial: &[LstmState<T>],
    masks: Option<&LayerMasks<T>>,
) -> Result<SequenceOutput<T>> {
    check_chain(layers)?;
    if initial.len() != layers.len() {
        return shape_err(format!("{} initial states for {} layers", initial.len(), layers.len()));
    }
    if let Some(m) = masks {
        if m.len() != layers.len() || m.iter().any(|v| v.len() != inputs.len()) {
            return shape_err("dropout masks do not cover every layer and step");
        }
    }
    let mut states = initial.to_vec();
    let mut caches: Vec<Vec<StepCache<T>>> = vec![Vec::with_capacity(inputs.len()); layers.len()];
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut hidden = Vec::with_capacity(inputs.len());
    for (t, x) in inputs.iter().enumerate() {
        let mut below = x.clone();
        let mut per_layer = Vec::with_capacity(layers.len());
        for (n, layer) in layers.iter().enumerate() {
            let mask = masks.map(|m| &m[n][t]);
            let (state, cache) = lstm_step(layer, &below, &states[n], mask)?;
            below = state.h.clone();
            per_layer.push(state.h.clone());
            states[n] = state;
            caches[n].push(cache);
        }
        outputs.push(below);
        hidden.push(per_layer);
    }
    Ok(SequenceOutput { outputs, hidden, final_states: states, caches })
}

#[derive(Clone, Debug)]
pub struct LstmGrads<T = f32> {
    /// `∂E/∂weight`, `∂E/∂bias` per layer.
    pub layers: Vec<LstmLayerParams<T>>,
    /// `∂E/∂x_t` for the bottom layer's raw (pre-mask) input.
    pub input_grads: Vec<Mat<T>>,
}

/// Backpropagation through time. `output_grads[t]` is `∂E/∂h_t` of the top
/// layer; gradients are accumulated over every step. Initial states are
/// treated as constants.
pub fn lstm_backward<T: Real>(
    layers: &[LstmLayerParams<T>],
    caches: &[Vec<StepCache<T>>],
    output_grads: &[Mat<T>],
) -> Result<LstmGrads<T>> {
    if caches.len() != layers.len() {
        return Err(Error::Consistency(format!("{} cache stacks for {} layers", caches.len(), layers.len())));
    }
    let steps = output_grads.len();
    for (n, (layer, stack)) in layers.iter().zip(caches).enumerate() {
        if stack.len() != steps {
            return Err(Error::Consistency(format!(
                "layer {n} cached {} steps but {steps} output gradients were given",
                stack.len()
            )));
        }
        for cache in stack {
            if cache.xh.cols() != layer.input_size + layer.hidden_size || cache.f.cols() != layer.hidden_size {
                return Err(Error::Consistency(format!("layer {n} cache does not match its parameters")));
            }
        }
    }

    let mut grads: Vec<LstmLayerParams<T>> =
        layers.iter().map(|l| LstmLayerParams::zeros(l.input_size, l.hidden_size)).collect();
    let mut dh_above: Vec<Mat<T>> = output_grads.to_vec();

    for n in (0..layers.len()).rev() {
        let layer = &layers[n];
        let (ni, nh) = (layer.input_size, layer.hidden_size);
        let mut dx_below = Vec::with_capacity(steps);
        if steps == 0 {
            dh_above = dx_below;
            continue;
        }
        let batch = caches[n][0].f.rows();
        let mut dh_next: Mat<T> = Mat::zeros(batch, nh);
        let mut dc_next: Mat<T> = Mat::zeros(batch, nh);
        let g = &mut grads[n];
        for t in (0..steps).rev() {
            let cache = &caches[n][t];
            let dh_out = &dh_above[t];
            if dh_out.shape() != (batch, nh) {
                return Err(Error::Consistency(format!(
                    "layer {n} step {t}: gradient is {}x{}, expected {batch}x{nh}",
                    dh_out.rows(),
                    dh_out.cols()
                )));
            }
            let mut dz = Mat::zeros(batch, 4 * nh);
            let mut dc_prev = Mat::zeros(batch, nh);
            for b in 0..batch {
                for k in 0..nh {
                    let dh = dh_out.get(b, k) + dh_next.get(b, k);
                    let (f, i, u, o) = (cache.f.get(b, k), cache.i.get(b, k), cache.u.get(b, k), cache.o.get(b, k));
                    let tc = cache.tanh_c.get(b, k);
                    let one = T::one();
                    let d_o = dh * tc;
                    let dc = dc_next.get(b, k) + dh * o * (one - tc * tc);
                    let d_f = dc * cache.c_prev.get(b, k);
                    let d_i = dc * u;
                    let d_u = dc * i;
                    dc_prev.set(b, k, dc * f);
                    dz.set(b, Gate::Forget.column(nh, k), d_f * f * (one - f));
                    dz.set(b, Gate::Input.column(nh, k), d_i * i * (one - i));
                    dz.set(b, Gate::Update.column(nh, k), d_u * (one - u * u));
                    dz.set(b, Gate::Output.column(nh, k), d_o * o * (one - o));
                }
            }
            gemm_tn_acc(&cache.xh, &dz, &mut g.weight)?;
            g.bias.add_assign(&dz.sum_rows())?;
            let dxh = gemm_nt(&dz, &layer.weight)?;
            let mut dx = dxh.columns(0..ni);
            if let Some(mask) = &cache.mask {
                for (v, &m) in dx.data_mut().iter_mut().zip(mask.data()) {
                    *v = *v * m;
                }
            }
            dh_next = dxh.columns(ni..ni + nh);
            dc_next = dc_prev;
            dx_below.push(dx);
        }
        dx_below.reverse();
        dh_above = dx_below;
    }
    Ok(LstmGrads { layers: grads, input_grads: dh_above })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, Matrix64, Rng};

    fn random_layer(rng: &mut Rng, ni: usize, nh: usize, scale: f32) -> LstmLayerParams<f64> {
        LstmLayerParams::new(
            ni,
            nh,
            rng.uniform(-scale, scale, ni + nh, 4 * nh).unwrap(),
            rng.uniform(-scale, scale, 1, 4 * nh).unwrap(),
        )
        .unwrap()
        .cast()
    }

    /// Literal scalar evaluation of the recurrence for hidden = input = 1.
    fn scalar_oracle(p: &LstmLayerParams<f64>, x: f64, h: f64, c: f64) -> (f64, f64) {
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let pre = |g: usize| x * p.weight.get(0, g) + h * p.weight.get(1, g) + p.bias.get(0, g);
        let (f, i, u, o) = (s(pre(0)), s(pre(1)), pre(2).tanh(), s(pre(3)));
        let c_new = f * c + i * u;
        (o * c_new.tanh(), c_new)
    }

    #[test]
    fn zero_params_give_half_gates() {
        let p = LstmLayerParams::<f32>::zeros(3, 2);
        let x = Matrix::zeros(1, 3);
        let (s, cache) = lstm_step(&p, &x, &LstmState::zeros(1, 2), None).unwrap();
        assert!(cache.i.data().iter().chain(cache.f.data()).chain(cache.o.data()).all(|&v| v == 0.5));
        assert!(cache.u.data().iter().chain(s.c.data()).chain(s.h.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_hold_the_cell() {
        let w = Matrix::zeros(2, 4);
        let b = Matrix::row_vector(&[20.0, -20.0, -20.0, -20.0]).unwrap();
        let p = LstmLayerParams::new(1, 1, w, b).unwrap();
        let prev = LstmState { h: Matrix::zeros(1, 1), c: Matrix::filled(1, 1, 1.0) };
        let (s, _) = lstm_step(&p, &Matrix::filled(1, 1, 0.3), &prev, None).unwrap();
        assert!((s.c.get(0, 0) - 1.0).abs() < 1e-6);
        assert!(s.h.get(0, 0).abs() < 1e-6);
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = Rng::new(17);
        for _ in 0..20 {
            let p = random_layer(&mut rng, 1, 1, 1.0);
            let (x, h, c) = (rng.next_f64() * 2.0 - 1.0, rng.next_f64() * 2.0 - 1.0, rng.next_f64() * 2.0 - 1.0);
            let prev = LstmState { h: Matrix64::filled(1, 1, h), c: Matrix64::filled(1, 1, c) };
            let (s, _) = lstm_step(&p, &Matrix64::filled(1, 1, x), &prev, None).unwrap();
            let (wh, wc) = scalar_oracle(&p, x, h, c);
            assert!((s.h.get(0, 0) - wh).abs() < 1e-6);
            assert!((s.c.get(0, 0) - wc).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let p = LstmLayerParams::<f32>::zeros(3, 2);
        assert!(lstm_step(&p, &Matrix::zeros(1, 2), &LstmState::zeros(1, 2), None).is_err());
        assert!(lstm_step(&p, &Matrix::zeros(1, 3), &LstmState::zeros(1, 3), None).is_err());
        let bad = [LstmLayerParams::<f32>::zeros(3, 2), LstmLayerParams::zeros(3, 2)];
        assert!(lstm_sequence_forward(&bad, &[], &[LstmState::zeros(1, 2), LstmState::zeros(1, 2)], None).is_err());
    }

    #[test]
    fn empty_sequence_keeps_initial_state() {
        let mut rng = Rng::new(2);
        let layers = vec![random_layer(&mut rng, 2, 3, 0.5)];
        let init = vec![LstmState { h: Matrix64::filled(1, 3, 0.2), c: Matrix64::filled(1, 3, -0.1) }];
        let out = lstm_sequence_forward(&layers, &[], &init, None).unwrap();
        assert!(out.outputs.is_empty());
        assert_eq!(out.final_states, init);
    }

    #[test]
    fn sequence_equals_manual_chaining() {
        let mut rng = Rng::new(4);
        let layers = vec![random_layer(&mut rng, 2, 3, 0.5), random_layer(&mut rng, 3, 2, 0.5)];
        let inputs: Vec<Matrix64> = (0..3).map(|_| rng.uniform(-1.0, 1.0, 2, 2).unwrap().cast()).collect();
        let init = vec![LstmState::zeros(2, 3), LstmState::zeros(2, 2)];
        let out = lstm_sequence_forward(&layers, &inputs, &init, None).unwrap();
        let mut s0 = init[0].clone();
        let mut s1 = init[1].clone();
        for (t, x) in inputs.iter().enumerate() {
            s0 = lstm_step(&layers[0], x, &s0, None).unwrap().0;
            s1 = lstm_step(&layers[1], &s0.h, &s1, None).unwrap().0;
            assert_eq!(out.outputs[t], s1.h);
        }
        assert_eq!(out.final_states, vec![s0, s1]);
    }

    #[test]
    fn zero_output_grads_give_zero_gradients() {
        let mut rng = Rng::new(8);
        let layers = vec![random_layer(&mut rng, 2, 3, 0.5)];
        let inputs: Vec<Matrix64> = (0..4).map(|_| rng.uniform(-1.0, 1.0, 1, 2).unwrap().cast()).collect();
        let out = lstm_sequence_forward(&layers, &inputs, &[LstmState::zeros(1, 3)], None).unwrap();
        let zeros = vec![Matrix64::zeros(1, 3); 4];
        let g = lstm_backward(&layers, &out.caches, &zeros).unwrap();
        assert_eq!(g.layers[0].weight.max_abs(), 0.0);
        assert_eq!(g.layers[0].bias.max_abs(), 0.0);
        assert!(g.input_grads.iter().all(|m| m.max_abs() == 0.0));
    }

    #[test]
    fn single_step_scalar_chain_rule() {
        // E = h_1 with zero initial state: ∂E/∂z_o = tanh(c)·o(1-o), etc.
        let mut rng = Rng::new(21);
        let p = random_layer(&mut rng, 1, 1, 1.0);
        let x = 0.7;
        let out = lstm_sequence_forward(std::slice::from_ref(&p), &[Matrix64::filled(1, 1, x)], &[LstmState::zeros(1, 1)], None)
            .unwrap();
        let g = lstm_backward(std::slice::from_ref(&p), &out.caches, &[Matrix64::filled(1, 1, 1.0)]).unwrap();

        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let pre = |gi: usize| x * p.weight.get(0, gi) + p.bias.get(0, gi);
        let (i, u, o) = (s(pre(1)), pre(2).tanh(), s(pre(3)));
        let c = i * u;
        let tc = c.tanh();
        let dc = o * (1.0 - tc * tc);
        let want_bias = [0.0, dc * u * i * (1.0 - i), dc * i * (1.0 - u * u), tc * o * (1.0 - o)];
        for gi in 0..4 {
            assert!((g.layers[0].bias.get(0, gi) - want_bias[gi]).abs() < 1e-6, "gate {gi}");
            assert!((g.layers[0].weight.get(0, gi) - x * want_bias[gi]).abs() < 1e-6);
            // h_{t-1} = 0 row receives nothing
            assert_eq!(g.layers[0].weight.get(1, gi), 0.0);
        }
        let dx: f64 = (0..4).map(|gi| want_bias[gi] * p.weight.get(0, gi)).sum();
        assert!((g.input_grads[0].get(0, 0) - dx).abs() < 1e-6);
    }

    #[test]
    fn backward_rejects_mismatched_caches() {
        let mut rng = Rng::new(1);
        let layers = vec![random_layer(&mut rng, 2, 3, 0.5)];
        let out = lstm_sequence_forward(
            &layers,
            &[Matrix64::zeros(1, 2)],
            &[LstmState::zeros(1, 3)],
            None,
        )
        .unwrap();
        let grads = vec![Matrix64::zeros(1, 3); 2];
        assert!(matches!(lstm_backward(&layers, &out.caches, &grads), Err(Error::Consistency(_))));
        let other = vec![random_layer(&mut rng, 2, 4, 0.5)];
        assert!(matches!(
            lstm_backward(&other, &out.caches, &grads[..1]),
            Err(Error::Consistency(_))
        ));
    }
}
