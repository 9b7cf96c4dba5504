//! Recurrent highway layer with transition depth `L`.
//!
//! For `l = 1..L`, with `s_0` the previous step's state:
//!
//! ```text
//! h_l = tanh(x·W_H·[l=1] + s_{l-1}·R_{H,l} + b_{H,l})
//! t_l = σ(x·W_T·[l=1] + s_{l-1}·R_{T,l} + b_{T,l})
//! c_l = σ(x·W_C·[l=1] + s_{l-1}·R_{C,l} + b_{C,l})   (or 1 - t_l when coupled)
//! s_l = h_l ⊙ t_l + s_{l-1} ⊙ c_l
//! ```
//!
//! `R` matrices are `width x width` (row = consumed unit, column = produced
//! unit); input matrices are `input_size x width`.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{gemm, gemm_nt, gemm_tn_acc, sigmoid, Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    H = 0,
    T = 1,
    C = 2,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::H => "H",
            Transform::T => "T",
            Transform::C => "C",
        }
    }

    /// Transforms that own parameters: `H, T` when the carry gate is coupled,
    /// `H, T, C` otherwise.
    pub fn active(coupled: bool) -> &'static [Transform] {
        if coupled {
            &[Transform::H, Transform::T]
        } else {
            &[Transform::H, Transform::T, Transform::C]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RhnLayerParams<T = f32> {
    input_size: usize,
    width: usize,
    depth: usize,
    coupled: bool,
    /// One per active transform.
    pub input_w: Vec<Mat<T>>,
    /// `rec_w[level][transform]`.
    pub rec_w: Vec<Vec<Mat<T>>>,
    /// `bias[level][transform]`, each `1 x width`.
    pub bias: Vec<Vec<Mat<T>>>,
}

impl<T: Real> RhnLayerParams<T> {
    pub fn zeros(input_size: usize, width: usize, depth: usize, coupled: bool) -> Result<Self> {
        if input_size == 0 || width == 0 || depth == 0 {
            return shape_err(format!("RHN sizes must be positive (input {input_size}, width {width}, depth {depth})"));
        }
        let nt = Transform::active(coupled).len();
        Ok(Self {
            input_size,
            width,
            depth,
            coupled,
            input_w: vec![Mat::zeros(input_size, width); nt],
            rec_w: vec![vec![Mat::zeros(width, width); nt]; depth],
            bias: vec![vec![Mat::zeros(1, width); nt]; depth],
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn coupled(&self) -> bool {
        self.coupled
    }

    pub fn transforms(&self) -> &'static [Transform] {
        Transform::active(self.coupled)
    }

    /// Re-derives input size and width from the tensors and checks every shape.
    pub fn resync(&mut self) -> Result<()> {
        let first = self.input_w.first().ok_or_else(|| Error::Shape("RHN has no input transforms".into()))?;
        self.input_size = first.rows();
        self.width = first.cols();
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let nt = self.transforms().len();
        let (ni, w) = (self.input_size, self.width);
        if self.input_w.len() != nt || self.rec_w.len() != self.depth || self.bias.len() != self.depth {
            return shape_err("RHN tensor lists do not match depth/transform count");
        }
        for m in &self.input_w {
            if m.shape() != (ni, w) {
                return shape_err(format!("RHN input transform is {}x{}, expected {ni}x{w}", m.rows(), m.cols()));
            }
        }
        for (l, (rs, bs)) in self.rec_w.iter().zip(&self.bias).enumerate() {
            if rs.len() != nt || bs.len() != nt {
                return shape_err(format!("RHN level {l} has wrong transform count"));
            }
            if rs.iter().any(|m| m.shape() != (w, w)) || bs.iter().any(|b| b.shape() != (1, w)) {
                return shape_err(format!("RHN level {l} tensors are not {w}x{w} / 1x{w}"));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> RhnLayerParams<U> {
        RhnLayerParams {
            input_size: self.input_size,
            width: self.width,
            depth: self.depth,
            coupled: self.coupled,
            input_w: self.input_w.iter().map(Mat::cast).collect(),
            rec_w: self.rec_w.iter().map(|v| v.iter().map(Mat::cast).collect()).collect(),
            bias: self.bias.iter().map(|v| v.iter().map(Mat::cast).collect()).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size, self.width, self.depth, self.coupled).expect("valid sizes")
    }
}

#[derive(Clone, Debug)]
pub struct RhnLevel<T> {
    pub s_in: Mat<T>,
    pub h: Mat<T>,
    pub t: Mat<T>,
    pub c: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct RhnStepCache<T = f32> {
    /// Input after the dropout mask.
    pub x: Mat<T>,
    pub mask: Option<Mat<T>>,
    pub levels: Vec<RhnLevel<T>>,
}

/// One time step; returns the new state `s_L`.
pub fn rhn_forward<T: Real>(
    params: &RhnLayerParams<T>,
    x: &Mat<T>,
    s_prev: &Mat<T>,
    dropout_mask: Option<&Mat<T>>,
) -> Result<(Mat<T>, RhnStepCache<T>)> {
    let batch = x.rows();
    if x.cols() != params.input_size {
        return shape_err(format!("input has {} features, RHN expects {}", x.cols(), params.input_size));
    }
    if s_prev.shape() != (batch, params.width) {
        return shape_err(format!(
            "state is {}x{}, RHN expects {batch}x{}",
            s_prev.rows(),
            s_prev.cols(),
            params.width
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
    let nt = params.transforms().len();
    let input_terms: Vec<Mat<T>> = params.input_w.iter().map(|w| gemm(&xin, w)).collect::<Result<_>>()?;
    let mut s = s_prev.clone();
    let mut levels = Vec::with_capacity(params.depth);
    for l in 0..params.depth {
        let mut z = Vec::with_capacity(nt);
        for (j, r) in params.rec_w[l].iter().enumerate() {
            let mut zj = gemm(&s, r)?;
            if l == 0 {
                zj.add_assign(&input_terms[j])?;
            }
            zj.add_row_in_place(&params.bias[l][j])?;
            z.push(zj);
        }
        let h = z[Transform::H as usize].map(T::tanh);
        let t = z[Transform::T as usize].map(sigmoid);
        let c = if params.coupled { t.map(|v| T::one() - v) } else { z[Transform::C as usize].map(sigmoid) };
        let mut next = Mat::zeros(batch, params.width);
        for (((o, &hv), (&tv, &cv)), &sv) in
            next.data_mut().iter_mut().zip(h.data()).zip(t.data().iter().zip(c.data())).zip(s.data())
        {
            *o = hv * tv + sv * cv;
        }
        levels.push(RhnLevel { s_in: s, h, t, c });
        s = next;
    }
    Ok((s, RhnStepCache { x: xin, mask: dropout_mask.cloned(), levels }))
}

#[derive(Clone, Debug)]
pub struct RhnGrads<T = f32> {
    pub params: RhnLayerParams<T>,
    /// `∂E/∂x_t` before the dropout mask.
    pub input_grads: Vec<Mat<T>>,
}

/// Backpropagation through depth and time. `state_grads[t]` is `∂E/∂s_t`
/// coming from outside the recurrence (e.g. the output layer).
pub fn rhn_backward<T: Real>(
    params: &RhnLayerParams<T>,
    caches: &[RhnStepCache<T>],
    state_grads: &[Mat<T>],
) -> Result<RhnGrads<T>> {
    if caches.len() != state_grads.len() {
        return Err(Error::Consistency(format!(
            "{} cached steps but {} state gradients",
            caches.len(),
            state_grads.len()
        )));
    }
    let w = params.width;
    for (t, cache) in caches.iter().enumerate() {
        if cache.levels.len() != params.depth
            || cache.x.cols() != params.input_size
            || cache.levels.iter().any(|lv| lv.h.cols() != w)
        {
            return Err(Error::Consistency(format!("step {t} cache does not match the RHN parameters")));
        }
    }
    let mut g = params.zeros_like();
    let mut input_grads = Vec::with_capacity(caches.len());
    let Some(first) = caches.first() else {
        return Ok(RhnGrads { params: g, input_grads });
    };
    let batch = first.x.rows();
    let mut carry = Mat::zeros(batch, w);
    let one = T::one();
    for t in (0..caches.len()).rev() {
        let cache = &caches[t];
        if state_grads[t].shape() != (batch, w) {
            return Err(Error::Consistency(format!("step {t} state gradient has the wrong shape")));
        }
        let mut ds = state_grads[t].clone();
        ds.add_assign(&carry)?;
        let mut dx = Mat::zeros(batch, params.input_size);
        for l in (0..params.depth).rev() {
            let lv = &cache.levels[l];
            let n = ds.len();
            let mut dz_h = Mat::zeros(batch, w);
            let mut dz_t = Mat::zeros(batch, w);
            let mut dz_c = Mat::zeros(batch, w);
            let mut ds_in = Mat::zeros(batch, w);
            for e in 0..n {
                let d = ds.data()[e];
                let (h, tv, c, s) = (lv.h.data()[e], lv.t.data()[e], lv.c.data()[e], lv.s_in.data()[e]);
                let dh = d * tv;
                let mut dt = d * h;
                let dc = d * s;
                ds_in.data_mut()[e] = d * c;
                dz_h.data_mut()[e] = dh * (one - h * h);
                if params.coupled {
                    dt = dt - dc;
                } else {
                    dz_c.data_mut()[e] = dc * c * (one - c);
                }
                dz_t.data_mut()[e] = dt * tv * (one - tv);
            }
            let dzs = [dz_h, dz_t, dz_c];
            for (j, &tr) in params.transforms().iter().enumerate() {
                let dz = &dzs[tr as usize];
                gemm_tn_acc(&lv.s_in, dz, &mut g.rec_w[l][j])?;
                g.bias[l][j].add_assign(&dz.sum_rows())?;
                ds_in.add_assign(&gemm_nt(dz, &params.rec_w[l][j])?)?;
                if l == 0 {
                    gemm_tn_acc(&cache.x, dz, &mut g.input_w[j])?;
                    dx.add_assign(&gemm_nt(dz, &params.input_w[j])?)?;
                }
            }
            ds = ds_in;
        }
        if let Some(mask) = &cache.mask {
            for (v, &m) in dx.data_mut().iter_mut().zip(mask.data()) {
                *v = *v * m;
            }
        }
        input_grads.push(dx);
        carry = ds;
    }
    input_grads.reverse();
    Ok(RhnGrads { params: g, input_grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix64, Rng};

    pub(crate) fn random_rhn(rng: &mut Rng, ni: usize, w: usize, depth: usize, coupled: bool) -> RhnLayerParams<f64> {
        let mut p = RhnLayerParams::<f32>::zeros(ni, w, depth, coupled).unwrap();
        for m in p.input_w.iter_mut().chain(p.rec_w.iter_mut().flatten()).chain(p.bias.iter_mut().flatten()) {
            *m = rng.uniform(-0.8, 0.8, m.rows(), m.cols()).unwrap();
        }
        p.cast()
    }

    #[test]
    fn zero_params_zero_state() {
        let p = RhnLayerParams::<f64>::zeros(3, 4, 2, false).unwrap();
        let x = Matrix64::filled(1, 3, 0.5);
        let (s, _) = rhn_forward(&p, &x, &Matrix64::zeros(1, 4), None).unwrap();
        assert_eq!(s.max_abs(), 0.0);
    }

    #[test]
    fn scalar_oracle_depth_one() {
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut rng = Rng::new(5);
        for coupled in [false, true] {
            for _ in 0..10 {
                let p = random_rhn(&mut rng, 1, 1, 1, coupled);
                let (x, sp) = (rng.next_f64() - 0.5, rng.next_f64() - 0.5);
                let pre = |j: usize| x * p.input_w[j].get(0, 0) + sp * p.rec_w[0][j].get(0, 0) + p.bias[0][j].get(0, 0);
                let h = pre(0).tanh();
                let t = sig(pre(1));
                let c = if coupled { 1.0 - t } else { sig(pre(2)) };
                let want = h * t + sp * c;
                let (s, _) =
                    rhn_forward(&p, &Matrix64::filled(1, 1, x), &Matrix64::filled(1, 1, sp), None).unwrap();
                assert!((s.get(0, 0) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn depth_two_is_two_chained_levels() {
        let mut rng = Rng::new(6);
        let p = random_rhn(&mut rng, 3, 4, 2, false);
        let x: Matrix64 = rng.uniform(-1.0, 1.0, 2, 3).unwrap().cast();
        let s0: Matrix64 = rng.uniform(-1.0, 1.0, 2, 4).unwrap().cast();
        let (s2, _) = rhn_forward(&p, &x, &s0, None).unwrap();

        let mut first = p.zeros_like();
        first.depth = 1;
        first.input_w = p.input_w.clone();
        first.rec_w = vec![p.rec_w[0].clone()];
        first.bias = vec![p.bias[0].clone()];
        let (s1, _) = rhn_forward(&first, &x, &s0, None).unwrap();
        // second level sees no input
        let mut second = first.clone();
        second.input_w.iter_mut().for_each(|m| m.fill(0.0));
        second.rec_w = vec![p.rec_w[1].clone()];
        second.bias = vec![p.bias[1].clone()];
        let (s2b, _) = rhn_forward(&second, &x, &s1, None).unwrap();
        assert!(s2.max_abs_diff(&s2b).unwrap() < 1e-12);
    }

    #[test]
    fn zero_grads_and_scalar_chain_rule() {
        let mut rng = Rng::new(12);
        let p = random_rhn(&mut rng, 1, 1, 1, false);
        let (x, sp) = (0.3, -0.4);
        let (_, cache) = rhn_forward(&p, &Matrix64::filled(1, 1, x), &Matrix64::filled(1, 1, sp), None).unwrap();
        let z = rhn_backward(&p, std::slice::from_ref(&cache), &[Matrix64::zeros(1, 1)]).unwrap();
        assert_eq!(z.params.rec_w[0][0].max_abs(), 0.0);
        assert_eq!(z.input_grads[0].max_abs(), 0.0);

        let g = rhn_backward(&p, &[cache], &[Matrix64::filled(1, 1, 1.0)]).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let pre = |j: usize| x * p.input_w[j].get(0, 0) + sp * p.rec_w[0][j].get(0, 0) + p.bias[0][j].get(0, 0);
        let (h, t, c) = (pre(0).tanh(), sig(pre(1)), sig(pre(2)));
        let dz = [t * (1.0 - h * h), h * t * (1.0 - t), sp * c * (1.0 - c)];
        for j in 0..3 {
            assert!((g.params.bias[0][j].get(0, 0) - dz[j]).abs() < 1e-6);
            assert!((g.params.input_w[j].get(0, 0) - x * dz[j]).abs() < 1e-6);
            assert!((g.params.rec_w[0][j].get(0, 0) - sp * dz[j]).abs() < 1e-6);
        }
        let dx: f64 = (0..3).map(|j| dz[j] * p.input_w[j].get(0, 0)).sum();
        assert!((g.input_grads[0].get(0, 0) - dx).abs() < 1e-6);
    }

    #[test]
    fn shape_and_consistency_errors() {
        let p = RhnLayerParams::<f64>::zeros(2, 3, 1, true).unwrap();
        assert!(rhn_forward(&p, &Matrix64::zeros(1, 2), &Matrix64::zeros(1, 2), None).is_err());
        let (_, cache) = rhn_forward(&p, &Matrix64::zeros(1, 2), &Matrix64::zeros(1, 3), None).unwrap();
        assert!(matches!(rhn_backward(&p, &[cache], &[]), Err(Error::Consistency(_))));
        assert!(RhnLayerParams::<f64>::zeros(2, 3, 0, true).is_err());
    }
}
