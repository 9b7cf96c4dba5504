use crate::error::{Error, Result};
use crate::iss::{group_norm, IssGroupMap, SparsityReport, WeightCoord};
use crate::model::TensorStore;
use crate::numerics::{Mat, Real};

/// `Σ_n Σ_k sqrt(ε + ‖w_k^(n)‖²)` over every group of `map`.
pub fn group_lasso_penalty<T: Real, S: TensorStore<T> + ?Sized>(store: &S, map: &IssGroupMap, epsilon: f64) -> Result<f64> {
    let bound = map.bind(store)?;
    Ok(map.groups().map(|g| group_norm(map, g, &bound, epsilon)).sum())
}

/// Pairs each weight tensor with its gradient and its index in `map`.
fn pair_up<'a, T: Real, S: TensorStore<T>>(
    weights: &'a mut S,
    grads: &'a S,
    map: &IssGroupMap,
) -> Result<Vec<(String, &'a mut Mat<T>, &'a Mat<T>, Option<usize>)>> {
    let ws = weights.tensors_mut();
    let gs = grads.tensors();
    if ws.len() != gs.len() {
        return Err(Error::Consistency(format!("{} weight tensors but {} gradients", ws.len(), gs.len())));
    }
    ws.into_iter()
        .zip(gs)
        .map(|((name, w), (gname, g))| {
            if name != gname || w.shape() != g.shape() {
                return Err(Error::Consistency(format!("gradient {gname} does not match weight {name}")));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in tensor {name}")));
            }
            let idx = map.tensor_index(&name);
            Ok((name, w, g, idx))
        })
        .collect()
}

/// Regularization gradient `λ · w / sqrt(ε + ‖w_g‖²)` for every member,
/// summed over groups, in map tensor order.
fn group_lasso_grad<T: Real, S: TensorStore<T>>(
    store: &S,
    map: &IssGroupMap,
    lambda: f64,
    epsilon: f64,
) -> Result<Vec<Vec<f64>>> {
    let bound = map.bind(store)?;
    let mut reg: Vec<Vec<f64>> = map.tensors().iter().map(|t| vec![0.0; t.rows * t.cols]).collect();
    if lambda == 0.0 {
        return Ok(reg);
    }
    for g in map.groups() {
        let norm = group_norm(map, g, &bound, epsilon);
        if norm == 0.0 {
            continue;
        }
        let k = lambda / norm;
        map.for_each_coord(g, |c| {
            let cols = map.tensors()[c.tensor].cols;
            let w = bound[c.tensor].get(c.row, c.col).to_f64().unwrap_or(f64::NAN);
            reg[c.tensor][c.row * cols + c.col] += k * w;
        });
    }
    Ok(reg)
}

/// `w ← w − η (∂E/∂w + λ·w/‖w_g‖)` for group members, plain SGD for every
/// other tensor entry. The regularization term uses the weights as they
/// were before this step.
pub fn sgd_step_group_lasso<T: Real, S: TensorStore<T>>(
    weights: &mut S,
    grads: &S,
    map: &IssGroupMap,
    eta: f64,
    lambda: f64,
    epsilon: f64,
) -> Result<()> {
    if !(eta > 0.0) || !(lambda >= 0.0) || !(epsilon >= 0.0) {
        return Err(Error::Parameter(format!("need η > 0, λ ≥ 0, ε ≥ 0 (got {eta}, {lambda}, {epsilon})")));
    }
    let reg = group_lasso_grad(weights, map, lambda, epsilon)?;
    let eta_t = T::lit(eta);
    for (_, w, g, idx) in pair_up(weights, grads, map)? {
        match idx {
            Some(i) if lambda > 0.0 => {
                for ((wv, &gv), &r) in w.data_mut().iter_mut().zip(g.data()).zip(&reg[i]) {
                    *wv = *wv - eta_t * (gv + T::lit(r));
                }
            }
            _ => {
                for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
                    *wv = *wv - eta_t * gv;
                }
            }
        }
    }
    Ok(())
}

/// `w ← w − η (∂E/∂w + decay · sign(w))` on group members (`sign(0) = 0`),
/// plain SGD elsewhere.
pub fn sgd_step_l1<T: Real, S: TensorStore<T>>(
    weights: &mut S,
    grads: &S,
    map: &IssGroupMap,
    eta: f64,
    l1_decay: f64,
) -> Result<()> {
    if !(eta > 0.0) || !(l1_decay >= 0.0) {
        return Err(Error::Parameter(format!("need η > 0 and decay ≥ 0 (got {eta}, {l1_decay})")));
    }
    let masks = map.member_mask();
    let (eta_t, decay) = (T::lit(eta), T::lit(l1_decay));
    for (_, w, g, idx) in pair_up(weights, grads, map)? {
        let mask = idx.map(|i| &masks[i]);
        for (j, (wv, &gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
            let sign = if *wv > T::zero() {
                T::one()
            } else if *wv < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            let member = mask.is_some_and(|m| m[j]);
            let step = if member { gv + decay * sign } else { gv };
            *wv = *wv - eta_t * step;
        }
    }
    Ok(())
}

/// Sets every group-member weight with `|w| < τ` to exactly zero; returns
/// how many nonzero weights were cleared. Non-members are untouched.
pub fn threshold_weights<T: Real, S: TensorStore<T> + ?Sized>(store: &mut S, map: &IssGroupMap, tau: f64) -> Result<usize> {
    if !(tau >= 0.0) {
        return Err(Error::Parameter(format!("threshold must be ≥ 0, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(0);
    }
    let masks = map.member_mask();
    let tau_t = T::lit(tau);
    let mut cleared = 0;
    for (i, w) in map.bind_mut(store)?.into_iter().enumerate() {
        for (v, &m) in w.data_mut().iter_mut().zip(&masks[i]) {
            if m && *v != T::zero() && v.abs() < tau_t {
                *v = T::zero();
                cleared += 1;
            }
        }
    }
    Ok(cleared)
}

/// Member coordinates of every group `report` lists as zero.
pub fn zero_group_coords(map: &IssGroupMap, report: &SparsityReport) -> Vec<WeightCoord> {
    let mut out = Vec::new();
    for (l, layer) in report.layers.iter().enumerate() {
        for &k in &layer.zero_components {
            if let Some(g) = map.group(l, k) {
                map.for_each_coord(g, |c| out.push(c));
            }
        }
    }
    out
}

/// Writes zero at every coordinate in `coords`.
pub fn hold_at_zero<T: Real, S: TensorStore<T> + ?Sized>(
    store: &mut S,
    map: &IssGroupMap,
    coords: &[WeightCoord],
) -> Result<()> {
    if coords.is_empty() {
        return Ok(());
    }
    let mut bound = map.bind_mut(store)?;
    for c in coords {
        bound[c.tensor].set(c.row, c.col, T::zero());
    }
    Ok(())
}

/// Scales gradients so their global ℓ2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real, S: TensorStore<T>>(grads: &mut S, max_norm: f64) -> f64 {
    let norm = grads.tensors().iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = T::lit(max_norm / norm);
        for (_, g) in grads.tensors_mut() {
            g.scale(k);
        }
    }
    norm
}
