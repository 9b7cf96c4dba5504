use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::TensorStore;
use crate::numerics::{Mat, Real};

use super::group::{Axis, IssGroup, IssGroupMap, OverlapPolicy, Slice};

pub const HISTOGRAM_BINS: usize = 20;

/// `sqrt(ε + Σ w²)` over the group's members. `tensors` is bound in map
/// order (see [`IssGroupMap::bind`]).
pub fn group_norm<T: Real>(map: &IssGroupMap, group: &IssGroup, tensors: &[&Mat<T>], epsilon: f64) -> f64 {
    let mut sum = 0.0;
    map.for_each_coord(group, |c| {
        let v = tensors[c.tensor].get(c.row, c.col).to_f64().unwrap_or(f64::NAN);
        sum += v * v;
    });
    (epsilon + sum).sqrt()
}

/// Norms of every group, `[layer][component]`.
pub fn group_norms<T: Real>(map: &IssGroupMap, tensors: &[&Mat<T>], epsilon: f64) -> Vec<Vec<f64>> {
    map.layers().iter().map(|l| l.groups.iter().map(|g| group_norm(map, g, tensors, epsilon)).collect()).collect()
}

fn slice_all<T: Real>(s: &Slice, m: &Mat<T>, pred: impl Fn(T) -> bool) -> bool {
    match s.axis {
        Axis::Row => m.row(s.index).iter().all(|&v| pred(v)),
        Axis::Col => (0..m.rows()).all(|r| pred(m.get(r, s.index))),
    }
}

/// True when every member weight satisfies `|w| ≤ zero_tol`.
pub fn group_is_zero<T: Real>(group: &IssGroup, tensors: &[&Mat<T>], zero_tol: f64) -> bool {
    let tol = T::lit(zero_tol);
    group.slices.iter().all(|s| slice_all(s, tensors[s.tensor], |v| v.abs() <= tol))
}

/// Rows and columns of each map tensor that disappear when `dropped` groups
/// are excised, companions included.
pub fn removed_lines<'a>(
    map: &IssGroupMap,
    dropped: impl IntoIterator<Item = &'a IssGroup>,
) -> Vec<(BTreeSet<usize>, BTreeSet<usize>)> {
    let mut out = vec![(BTreeSet::new(), BTreeSet::new()); map.tensors().len()];
    for g in dropped {
        for s in g.slices.iter().chain(&g.companions) {
            match s.axis {
                Axis::Row => out[s.tensor].0.insert(s.index),
                Axis::Col => out[s.tensor].1.insert(s.index),
            };
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub total: usize,
    pub zero: usize,
    pub surviving: usize,
    pub zero_components: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorCount {
    pub name: String,
    pub before: usize,
    /// Entries left once every zero group is excised.
    pub after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending bin edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: &[f64], bins: usize) -> Self {
        let max = values.iter().copied().fold(0.0, f64::max);
        let hi = if max > 0.0 { max } else { 1.0 };
        let edges: Vec<f64> = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v / hi) * bins as f64).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub policy: OverlapPolicy,
    pub zero_tol: f64,
    pub layers: Vec<LayerSparsity>,
    pub tensors: Vec<TensorCount>,
    /// Group norms (ε = 0), `[layer][component]`.
    pub norms: Vec<Vec<f64>>,
    pub histogram: Histogram,
}

impl SparsityReport {
    pub fn zero_groups(&self) -> usize {
        self.layers.iter().map(|l| l.zero).sum()
    }

    pub fn total_groups(&self) -> usize {
        self.layers.iter().map(|l| l.total).sum()
    }

    pub fn zero_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.zero).collect()
    }
}

/// Marks groups whose members all satisfy `|w| ≤ zero_tol` and summarizes
/// what compaction would leave.
pub fn detect_zero_groups<T: Real, S: TensorStore<T> + ?Sized>(
    store: &S,
    map: &IssGroupMap,
    zero_tol: f64,
) -> Result<SparsityReport> {
    let bound = map.bind(store)?;
    let mut layers = Vec::with_capacity(map.num_layers());
    let mut dropped = Vec::new();
    for l in map.layers() {
        let zero_components: Vec<usize> =
            l.groups.iter().filter(|g| group_is_zero(g, &bound, zero_tol)).map(|g| g.component).collect();
        dropped.extend(zero_components.iter().map(|&k| &l.groups[k]));
        layers.push(LayerSparsity {
            name: l.name.clone(),
            total: l.groups.len(),
            zero: zero_components.len(),
            surviving: l.groups.len() - zero_components.len(),
            zero_components,
        });
    }
    let lines = removed_lines(map, dropped);
    let tensors = map
        .tensors()
        .iter()
        .zip(&lines)
        .map(|(t, (r, c))| TensorCount {
            name: t.name.clone(),
            before: t.rows * t.cols,
            after: (t.rows - r.len()) * (t.cols - c.len()),
        })
        .collect();
    let norms = group_norms(map, &bound, 0.0);
    let flat: Vec<f64> = norms.iter().flatten().copied().collect();
    Ok(SparsityReport {
        policy: map.policy(),
        zero_tol,
        layers,
        tensors,
        histogram: Histogram::of(&flat, HISTOGRAM_BINS),
        norms,
    })
}
