use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TensorStore;
use crate::numerics::{Mat, Real};

/// Shape of one named tensor referenced by a group map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl TensorInfo {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self { name: name.into(), rows, cols }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Row,
    Col,
}

/// A full row or full column of one tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slice {
    /// Index into [`IssGroupMap::tensors`].
    pub tensor: usize,
    pub axis: Axis,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WeightCoord {
    pub tensor: usize,
    pub row: usize,
    pub col: usize,
}

/// How a coordinate lying on both a member row and a member column is
/// counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPolicy {
    /// Each coordinate counted once; the group is a set.
    #[default]
    Distinct,
    /// Every member row and column counted in full, so a row/column
    /// intersection appears twice.
    PerSlice,
}

impl OverlapPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            OverlapPolicy::Distinct => "distinct",
            OverlapPolicy::PerSlice => "per_slice",
        }
    }
}

impl std::str::FromStr for OverlapPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distinct" => Ok(Self::Distinct),
            "per_slice" | "per-slice" => Ok(Self::PerSlice),
            _ => Err(Error::Parameter(format!("unknown overlap policy {s:?} (distinct | per_slice)"))),
        }
    }
}

/// All weights tied to ISS component `component` of layer `layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct IssGroup {
    pub layer: usize,
    pub component: usize,
    /// Member rows/columns: regularized, thresholded and counted.
    pub slices: Vec<Slice>,
    /// Parameters removed with the component but not regularized (biases).
    pub companions: Vec<Slice>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IssLayer {
    pub name: String,
    pub groups: Vec<IssGroup>,
}

/// ISS weight groups of every layer, addressed against a fixed tensor list.
#[derive(Debug)]
pub struct IssGroupMap {
    policy: OverlapPolicy,
    tensors: Vec<TensorInfo>,
    layers: Vec<IssLayer>,
    masks: OnceLock<Vec<Vec<bool>>>,
}

impl Clone for IssGroupMap {
    fn clone(&self) -> Self {
        Self { policy: self.policy, tensors: self.tensors.clone(), layers: self.layers.clone(), masks: OnceLock::new() }
    }
}

impl PartialEq for IssGroupMap {
    fn eq(&self, other: &Self) -> bool {
        self.policy == other.policy && self.tensors == other.tensors && self.layers == other.layers
    }
}

impl IssGroupMap {
    /// Validates slice bounds, drops repeated slices and checks group
    /// numbering.
    pub fn new(policy: OverlapPolicy, tensors: Vec<TensorInfo>, mut layers: Vec<IssLayer>) -> Result<Self> {
        let mut seen_names = HashMap::new();
        for (i, t) in tensors.iter().enumerate() {
            if t.rows == 0 || t.cols == 0 {
                return Err(Error::Topology(format!("tensor {} has an empty shape", t.name)));
            }
            if seen_names.insert(t.name.as_str(), i).is_some() {
                return Err(Error::Topology(format!("tensor {} listed twice", t.name)));
            }
        }
        for (n, layer) in layers.iter_mut().enumerate() {
            for (k, g) in layer.groups.iter_mut().enumerate() {
                if g.layer != n || g.component != k {
                    return Err(Error::Topology(format!(
                        "group ({}, {}) stored at layer {n} component {k}",
                        g.layer, g.component
                    )));
                }
                for s in g.slices.iter().chain(&g.companions) {
                    let t = tensors
                        .get(s.tensor)
                        .ok_or_else(|| Error::Topology(format!("slice references tensor #{}", s.tensor)))?;
                    let limit = match s.axis {
                        Axis::Row => t.rows,
                        Axis::Col => t.cols,
                    };
                    if s.index >= limit {
                        return Err(Error::Topology(format!(
                            "{:?} {} outside tensor {} ({}x{})",
                            s.axis, s.index, t.name, t.rows, t.cols
                        )));
                    }
                }
                dedup_in_order(&mut g.slices);
                dedup_in_order(&mut g.companions);
            }
        }
        Ok(Self { policy, tensors, layers, masks: OnceLock::new() })
    }

    pub fn policy(&self) -> OverlapPolicy {
        self.policy
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn layers(&self) -> &[IssLayer] {
        &self.layers
    }

    /// Number of layers `N`.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Component counts `K^(n)`.
    pub fn components(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.groups.len()).collect()
    }

    pub fn groups(&self) -> impl Iterator<Item = &IssGroup> {
        self.layers.iter().flat_map(|l| l.groups.iter())
    }

    pub fn group(&self, layer: usize, component: usize) -> Option<&IssGroup> {
        self.layers.get(layer)?.groups.get(component)
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    fn slice_len(&self, s: &Slice) -> usize {
        let t = &self.tensors[s.tensor];
        match s.axis {
            Axis::Row => t.cols,
            Axis::Col => t.rows,
        }
    }

    /// Number of weights in the group under the map's overlap policy.
    pub fn group_size(&self, g: &IssGroup) -> usize {
        let total: usize = g.slices.iter().map(|s| self.slice_len(s)).sum();
        match self.policy {
            OverlapPolicy::PerSlice => total,
            OverlapPolicy::Distinct => total - crossings(g),
        }
    }

    /// Visits every member coordinate; under `PerSlice` intersections are
    /// visited twice.
    pub fn for_each_coord(&self, g: &IssGroup, mut f: impl FnMut(WeightCoord)) {
        for s in &g.slices {
            let t = &self.tensors[s.tensor];
            match s.axis {
                Axis::Row => {
                    for col in 0..t.cols {
                        f(WeightCoord { tensor: s.tensor, row: s.index, col });
                    }
                }
                Axis::Col => {
                    let skip: Vec<usize> = if self.policy == OverlapPolicy::Distinct {
                        g.slices
                            .iter()
                            .filter(|o| o.tensor == s.tensor && o.axis == Axis::Row)
                            .map(|o| o.index)
                            .collect()
                    } else {
                        Vec::new()
                    };
                    for row in 0..t.rows {
                        if !skip.contains(&row) {
                            f(WeightCoord { tensor: s.tensor, row, col: s.index });
                        }
                    }
                }
            }
        }
    }

    pub fn coords(&self, g: &IssGroup) -> Vec<WeightCoord> {
        let mut v = Vec::with_capacity(self.group_size(g));
        self.for_each_coord(g, |c| v.push(c));
        v
    }

    /// Per tensor, a row-major flag for every weight that belongs to at least
    /// one group.
    pub fn member_mask(&self) -> &[Vec<bool>] {
        self.masks.get_or_init(|| {
            let mut masks: Vec<Vec<bool>> = self.tensors.iter().map(|t| vec![false; t.rows * t.cols]).collect();
            for g in self.groups() {
                for s in &g.slices {
                    let t = &self.tensors[s.tensor];
                    let m = &mut masks[s.tensor];
                    match s.axis {
                        Axis::Row => m[s.index * t.cols..(s.index + 1) * t.cols].fill(true),
                        Axis::Col => (0..t.rows).for_each(|r| m[r * t.cols + s.index] = true),
                    }
                }
            }
            masks
        })
    }

    /// Resolves the map's tensors in `store`, in map order, checking shapes.
    pub fn bind<'a, T: Real, S: TensorStore<T> + ?Sized>(&self, store: &'a S) -> Result<Vec<&'a Mat<T>>> {
        let mut by_name: HashMap<String, &'a Mat<T>> = store.tensors().into_iter().collect();
        self.tensors
            .iter()
            .map(|t| {
                let m = by_name
                    .remove(&t.name)
                    .ok_or_else(|| Error::Consistency(format!("model has no tensor {}", t.name)))?;
                check_shape(t, m)?;
                Ok(m)
            })
            .collect()
    }

    pub fn bind_mut<'a, T: Real, S: TensorStore<T> + ?Sized>(
        &self,
        store: &'a mut S,
    ) -> Result<Vec<&'a mut Mat<T>>> {
        let mut by_name: HashMap<String, &'a mut Mat<T>> = store.tensors_mut().into_iter().collect();
        self.tensors
            .iter()
            .map(|t| {
                let m = by_name
                    .remove(&t.name)
                    .ok_or_else(|| Error::Consistency(format!("model has no tensor {}", t.name)))?;
                check_shape(t, m)?;
                Ok(m)
            })
            .collect()
    }

    /// JSON document listing every group's member rows and columns per tensor.
    pub fn to_json_doc(&self) -> GroupMapDoc {
        let groups = self
            .groups()
            .map(|g| GroupDoc {
                layer: g.layer,
                layer_name: self.layers[g.layer].name.clone(),
                component: g.component,
                size: self.group_size(g),
                members: self.slice_docs(&g.slices),
                companions: self.slice_docs(&g.companions),
            })
            .collect();
        GroupMapDoc {
            policy: self.policy,
            tensors: self.tensors.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc { name: l.name.clone(), components: l.groups.len() })
                .collect(),
            groups,
        }
    }

    fn slice_docs(&self, slices: &[Slice]) -> Vec<MemberDoc> {
        let mut out: Vec<MemberDoc> = Vec::new();
        for s in slices {
            let name = &self.tensors[s.tensor].name;
            let idx = match out.iter().position(|m| &m.tensor_id == name) {
                Some(i) => i,
                None => {
                    out.push(MemberDoc { tensor_id: name.clone(), rows: vec![], cols: vec![] });
                    out.len() - 1
                }
            };
            match s.axis {
                Axis::Row => out[idx].rows.push(s.index),
                Axis::Col => out[idx].cols.push(s.index),
            }
        }
        out
    }
}

fn check_shape<T: Real>(t: &TensorInfo, m: &Mat<T>) -> Result<()> {
    if m.shape() != (t.rows, t.cols) {
        return Err(Error::Consistency(format!(
            "tensor {} is {}x{}, group map expects {}x{}",
            t.name,
            m.rows(),
            m.cols(),
            t.rows,
            t.cols
        )));
    }
    Ok(())
}

/// Row/column intersections inside one group.
fn crossings(g: &IssGroup) -> usize {
    let mut n = 0;
    for r in g.slices.iter().filter(|s| s.axis == Axis::Row) {
        n += g.slices.iter().filter(|c| c.axis == Axis::Col && c.tensor == r.tensor).count();
    }
    n
}

fn dedup_in_order(v: &mut Vec<Slice>) {
    let mut seen = std::collections::HashSet::new();
    v.retain(|s| seen.insert(*s));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberDoc {
    pub tensor_id: String,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDoc {
    pub layer: usize,
    pub layer_name: String,
    pub component: usize,
    pub size: usize,
    pub members: Vec<MemberDoc>,
    pub companions: Vec<MemberDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDoc {
    pub name: String,
    pub components: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMapDoc {
    pub policy: OverlapPolicy,
    pub tensors: Vec<TensorInfo>,
    pub layers: Vec<LayerDoc>,
    pub groups: Vec<GroupDoc>,
}
