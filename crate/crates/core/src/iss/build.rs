use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rnn::{Gate, Transform};

use super::group::{Axis, IssGroup, IssGroupMap, IssLayer, OverlapPolicy, Slice, TensorInfo};

/// A layer consuming an owner's hidden state: component `k` is read by row
/// `row_offset + k` of `tensor`, whose full width joins the group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiverSpec {
    pub tensor: String,
    pub row_offset: usize,
}

/// An LSTM layer whose hidden components define ISS groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmOwnerSpec {
    pub name: String,
    /// Combined `(input + hidden) x 4·hidden` weight, gate blocks `f, i, u, o`.
    pub weight: String,
    /// `1 x 4·hidden` bias, removed with the component but not a member.
    pub bias: Option<String>,
    pub input_size: usize,
    pub hidden_size: usize,
    pub receivers: Vec<ReceiverSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmTopology {
    pub tensors: Vec<TensorInfo>,
    pub owners: Vec<LstmOwnerSpec>,
}

impl LstmTopology {
    /// Embedding → stacked LSTMs → softmax, with the tensor names used by
    /// [`crate::model::LstmLm`]. Each layer's receiver is the next layer's
    /// input rows, the top layer's is the softmax weight.
    pub fn stacked_lm(embed: usize, hidden: &[usize], vocab: usize) -> Self {
        let mut tensors = vec![TensorInfo::new("embedding", vocab, embed)];
        let mut owners = Vec::with_capacity(hidden.len());
        let mut below = embed;
        for (n, &h) in hidden.iter().enumerate() {
            tensors.push(TensorInfo::new(format!("lstm.{n}.weight"), below + h, 4 * h));
            tensors.push(TensorInfo::new(format!("lstm.{n}.bias"), 1, 4 * h));
            let receiver = if n + 1 < hidden.len() { format!("lstm.{}.weight", n + 1) } else { "softmax.weight".into() };
            owners.push(LstmOwnerSpec {
                name: format!("lstm.{n}"),
                weight: format!("lstm.{n}.weight"),
                bias: Some(format!("lstm.{n}.bias")),
                input_size: below,
                hidden_size: h,
                receivers: vec![ReceiverSpec { tensor: receiver, row_offset: 0 }],
            });
            below = h;
        }
        tensors.push(TensorInfo::new("softmax.weight", below, vocab));
        tensors.push(TensorInfo::new("softmax.bias", 1, vocab));
        Self { tensors, owners }
    }
}

fn find(tensors: &[TensorInfo], name: &str, what: &str) -> Result<usize> {
    tensors
        .iter()
        .position(|t| t.name == name)
        .ok_or_else(|| Error::Topology(format!("{what} references missing tensor {name}")))
}

/// One group per hidden component of every owner: the four gate columns and
/// the recurrent row of the owner's weight, plus one row per receiver.
pub fn build_lstm_iss_groups(topology: &LstmTopology, policy: OverlapPolicy) -> Result<IssGroupMap> {
    let tensors = &topology.tensors;
    let mut layers = Vec::with_capacity(topology.owners.len());
    for (n, owner) in topology.owners.iter().enumerate() {
        let (ni, nh) = (owner.input_size, owner.hidden_size);
        if nh == 0 {
            return Err(Error::Topology(format!("{} has hidden size 0", owner.name)));
        }
        let w = find(tensors, &owner.weight, &owner.name)?;
        if (tensors[w].rows, tensors[w].cols) != (ni + nh, 4 * nh) {
            return Err(Error::Topology(format!(
                "{} weight is {}x{}, expected {}x{}",
                owner.name,
                tensors[w].rows,
                tensors[w].cols,
                ni + nh,
                4 * nh
            )));
        }
        let bias = match &owner.bias {
            Some(b) => {
                let b = find(tensors, b, &owner.name)?;
                if (tensors[b].rows, tensors[b].cols) != (1, 4 * nh) {
                    return Err(Error::Topology(format!("{} bias must be 1x{}", owner.name, 4 * nh)));
                }
                Some(b)
            }
            None => None,
        };
        let mut receivers = Vec::with_capacity(owner.receivers.len());
        for r in &owner.receivers {
            let t = find(tensors, &r.tensor, &format!("receiver of {}", owner.name))?;
            if r.row_offset + nh > tensors[t].rows {
                return Err(Error::Topology(format!(
                    "receiver {} has {} rows, cannot consume rows {}..{}",
                    r.tensor,
                    tensors[t].rows,
                    r.row_offset,
                    r.row_offset + nh
                )));
            }
            receivers.push((t, r.row_offset));
        }
        let groups = (0..nh)
            .map(|k| {
                let mut slices: Vec<Slice> =
                    Gate::ALL.iter().map(|g| Slice { tensor: w, axis: Axis::Col, index: g.column(nh, k) }).collect();
                slices.push(Slice { tensor: w, axis: Axis::Row, index: ni + k });
                slices.extend(receivers.iter().map(|&(t, off)| Slice { tensor: t, axis: Axis::Row, index: off + k }));
                let companions = bias
                    .map(|b| Gate::ALL.iter().map(|g| Slice { tensor: b, axis: Axis::Col, index: g.column(nh, k) }).collect())
                    .unwrap_or_default();
                IssGroup { layer: n, component: k, slices, companions }
            })
            .collect();
        layers.push(IssLayer { name: owner.name.clone(), groups });
    }
    IssGroupMap::new(policy, tensors.clone(), layers)
}

/// Sizes of a single-layer RHN language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhnTopology {
    pub embed: usize,
    pub width: usize,
    pub depth: usize,
    pub vocab: usize,
    /// Carry gate tied to `1 − t`, leaving only `H` and `T` parameters.
    pub coupled: bool,
    /// Output layer shares the embedding matrix.
    pub tied: bool,
}

impl RhnTopology {
    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        let names: Vec<&str> = Transform::active(self.coupled).iter().map(|t| t.name()).collect();
        let mut v = vec![TensorInfo::new("embedding", self.vocab, self.embed)];
        v.extend(names.iter().map(|n| TensorInfo::new(format!("rhn.input.{n}"), self.embed, self.width)));
        for l in 0..self.depth {
            v.extend(names.iter().map(|n| TensorInfo::new(format!("rhn.{l}.rec.{n}"), self.width, self.width)));
        }
        for l in 0..self.depth {
            v.extend(names.iter().map(|n| TensorInfo::new(format!("rhn.{l}.bias.{n}"), 1, self.width)));
        }
        if !self.tied {
            v.push(TensorInfo::new("softmax.weight", self.width, self.vocab));
        }
        v.push(TensorInfo::new("softmax.bias", 1, self.vocab));
        v
    }
}

/// One group per RHN unit `k`: column `k` of every input transform, row and
/// column `k` of every recurrent transform at every depth, and the output
/// row `k`. With a tied output the shared embedding's column `k` is the
/// output slice and, since it is also the input feature `k`, row `k` of each
/// input transform joins as well.
pub fn build_rhn_iss_groups(topology: &RhnTopology, policy: OverlapPolicy) -> Result<IssGroupMap> {
    let RhnTopology { embed, width, depth, vocab, coupled, tied } = *topology;
    if width == 0 || depth == 0 || embed == 0 || vocab == 0 {
        return Err(Error::Topology("RHN width, depth, embedding and vocabulary must be positive".into()));
    }
    if tied && embed != width {
        return Err(Error::Topology(format!("tied output needs embedding width {embed} == RHN width {width}")));
    }
    let tensors = topology.tensor_infos();
    let nt = Transform::active(coupled).len();
    let input = |j: usize| 1 + j;
    let rec = |l: usize, j: usize| 1 + nt + l * nt + j;
    let bias = |l: usize, j: usize| 1 + nt + depth * nt + l * nt + j;
    let softmax = 1 + nt + 2 * depth * nt;
    let groups = (0..width)
        .map(|k| {
            let mut slices = Vec::new();
            for j in 0..nt {
                slices.push(Slice { tensor: input(j), axis: Axis::Col, index: k });
                if tied {
                    slices.push(Slice { tensor: input(j), axis: Axis::Row, index: k });
                }
            }
            for l in 0..depth {
                for j in 0..nt {
                    slices.push(Slice { tensor: rec(l, j), axis: Axis::Row, index: k });
                    slices.push(Slice { tensor: rec(l, j), axis: Axis::Col, index: k });
                }
            }
            if tied {
                slices.push(Slice { tensor: 0, axis: Axis::Col, index: k });
            } else {
                slices.push(Slice { tensor: softmax, axis: Axis::Row, index: k });
            }
            let companions =
                (0..depth).flat_map(|l| (0..nt).map(move |j| Slice { tensor: bias(l, j), axis: Axis::Col, index: k })).collect();
            IssGroup { layer: 0, component: k, slices, companions }
        })
        .collect();
    IssGroupMap::new(policy, tensors, vec![IssLayer { name: "rhn".into(), groups }])
}
