//! ISS weight groups: construction for LSTM stacks and RHNs, norms, and
//! zero-group detection.

mod build;
mod group;
mod norm;

pub use build::{build_lstm_iss_groups, build_rhn_iss_groups, LstmOwnerSpec, LstmTopology, ReceiverSpec, RhnTopology};
pub use group::{
    Axis, GroupDoc, GroupMapDoc, IssGroup, IssGroupMap, IssLayer, LayerDoc, MemberDoc, OverlapPolicy, Slice,
    TensorInfo, WeightCoord,
};
pub use norm::{
    detect_zero_groups, group_is_zero, group_norm, group_norms, removed_lines, Histogram, LayerSparsity,
    SparsityReport, TensorCount, HISTOGRAM_BINS,
};

/// ε used in the safe group norm unless configured otherwise.
pub const DEFAULT_EPSILON: f64 = 1e-8;
