//! Intrinsic sparse structures (ISS) for recurrent networks: group-Lasso
//! learning of removable hidden components in LSTMs and recurrent highway
//! networks, compaction of the zeroed components, and a GEMM benchmark
//! comparing structured and unstructured sparsity.

pub mod bench;
pub mod compaction;
pub mod error;
pub mod io;
pub mod iss;
pub mod model;
pub mod numerics;
pub mod rnn;
pub mod train;

pub use compaction::{apply_compaction, plan_compaction, CompactionPlan};
pub use error::{Error, Result};
pub use iss::{IssGroupMap, OverlapPolicy, SparsityReport};
pub use model::{LanguageModel, LstmLm, Model, RhnLm, TensorStore};
pub use numerics::{Mat, Matrix, Matrix64, Real, Rng};
pub use rnn::{LstmLayerParams, LstmState, RhnLayerParams};

/// Shakespeare's sonnets 1–83 (public domain), about 50 KB of text.
pub const BUNDLED_CORPUS: &str = include_str!("../data/sonnets.txt");
