//! Model files and CSV reports.

mod model_file;
mod reports;

pub use model_file::{
    decode_model, encode_model, load_model, load_model_file, save_model, save_model_file, validate_manifest,
    LstmTopologyDoc, Manifest, ModelFile, ReceiverDoc, RhnTopologyDoc, TensorEntry, ThresholdRecord, FORMAT_VERSION,
    GATE_ORDER,
};
pub use reports::{
    write_bench_csv, write_group_norms_csv, write_histogram_csv, write_metrics_csv, write_sparsity_csv,
    write_tensor_counts_csv,
};
