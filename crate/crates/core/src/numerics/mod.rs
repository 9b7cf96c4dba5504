//! Dense storage, products, activations and the seeded generator.

mod elementwise;
mod gemm;
mod matrix;
mod rng;

pub use elementwise::{elementwise, sigmoid, Elementwise};
pub use gemm::{gemm, gemm_nt, gemm_threaded, gemm_threads, gemm_tn_acc, set_gemm_threads, BLOCK};
pub use matrix::{Mat, Matrix, Matrix64, Real};
pub use rng::Rng;
