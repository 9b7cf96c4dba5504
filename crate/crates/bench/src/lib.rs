//! Fixtures shared by the criterion benchmarks in `benches/`.

use iss_core::bench::{BenchCase, Operands};
use iss_core::numerics::Matrix;
use iss_core::rnn::{LstmLayerParams, LstmState};
use iss_core::Rng;

/// Operands for an `h = in` LSTM product at removal fraction `s`.
pub fn gemm_operands(hidden: usize, batch: usize, s: f64) -> Operands {
    Operands::generate(&BenchCase::new(hidden, hidden, batch, s)).expect("valid bench case")
}

/// One LSTM layer with `hidden` units fed `input` features, an input batch
/// and a zero state.
pub fn lstm_fixture(input: usize, hidden: usize, batch: usize) -> (LstmLayerParams, Matrix, LstmState) {
    let mut rng = Rng::new(7);
    let weight = rng.uniform(-0.1, 0.1, input + hidden, 4 * hidden).expect("shape");
    let params = LstmLayerParams::new(input, hidden, weight, Matrix::zeros(1, 4 * hidden)).expect("shape");
    let x = rng.uniform(-1.0, 1.0, batch, input).expect("shape");
    (params, x, LstmState::zeros(batch, hidden))
}
