//! Recurrent cells: forward passes, backpropagation through time and
//! finite-difference verification.

pub mod gradcheck;
pub mod lstm;
pub mod rhn;

pub use gradcheck::{check_lstm_toy, check_rhn_toy, finite_difference_check, GradCheckReport};
pub use lstm::{
    check_chain, lstm_backward, lstm_sequence_forward, lstm_step, Gate, LayerMasks, LstmGrads, LstmLayerParams, LstmState,
    SequenceOutput, StepCache, GATE_ORDER,
};
pub use rhn::{rhn_backward, rhn_forward, RhnGrads, RhnLayerParams, RhnStepCache, Transform};
