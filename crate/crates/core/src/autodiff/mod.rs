//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The primitive set is exactly what the autoencoder, the sequence
//! propagator, and the decomposed loss need. Gradients are accumulated on a
//! per-run [`Tape`]; every primitive has a hand-written backward rule that is
//! verified against central finite differences in the test suite.

mod nn;
mod tape;
mod tensor;

pub use nn::{dot_attention, lstm_cell, LstmParamVars};
pub use tape::{Tape, Var, SQRT_EPS};
pub use tensor::Tensor;

/// Named, trainable tensor owned by a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            trainable: true,
        }
    }
}
