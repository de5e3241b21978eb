//! Minimal reverse-mode tensor engine and the layers the model needs.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{accumulate, Graph, ParamGrads, ParamId, ParamStore};
pub use tape::{log_softmax_at, softmax_in_place, Grads, Tape, Var};
pub use tensor::{Real, Tensor};
