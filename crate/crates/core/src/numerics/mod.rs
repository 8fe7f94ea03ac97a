//! Dense `f64` tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, PlateauHalving};
pub use params::{DecayExemptions, Gradients, ParamId, ParamStore, Parameter};
pub use tape::{BlockMask, Reduction, Tape, Var};
pub use tensor::{log_softmax, softmax, softmax_rows, Tensor};
