//! Reverse-mode differentiation core.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckOptions, GradReport};
pub use layers::{Activation, EdgeList, GatHead, GruCell, Linear, Mlp};
pub use params::{Gradients, ParamId, ParameterStore};
pub use tape::{Axis, Decision, Tape, Var};
pub use tensor::{canonical_sum, Tensor};
