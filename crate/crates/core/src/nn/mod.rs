//! A small sequential CNN runtime with exact reverse-mode gradients.
//!
//! Networks are immutable during inference and gradient computation: a
//! forward pass returns a [`Trace`] and [`Network::backward`] writes parameter
//! gradients into a caller-owned [`Gradients`]. Only the optimizer step and
//! running-statistics update take `&mut self`.

pub mod conv;
mod layer;
mod network;
pub mod optim;

pub use layer::{Activation, Layer, LayerKind, LayerSpec, LayerState, Param};
pub use network::{BackwardOptions, Gradients, Mode, Network, Trace};
