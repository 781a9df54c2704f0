//! Minimal reverse-mode tensor engine.
//!
//! Everything is a 4-axis NCHW tensor. The [`Graph`] is an eager tape: every
//! op computes its value immediately and records what it needs for the
//! reverse pass. Only the layers required by the codec networks exist:
//! strided 2D convolution and its transpose, batch normalization, PReLU,
//! power normalization of channel symbols and a Gaussian negative
//! log-likelihood loss.

pub mod checkpoint;
pub mod conv;
mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod real;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Graph, PowerMode, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
