//! Decentralized full-waveform inversion with learned communication.
//!
//! Agents each record one receiver's traces of shared seismic shots, compute a
//! local adjoint-state gradient and run adapt-then-combine diffusion over a
//! wireless network. The quantities they exchange pass through simulated AWGN
//! or over-the-air-computation channels, optionally via learned joint
//! source-channel codecs that exploit the receiver's own data.

pub mod atc;
pub mod channel;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod fwi;
pub mod grid;
pub mod harness;
pub mod mi;
pub mod plot;
pub mod seeds;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};
