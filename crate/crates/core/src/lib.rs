//! Multi-rate hierarchical latent memories fed by gated sparse event
//! attention, with a deterministic multi-rate scheduler, a parallel executor,
//! an exact MAC cost model and finite-difference gradient verification.

pub mod error;
pub mod esca;
pub mod gradcheck;
pub mod wmca;
pub mod events;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod scheduler;
pub mod train;

pub use error::{Error, Result};
