//! Supervised-contrastive learning with fixed class prototypes, simulated in
//! the unconstrained-features model: embeddings are free unit vectors, and
//! the prototypes injected into every batch pin down the geometry the class
//! means converge to.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod optim;
pub mod par;

pub use error::{Error, Result};
