//! Many-interacting-worlds relaxation of bound states for smoothed singular
//! potentials, checked against a grid eigensolver.

pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod kde;
pub mod numerov;
pub mod potentials;
pub mod quantum;
mod serde_inf;
pub mod sum;

pub use error::{MiwError, Result};
