//! A deterministic simulator of a `P`-processor distributed-memory machine and
//! communication-avoiding QR algorithms that run on it.
//!
//! Matrix data travels through simulated messages, so every algorithm is
//! checked numerically and its critical-path costs are measured from the same
//! run.

pub mod caqr;
pub mod collectives;
pub mod dense;
pub mod error;
pub mod harness;
pub mod matmul;
pub mod sim;
pub mod tsqr;

pub use error::{Error, Result};
