//! Desk-scale simulator for private personal tasks: federated training of
//! small models versus local in-context learning with a frozen foundation
//! model, with a systems cost model and an information-flow ledger.
//!
//! Everything is seeded and deterministic: re-running a configuration
//! reproduces metrics, ledgers, and cost tallies byte for byte.

pub mod config;
pub mod cost;
pub mod domain;
pub mod error;
pub mod fl;
pub mod fm;
pub mod icl;
pub mod ledger;
pub mod partition;
pub mod promptopt;
pub mod rng;
pub mod runner;
pub mod stats;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
