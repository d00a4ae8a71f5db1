//! Federated semantic coreset selection.
//!
//! Clients score their samples in a shared vision-language embedding space,
//! upload per-class score statistics, receive a global policy and prune
//! anomalies and redundant samples locally. The [`federation`] module
//! simulates the whole exchange on synthetic long-tailed data.

pub mod aggregate;
pub mod error;
pub mod federation;
pub mod geometry;
pub mod io;
pub mod profile;
pub mod scoring;
pub mod select;
mod wire;

pub use error::{Result, ScopeError};
