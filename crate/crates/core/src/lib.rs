//! Residual-bounded slice restoration with a conservative-edit evaluation
//! protocol.
//!
//! The crate is organized bottom-up: [`volume`] carries images and labels,
//! [`phantom`] and [`degrade`] produce paired clean/degraded data,
//! [`restorer`] and [`training`] hold the bounded model and its objective,
//! and [`metrics`] and [`protocol`] score restorers. [`report`] writes
//! self-verifying report bundles.

pub mod corpus;
pub mod degrade;
pub mod error;
pub mod exec;
pub mod filters;
pub mod gradcheck;
pub mod metrics;
pub mod phantom;
pub mod protocol;
pub mod report;
pub mod restorer;
pub mod stream;
pub mod training;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
pub use exec::Exec;
