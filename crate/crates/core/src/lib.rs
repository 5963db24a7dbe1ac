//! Batch voting mechanisms for allocating a single object of unknown
//! quality to a queue of privately informed, strategic agents.
//!
//! The crate evaluates the sequential-offering benchmark and the greedy
//! multi-batch voting mechanism exactly (closed forms and a dynamic
//! program over vote outcomes) and checks both against exhaustive
//! enumeration and seeded Monte Carlo.

pub mod binom;
pub mod error;
pub mod greedy;
pub mod ic;
pub mod model;
pub mod oracle;
pub mod seqmech;
pub mod sweep;
pub mod verify;

pub use error::{Error, Result};
pub use model::*;
