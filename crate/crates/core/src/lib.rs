//! Planning gradient compression for data-parallel training.

pub mod costs;
pub mod error;
pub mod optiontree;
pub mod planner;
pub mod profile;
pub mod sim;
pub mod synth;

pub use error::{Error, Result};

/// Durations are whole nanoseconds.
pub type Nanos = u64;
