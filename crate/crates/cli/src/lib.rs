//! Headless harness for the co-design engine: synthetic-user simulation,
//! log replay and report emission.

pub mod report;
pub mod sim;
pub mod stats;
