//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod fixtures;
pub mod grad;
pub mod oracles;
