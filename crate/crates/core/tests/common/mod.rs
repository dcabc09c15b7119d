//! Checks shared by the dedicated test targets and the acceptance suite.
#![allow(dead_code)]

pub mod grad;
pub mod numeric;
pub mod oracles;
