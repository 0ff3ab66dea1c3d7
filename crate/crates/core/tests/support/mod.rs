//! Oracles shared by the test targets.
#![allow(dead_code)]

pub mod gradcheck;
pub mod pairs;
