//! The guide's chapters as doc comments, so `cargo test` runs every code
//! listing in the book against the current library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/schedule.md")]
pub mod schedule {}
#[doc = include_str!("../../../book/src/granularities.md")]
pub mod granularities {}
#[doc = include_str!("../../../book/src/fc.md")]
pub mod fc {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/compression.md")]
pub mod compression {}
#[doc = include_str!("../../../book/src/robustness.md")]
pub mod robustness {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
