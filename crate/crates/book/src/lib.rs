//! Compiles and runs every code listing in the guide under `book/src`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/counterfactuals.md")]
pub mod counterfactuals {}

#[doc = include_str!("../../../book/src/distillation.md")]
pub mod distillation {}

#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}

#[doc = include_str!("../../../book/src/fisher.md")]
pub mod fisher {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[doc = include_str!("../../../book/src/results.md")]
pub mod results {}
