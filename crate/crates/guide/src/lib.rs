//! The `delayed-vio` guide. Each module holds one chapter of the book in
//! `book/src`, so the code blocks there run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/lie.md")]
pub mod lie {}

#[doc = include_str!("../../../book/src/factor_graph.md")]
pub mod factor_graph {}

#[doc = include_str!("../../../book/src/marginalization.md")]
pub mod marginalization {}

#[doc = include_str!("../../../book/src/imu.md")]
pub mod imu {}

#[doc = include_str!("../../../book/src/photometric.md")]
pub mod photometric {}

#[doc = include_str!("../../../book/src/delayed.md")]
pub mod delayed {}

#[doc = include_str!("../../../book/src/initializer.md")]
pub mod initializer {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
