//! The narrative guide, compiled from the `book/` chapters.
//!
//! Each module below embeds one chapter of the mdbook source, so every code
//! snippet in the book runs as a doc-test and cannot drift from the crate.

#[doc = include_str!("../../../book/src/tensors-and-autodiff.md")]
pub mod tensors_and_autodiff {}

#[doc = include_str!("../../../book/src/network-layers.md")]
pub mod network_layers {}

#[doc = include_str!("../../../book/src/zoom-mechanism.md")]
pub mod zoom_mechanism {}

#[doc = include_str!("../../../book/src/losses-and-training.md")]
pub mod losses_and_training {}

#[doc = include_str!("../../../book/src/dispatch-and-metrics.md")]
pub mod dispatch_and_metrics {}
