//! Two-scale chromosome classification with a differentiable zoom.
//!
//! The pipeline has three stages. Stage 1 trains a global-scale network
//! (G-Net) on whole 256x256 chromosome images and a local-scale network
//! (L-Net) on 128x128 regions selected by a localization subnet — the
//! "varifocal" zoom. Stage 2 trains MLP classifiers on the concatenated
//! pooled features of both scales. Stage 3 assigns each chromosome within a
//! patient case to a karyotype slot, capacity-aware and confidence-gated,
//! and emits numerical-abnormality warnings.
//!
//! Everything is built from scratch on a small tape-based autodiff engine:
//! see [`tensor`], [`graph`] and [`ops`] for the numeric core, [`backbone`]
//! and [`zoom`] for the networks, [`trainer`] for the four-step optimization
//! schedule, and [`dispatch`]/[`metrics`] for the clinical-side logic.
//!
//! The `book/` directory of the repository walks through the same concepts
//! chapter by chapter; its code snippets compile as doc-tests via [`guide`].

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod dispatch;
pub mod error;
pub mod graph;
pub mod guide;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod zoom;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};
