//! Space-time irradiance fields from posed RGB-D video.
//!
//! The crate learns a continuous function `F(x, t) -> (color, density)` from
//! a single RGB-D video and renders the scene from novel viewpoints at the
//! observed time steps. Geometry is supervised by the per-frame depth maps;
//! unobserved space is regularized by an empty-space penalty and a
//! static-scene prior sampled from a precomputed off-surface pool.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the `stif`
//! binary, which exposes dataset generation, training, rendering, and
//! evaluation as subcommands.

pub mod autodiff;
pub mod camera;
pub mod cli;
pub mod dataio;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod field;
pub mod losses;
pub mod render;
pub mod rng;
pub mod samplepool;
pub mod trainer;

pub use error::{Error, Result};
