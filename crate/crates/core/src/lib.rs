//! Zero-shot statistical downscaling of gridded climate fields.
//!
//! A conditional denoising diffusion prior is trained on high-resolution
//! fields only. At inference time coarse inputs from any source grid are
//! coarsened onto a shared coarse grid and re-projected onto the shared fine
//! grid, and the reverse diffusion is steered towards agreement with them.

mod error;

pub mod baselines;
pub mod cf;
pub mod config;
pub mod container;
pub mod experiments;
pub mod field;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod prior;
pub mod sampler;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
pub use field::{Field, Timestamp};
pub use grid::{Grid, LatWeights, SeparableOp};
