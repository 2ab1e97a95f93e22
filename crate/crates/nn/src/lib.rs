//! Minimal CPU network toolkit: convolution, group normalization, dense and
//! cross-attention layers with hand-written backward passes, an
//! encoder-decoder denoiser built from them, and an AdamW optimizer.
//!
//! Parameters live in one flat vector addressed through [`Slot`]s so that
//! optimizers, moving averages and checkpoints operate on plain slices.

mod act;
pub mod layers;
pub mod optim;
mod params;
mod real;
pub mod unet;

pub use act::Act;
pub use params::{Init, ParamLayout, Slot};
pub use real::Real;
pub use unet::{Tape, UNet, UNetConfig};
