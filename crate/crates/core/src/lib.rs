//! Sun-induced fluorescence (SIF) retrieval in the O2-A absorption band for
//! DESIS-like push-broom imaging spectrometers.
//!
//! The crate is organised bottom-up:
//!
//! - [`spectral`]: band grids, Gaussian instrument response, surface and
//!   fluorescence spectral shapes.
//! - [`forward`]: a surrogate at-sensor radiance simulator and synthetic scene
//!   generator with ground truth.
//! - [`emulator`]: the degree-4 polynomial emulator of band radiances in the
//!   output window.
//! - [`autodiff`]: a small reverse-mode automatic differentiation engine,
//!   residual MLP stacks and Adam.
//! - [`sfmnn`]: the retrieval network, its five-term loss and the training and
//!   inference procedures.
//! - [`metrics`]: validation statistics and spatial alignment utilities.

pub mod autodiff;
pub mod emulator;
mod error;
pub mod forward;
pub mod metrics;
pub mod pipeline;
pub mod sfmnn;
pub mod spectral;

pub use error::{Error, Result};
