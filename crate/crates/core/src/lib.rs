//! Training-free CT reconstruction at desk scale.
//!
//! The crate provides a matrix-free parallel-beam projector with an exact
//! adjoint, steepest-descent MBIR, a small reverse-mode autodiff engine, an
//! untrained U-net, and the residual-back-projection reconstruction loop
//! that ties them together, plus phantom/noise simulation and metrics.

pub mod autodiff;
mod error;
mod image;
pub mod mbir;
pub mod metrics;
pub mod projection;
pub mod rbpdip;
mod recon;
pub mod simulate;
pub mod unet;

pub use error::{Error, Result};
pub use image::Image;
pub use projection::{ParallelGeometry, Sinogram};
pub use recon::{IterRecord, ReconRun};
