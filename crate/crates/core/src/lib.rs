//! Neural-field image fitting with soft-mined training batches.
//!
//! A small neural field is fit to a 2D image. Each training batch is drawn by
//! a pool of Langevin walkers that drift toward high-error regions, and the
//! loss is reweighted by the inverse of the (softened) sampling density so
//! the estimator interpolates between hard mining and importance sampling.

pub mod error;
pub mod field;
pub mod image;
pub mod mining;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{Coord, EdgePdf, ImageField};
