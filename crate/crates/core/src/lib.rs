//! Inversion-jeopardizing cloaks for face images and the machinery to
//! evaluate them: desk-scale GANs and encoders, optimization-based and
//! hybrid GAN inversion, five cloak searches, utility and identity
//! metrics, baseline distortions, adaptive adversaries and latent editing.

pub mod adversaries;
pub mod cloaks;
pub mod dataset;
pub mod distortions;
mod error;
pub mod image;
pub mod inversion;
pub mod latent;
pub mod latent_edit;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod report;
pub mod rng;
pub mod zoo;

pub use error::{Error, Result};
pub use image::{ImageShape, ImageTensor};
pub use latent::{sample_latent, LatentCode, LatentPrior, LatentSpec};
