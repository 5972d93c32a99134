//! Shape- and anatomy-guided conditional latent diffusion for synthetic
//! vessel-network images.
//!
//! The crate covers the whole desk-scale pipeline: procedural phantoms
//! ([`phantom`]), shape moments ([`descriptors`]), class-wise PCA
//! ([`anatomy`]), a small reverse-mode tensor layer ([`numcore`]), the
//! image autoencoder ([`autoencoder`]), the conditional latent DDPM
//! ([`diffusion`]), evaluation metrics ([`metrics`]) and the run
//! orchestration behind the `vasc` binary ([`pipeline`]).

pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod image;
pub mod phantom;
pub mod descriptors;
pub mod anatomy;
pub mod autoencoder;
pub mod diffusion;
pub mod metrics;
pub mod pipeline;
pub(crate) mod util;

pub use image::Image2D;
