//! Texture synthesis for indoor scene meshes: an implicit UV texture field
//! optimized by score distillation from a depth- and reference-conditioned
//! denoiser, with an optional super-resolution prior.

pub mod autodiff;
pub mod conditioning;
pub mod distillation;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod image_io;
pub mod params;
pub mod raster;
pub mod rng;
pub mod score_models;
pub mod tensor;
pub mod texture_field;

pub use error::{Error, Result};
pub use geometry::{Camera, Mesh, Scene};
pub use raster::{GBuffer, Mask};
pub use tensor::Tensor;
pub use texture_field::{HashGridConfig, TextureField};
