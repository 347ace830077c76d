//! Gaussian eigenmodels: linear PCA models of animated 3D Gaussian clouds,
//! a differentiable software splatting renderer, and the fitting,
//! deformation and regression tools built on them.

mod binio;
pub mod camera;
pub mod deform;
pub mod eigenmodel;
pub mod error;
pub mod fit;
pub mod gaussian;
pub mod image;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod refine;
pub mod regressor;
pub mod render;
pub mod synth;

pub use camera::Camera;
pub use error::{FormatError, GemError, Result};
pub use gaussian::GaussianCloud;
pub use image::ImageBuffer;
