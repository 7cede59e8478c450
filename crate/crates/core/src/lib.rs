//! Differentiable Gaussian-splat reconstruction from splatter images.
//!
//! The crate is organised bottom-up: [`camera`], [`rotation`], [`image`] and
//! [`gaussian`] hold the shared geometry and data types; [`rasterizer`]
//! renders Gaussians differentiably; [`splatter`] decodes pixel-aligned raw
//! parameter grids into Gaussians; [`roi`] builds the face-centred virtual
//! camera; [`losses`] and [`training`] implement the fitting objective and
//! loop; [`synthgen`] produces procedural multi-view data with an
//! independent ray tracer; [`eval`] measures the results.

pub mod camera;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod image;
pub mod losses;
pub mod gradcheck;
pub mod rasterizer;
pub mod roi;
pub mod rotation;
pub mod splatter;
pub mod synthgen;
pub mod training;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussian::{Gaussian3D, GaussianGrad, GaussianSet};
pub use image::Image;
