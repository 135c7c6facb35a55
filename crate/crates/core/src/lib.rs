pub mod body_model;
pub mod config;
pub mod container;
pub mod dataset_io;
pub mod deformation;
pub mod drm;
pub mod error;
pub mod gaussian_cloud;
pub mod losses;
pub mod math;
pub mod pipeline;
pub mod rasterizer;
pub mod trainer;

pub use error::{Error, Result};
