//! Dense RGB-D SLAM on differentiable 2D Gaussian surfels.
//!
//! The crate is organised bottom-up: [`geom`] holds poses, intrinsics and the
//! surfel type; [`render`] splats surfels with exact ray-plane intersections
//! and differentiates the result; [`track`] and [`mapper`] optimize poses and
//! surfels against RGB-D frames; [`pipeline`] runs the local-map front-end and
//! the submap back-end; [`eval`] covers datasets, synthetic scenes and metrics.

pub mod adam;
pub mod config;
pub mod error;
pub mod eval;
pub mod frame;
pub mod geom;
pub mod image;
pub mod mapfile;
pub mod mapper;
pub mod pipeline;
pub mod render;
pub mod track;

pub use error::{Error, Result};
pub use frame::{ExposureParams, Frame};
pub use geom::{compose, pixel_ray, transform_surfel, unproject, Intrinsics, Pose, Surfel, SurfelMap};
