//! One-shot animatable Gaussian heads.
//!
//! A head is reconstructed once from per-image features and a labelled
//! mesh prior (a dense lifted sheet plus mesh-anchored mouth/eye primitives),
//! then animated per audio frame by two deformation fields and rendered
//! through a differentiable tile splatter into a feature image that a small
//! learned decoder maps to RGB.

pub mod encoding;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod io;
pub mod motion;
pub mod nn;
pub mod objectives;
pub mod raster;
pub mod recon;
pub mod trainer;

pub use error::{Error, Result};
pub use gaussian::{
    build_covariance, evaluate_gaussian, merge_clouds, project_gaussian, quat_to_rotmat, Branch,
    CameraPose, GaussianCloud, GaussianPrimitive, ProjectedGaussian,
};
