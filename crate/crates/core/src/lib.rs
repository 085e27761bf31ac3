//! Rigid 2-D/3-D registration of an attenuation volume to a single
//! projection image.
//!
//! The crate contains the full pipeline:
//!
//! * [`geometry`]: the 6-parameter pose, the point-source projection model
//!   and bounding-box utilities.
//! * [`volume`]: voxel storage, trilinear sampling, phantoms and file I/O.
//! * [`drr`]: ray-casting renderer for digitally reconstructed radiographs.
//! * [`feature`]: the pose-dependent ROI, patch extraction and the residual
//!   feature fed to the regressors.
//! * [`nn`]: a small from-scratch CNN with SGD training.
//! * [`regression`]: zone/group hierarchy, dataset synthesis, regressor
//!   banks and single/multi-pass registration.
//! * [`baseline`]: Powell's method with mutual information and gradient
//!   correlation.
//! * [`eval`]: perturbation protocol, projected TRE and experiment reports.

pub mod baseline;
pub mod drr;
pub mod error;
pub mod eval;
pub mod feature;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod preset;
pub mod regression;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{ProjectionGeometry, RigidPose, TransformParams};
