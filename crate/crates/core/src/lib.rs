//! Infant brain volumetry and lateral ventricle segmentation from 3D
//! ultrasound.
//!
//! The crate covers the whole chain: brain volume from an ellipsoid fitted
//! to the detected skull, multi-atlas ventricle segmentation (LC² + P
//! registration, STAPLE fusion, deformable mesh refinement), evaluation
//! metrics, and a synthetic phantom generator that provides ground truth.

pub mod brain;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod init;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod volume;

pub use error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
