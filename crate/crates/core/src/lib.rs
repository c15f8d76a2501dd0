//! LiDAR-inertial odometry with ellipsoidal protection levels.

pub mod ellipsoid;
pub mod manifold;
pub mod mapping;
pub mod sensing;
pub mod registration;
pub mod filter;
pub mod simulation;
pub mod evaluation;
pub mod pipeline;
pub mod config;
pub mod dataset;

pub use nalgebra;
