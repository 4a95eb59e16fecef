//! Reconstruction of curvature and of the Riemannian metric along geodesics
//! from the shape operators of point-diffractor wavefronts, a Riemannian
//! generalization of the Dix method.

pub mod cli;
pub mod error;
pub mod forward;
pub mod geodesics;
pub mod inversion;
pub mod manifold;
pub mod metric_recovery;
pub mod ode;
pub mod series;
pub mod surfacedata;

pub use error::{Error, Result};
