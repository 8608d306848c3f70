//! Numerical laboratory for random dynamical systems on the flat 2-torus.
//!
//! The crate is organised bottom-up:
//!
//! * [`torus`] and [`linalg`]: points, tangent vectors, projective directions, 2×2 algebra.
//! * [`dynamics`]: torus diffeomorphisms with analytic jets, words, driving measures, constants.
//! * [`cocycle`]: singular data of derivative products, expansion certificates, tail estimators.
//! * [`curves`]: arclength node chains pushed with exact curvature propagation.
//! * [`admissible`]: curve-supported measures, good-word filtering and the staged pipeline.
//! * [`seminorm`]: ρ-inner products of point clouds and the absolute-continuity diagnostic.
//! * [`lab`]: Cesàro averages, stationarity, equidistribution, orbit classification, traces.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod admissible;
pub mod cocycle;
pub mod curves;
pub mod dynamics;
pub mod error;
pub mod lab;
pub mod linalg;
pub mod rng;
pub mod seminorm;
pub mod stats;
pub mod tails;
pub mod torus;

pub use error::{Error, Result};
