//! Cable core topography scanning and surface defect detection.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are the concrete types used by the tools and file formats.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assembly;
pub mod detect;
pub mod eval;
pub mod geom;
pub mod library;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod sensor;
pub mod synth;
pub mod unwrap;

pub use scalar::Scalar;

pub type Point2f64 = geom::Point2<f64>;
pub type Profile64 = geom::Profile<f64>;
pub type Profile32 = geom::Profile<f32>;
pub type SurfaceMesh64 = geom::SurfaceMesh<f64>;
pub type SurfaceMesh32 = geom::SurfaceMesh<f32>;
pub type DeviationMap64 = geom::DeviationMap<f64>;
pub type CableSpec64 = synth::CableSpec<f64>;
pub type Annotation64 = synth::Annotation<f64>;
