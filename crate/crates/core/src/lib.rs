//! Cross-view localization of a ground camera against a georeferenced aerial
//! feature grid: dense matching, depth lifting and closed-form weighted
//! similarity alignment.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod experiments;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod lifting;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod par;
pub mod simulator;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{Point2, Point3, SimilarityTransform2D, WeightedPointPair};
