//! Hubless groupwise registration of 3D volumes driven by keypoints.
//!
//! Every image gets its own half-transform into an abstract common space. Keypoints are
//! extracted per volume, matched across all image pairs, and the half-transforms are
//! optimized so that matched points coincide, with outlier matches suppressed by a
//! per-image two-component Maxwell mixture.
//!
//! Pipeline, bottom-up:
//!
//! * [`volume`]: volumes with physical geometry and integral-volume box sums.
//! * [`keypoints`]: box-filter Hessian blob detection plus upright 48-D descriptors.
//! * [`matching`]: ratio-test descriptor matching and the global match graph.
//! * [`robust`]: Maxwell mixture EM and symmetric match weights.
//! * [`transforms`]: linear + stacked cubic B-spline half-transforms.
//! * [`optimizer`]: linear initialization and multi-level sparse gradient descent.
//! * [`harness`]: synthetic groups with planted truth, landmark evaluation, average rendering.

pub mod error;
pub mod harness;
pub mod keypoints;
pub mod matching;
pub mod optimizer;
pub mod robust;
pub mod transforms;
pub mod volume;

pub use error::{Error, Result};

/// A point or vector in physical (mm) coordinates.
pub type Vec3 = nalgebra::Vector3<f64>;
