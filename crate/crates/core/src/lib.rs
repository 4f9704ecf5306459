//! Shape&scale-perceptive deformable attention (S3-DA) for query-based
//! monocular 3D detection, built on a small dense-array core with
//! hand-written backward passes.
//!
//! Module map:
//!
//! * [`tensor`]: dense arrays, parameters, linear / conv / softmax /
//!   self-attention with analytic gradients and a finite-difference checker.
//! * [`sampling`]: feature maps, query sets, mask lattices and bilinear sampling.
//! * [`fusion`]: map reduction, query-level visual/depth fusion and the
//!   shape&scale matching distribution.
//! * [`msm`]: shape&scale category labels and the matching focal loss.
//! * [`decoder`]: shape&scale-aware filter, deformable key-point aggregation
//!   and the full decoder layer.
//! * [`losses`]: target assignment and the composite detection objective.
//! * [`model`]: query embeddings, stacked decoder layers, prediction head.
//! * [`harness`]: synthetic scenes, KITTI labels, training, metrics.

pub mod decoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod losses;
pub mod model;
pub mod msm;
pub mod sampling;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
