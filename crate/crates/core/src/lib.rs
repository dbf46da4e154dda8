//! Appearance-based gaze estimation with person-specific calibration.
//!
//! The crate covers the whole pipeline from normalized eye crops to the
//! leave-one-person-out calibration study:
//!
//! * [`geometry`]: head pose from six facial landmarks, the normalized-camera
//!   warp, head-angle extraction and histogram equalization.
//! * [`dataset`]: the on-disk sample store, per-person sampling and
//!   partitioning, and a synthetic eye renderer with known ground truth.
//! * [`net`]: a small pre-activation residual regressor with hand-written
//!   reverse-mode gradients.
//! * [`train`]: the optimization loop and error evaluation.
//! * [`calibration`]: paired with/without-calibration experiments and the
//!   study report.
//! * [`cli`]: the `gazecal` command-line front end.

// Negated comparisons are used on purpose so NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cli;
pub mod dataset;
pub mod geometry;
pub mod net;
pub mod seed;
pub mod train;

pub use dataset::{EyeImage, EyeSide, NormalizedSample, PartitionSet, PersonDataset, PersonId};
pub use net::{NetworkConfig, NetworkParams};
pub use train::{TrainConfig, TrainRecord};
