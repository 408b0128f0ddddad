//! Density-aware face detection at desk scale.
//!
//! The pipeline: a small convolutional backbone feeds four anchor-based
//! detector heads at strides 4/8/16/32; an auxiliary density estimator
//! predicts a face-count-preserving density map from early backbone taps and
//! enriches the stride-4 features before the smallest-face head. Training
//! combines OHEM-selected classification, smooth-L1 box regression, and
//! density regression losses under SGD with momentum. Everything runs on a
//! minimal f64 tensor engine whose backward passes are verified against
//! central finite differences.

pub mod anchors;
pub mod density;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;
pub mod postprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
