//! Fusion of 3D local geometric descriptors: descriptors, fusion networks,
//! baselines, matching evaluation and registration.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod datasets;
pub mod descriptors;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod net;
pub mod registration;
pub mod sampler;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
