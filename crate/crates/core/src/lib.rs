//! Dense event-based correspondence: optical flow from temporally separated
//! event streams and disparity from stereo event streams, both solved by
//! feature similarity matching.
//!
//! The crate is organised bottom-up: [`tensor`] kernels, [`events`] and
//! voxelization, [`geometry`] and the synthetic generator, [`features`],
//! [`enhancement`], [`matching`], [`optimize`], and the end-to-end
//! [`pipeline`]. [`selfcheck`] bundles the invariant suites.

// `!(x > 0.0)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod enhancement;
pub mod error;
pub mod events;
pub mod features;
pub mod field;
pub mod geometry;
pub mod matching;
pub mod optimize;
pub mod pipeline;
pub mod selfcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use field::{DisplacementField, Task};
