//! Collaborative global-local segmentation networks for ultra-high resolution
//! images.
//!
//! A *global* branch sees the whole image downsampled to a small fixed size; a
//! *local* branch sees full-resolution patches cropped on an overlapped grid.
//! The branches exchange intermediate feature maps ("taps") layer by layer,
//! are weakly coupled through a penalty on their final taps, and are fused by
//! a 3×3 aggregation layer. Training runs in three phases (global alone, then
//! global→local, then local→global) and inference streams patches so that the
//! working set depends on the patch size only.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches the
//! filesystem lives in the companion `glnet` crate.
#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod coarse2fine;
pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod tiling;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::{Mask, Shape, Tensor};
