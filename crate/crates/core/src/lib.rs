//! Spatial–semantic object memory for manipulation when the target is out of
//! view: multi-view construction, gated EMA refinement, cross-attention
//! retrieval, offline trajectory preprocessing and behavioral metrics, driven
//! by a deterministic pan–tilt camera simulator.

pub mod construct;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod numkern;
pub mod preprocess;
pub mod refine;
pub mod retrieve;
pub mod scene;

pub use error::{Error, Result};
