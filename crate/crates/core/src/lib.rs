// Numeric kernels index several buffers in lockstep, and validation uses
// `!(x > 0.0)` so NaN counts as invalid; both styles are deliberate.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

//! Desk-scale iterative stereo matching with selective recurrent units.
//!
//! The pipeline: shared-weight feature extraction at 1/4 resolution, an
//! all-pairs correlation pyramid over image width, contextual spatial
//! attention maps, and a three-level recurrent update operator that fuses
//! dual-kernel GRU branches per pixel, with convex-combination upsampling
//! back to full resolution. Everything runs on a small f64 tape-based
//! autodiff engine, so the whole model is trainable on a CPU.

pub mod config;
pub mod cost;
pub mod csa;
pub mod data;
pub mod features;
pub mod imgio;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod sru;
pub mod tensor;
pub mod training;
pub mod verify;

pub use tensor::{ParamId, ParamStore, Tape, TensorId, TensorValue};
