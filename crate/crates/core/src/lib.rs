//! Residual experts vector quantization (REVQ).
//!
//! A shared base codebook quantizes every frame of a window; a bias-free
//! linear router then scores a pool of expert codebooks on the time-averaged
//! window and the top `k_r` experts refine the residual. Selected experts
//! always run in ascending index order, whatever their scores were.
//!
//! The crate is organised bottom-up:
//!
//! - [`vq`]: single-codebook quantization, k-means seeding, EMA updates.
//! - [`engine`]: router, top-k masks, the ordered residual cascade.
//! - [`trainer`]: EMA codebook learning plus straight-through router descent.
//! - [`bitstream`]: the `RVQ1` wire format with combinatorially coded masks.
//! - [`frontend`]: WAV I/O and the block DCT standing in for a learned encoder.
//! - [`codec`]: audio in, stream out, and back.
//! - [`metrics`] and [`experiments`]: evaluation and the structural experiments.

pub mod bitstream;
pub mod codec;
pub mod config;
pub mod engine;
mod error;
mod le;
pub mod experiments;
pub mod frontend;
pub mod metrics;
pub mod trainer;
pub mod vq;

pub use engine::{
    affinity_scores, ste_mask_backward, topk_mask, AffinityScores, QuantizedWindow, RevqModel,
    RoutingMask, Router,
};
pub use error::{Error, Result};
pub use vq::{kmeans_init, Codebook, FrameBatch};
