//! Hierarchical scene-sketch segmentation.
//!
//! A dual-path vision transformer (standard q-k attention plus a parallel
//! value-value path) is fine-tuned against frozen text embeddings at two
//! levels: a holistic scene triplet loss between the sketch token and its
//! caption, and a category triplet loss computed on sketches disentangled
//! through per-category similarity maps gated by a learnable threshold.
//! Segmentation is per-pixel argmax over upscaled similarity maps.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense arrays, a reverse-mode tape and finite-difference checks
//! - [`sketch_data`]: bitmaps, strokes, captions, dataset IO and a synthetic generator
//! - [`text_embedding`]: the frozen text encoder stand-in
//! - [`encoder`]: the dual-path transformer with cross-attention conditioning
//! - [`training`]: losses, the disentanglement step, AdamW and the training step
//! - [`segmentation`]: label maps for new sketches
//! - [`metrics`]: Acc@P, Acc@S, mIoU, MeanAcc, FWIoU, correlation, majority vote
//! - [`checkpoint`] and [`config_file`]: persistence

pub mod checkpoint;
pub mod config_file;
pub mod encoder;
mod error;
pub mod metrics;
pub mod numerics;
pub mod parallel;
pub mod segmentation;
pub mod sketch_data;
pub mod text_embedding;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Array, Scalar};
