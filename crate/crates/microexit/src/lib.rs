//! Adaptive two-exit inference for wearable activity recognition.
//!
//! The pipeline turns raw multi-channel sensor streams into activity labels
//! while spending as little compute as possible. A small 1D CNN carries two
//! classifier heads: a cheap one partway through the network and a stronger
//! one at the end. A decision tree looks at hand-crafted segment features and
//! routes each segment to whichever head is expected to get it right, so most
//! segments never pay for the deep half of the network.
//!
//! The crate is organized along the data path:
//!
//! - [`preprocess`]: filtering, segmentation, feature extraction, and
//!   normalization of sensor streams, plus a binary segment-set format.
//! - [`nn`]: fixed-shape 1D tensor kernels (conv, pool, batchnorm, dense,
//!   activations) with forward, backward, and per-layer operation counts.
//! - [`model`]: the two-head network assembled from those kernels, and a
//!   checksummed weight archive.
//! - [`trainer`]: Adam + softmax cross-entropy training of both heads, with
//!   stratified splits and deterministic shuffling.
//! - [`obp`]: exit labeling and the decision-tree router trained on it.
//! - [`engine`]: adaptive and confidence-threshold inference drivers, the
//!   operation/time/energy cost model, and deployment feasibility checks.
//! - [`metrics`]: confusion matrices and the weighted classification scores
//!   used everywhere above.
//! - [`synth`]: a seeded generator for synthetic labeled streams, used by the
//!   test suite and the CLI demo path.
//!
//! All floating-point state is `f64`; inference results are deterministic
//! functions of the stored weights and input bytes on every platform.

// Validation uses `!(x > 0.0)` on purpose: it fails NaN along with
// non-positive values, which the comparison clippy suggests would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod format;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod obp;
pub mod preprocess;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
