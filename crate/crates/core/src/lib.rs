//! Monocular visual odometry by regressing planar frame-to-frame motion with
//! a two-stream convolutional network.
//!
//! Modules, bottom-up:
//! - [`geom`]: pose matrices, planar deltas, trajectory integration.
//! - [`ingest`]: rasters, resampling, pairing, splits, sample records.
//! - [`fastdet`]: FAST corner detection for the optional prior channel.
//! - [`nncore`]: tensors, layers, loss, initializers, SGD, checkpoints.
//! - [`net`]: two-stream and pretrained-head network assembly.
//! - [`synthworld`]: procedural ground-plane world with exact poses.
//! - [`train`]: experiment presets, training loop, loss logs.
//! - [`eval`]: sequence inference, trajectory reports and plots.

pub mod eval;
pub mod fastdet;
pub mod geom;
pub mod ingest;
pub mod net;
pub mod nncore;
pub mod synthworld;
pub mod train;
