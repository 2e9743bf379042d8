//! Trace-driven simulation and control of adaptive-bitrate streaming for
//! semantic video codecs.
//!
//! The pieces, bottom up:
//!
//! - [`trace`]: bandwidth traces, corpora and seeded train/test splits.
//! - [`metrics`]: MIoU, bitrate ladders and the codec rate-accuracy table.
//! - [`playback`]: the chunk-level download/buffer simulator and QoE.
//! - [`policies`]: fixed, buffer-based, MPC and learned controllers.
//! - [`nn`]: actor and critic networks with hand-written gradients.
//! - [`rl`]: online TD actor-critic training with parallel workers.
//! - [`report`]: CDFs, means and relative gains across schemes.
//! - [`config`] and [`cli`]: layered run configuration and the `semabr` commands.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod metrics;
pub mod nn;
pub mod playback;
pub mod policies;
pub mod report;
pub mod rl;
pub mod trace;
