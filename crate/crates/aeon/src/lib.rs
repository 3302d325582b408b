//! Desk-scale laboratory for learning under mixed label noise.
//!
//! Real training sets are polluted in two distinct ways: some records carry a
//! wrong class label but are otherwise ordinary inputs (in-distribution noise),
//! and some records are not from the task distribution at all yet still carry a
//! label (out-of-distribution noise). This crate implements a complete, small,
//! CPU-sized laboratory for a training method that handles both at once by
//! *learning how much of each kind of noise is present* while it trains:
//!
//! - a reverse-mode automatic differentiation tape ([`autodiff`]),
//! - a small MLP classifier with a normalized projection head ([`model`]),
//! - learnable noise-rate estimators, energy scores, adaptive thresholds, and
//!   soft sample masks ([`noise`]),
//! - the full training objective combining supervised, pseudo-label,
//!   energy-margin, and contrastive terms ([`objective`]),
//! - a synthetic benchmark generator that injects both noise kinds with known
//!   ground truth ([`benchmark`]),
//! - an SGD training loop with a warm-up phase and cosine decay ([`trainer`]),
//! - evaluation metrics, reports, and parameter sweeps ([`metrics`], [`sweep`]).
//!
//! The `aeon` binary exposes the same functionality as a CLI with `synth`,
//! `train`, `eval`, and `sweep` subcommands.
//!
//! A narrative guide lives in the [`guide`] module; it is rendered from the
//! mdbook sources under `book/` and its code snippets run as doc-tests.

pub mod autodiff;
pub mod benchmark;
pub mod error;
pub mod guide;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod objective;
pub mod special;
pub mod sweep;
pub mod trainer;

pub(crate) mod rng;

pub use error::{Error, Result};
