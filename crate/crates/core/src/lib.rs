//! Hybrid-policy reinforcement learning with verifiable rewards on small,
//! fully enumerable sequence-generation tasks.
//!
//! The crate is organised bottom-up:
//!
//! - [`env`]: verifiable-reward tasks and the exact trajectory-space oracle.
//! - [`policy`]: tabular softmax sequence policies, sampling, entropy and
//!   analytic score-function gradients.
//! - [`estimators`]: per-token importance ratios (on-policy, standard IS,
//!   proxy IS, multiple importance sampling) and exact/Monte-Carlo
//!   diagnostics of their bias and variance.
//! - [`advantage`]: group-relative reward normalisation and the
//!   focal-weighted exploration advantage.
//! - [`trainer`]: the composite hybrid objective, its gradient, the
//!   optimisation loop and ablation presets; [`grpo`] holds an independent
//!   GRPO-only loop used as a reference path.
//! - [`metrics`]: pass@k estimation and capability-boundary curves.
//!
//! Data-parallel loops (Monte-Carlo sampling, trajectory enumeration,
//! per-group gradients) run on rayon when the `parallel` feature is enabled
//! and sequentially otherwise. Results are bit-identical in both modes.

// Range checks are written `!(x >= lo)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod config;
pub mod env;
pub mod error;
pub mod estimators;
pub mod fmt;
pub mod grpo;
pub mod metrics;
pub mod par;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
