//! Watermarking for counterfactual explanations.
//!
//! A proprietary binary classifier serves predictions and counterfactual (CF)
//! explanations. Adversaries can train surrogate models on those CFs to steal
//! the classifier cheaply. This crate embeds a bounded, per-instance
//! perturbation into every served CF by solving a bi-level optimization
//! problem with unrolled optimizer steps, so that any surrogate trained on
//! served CFs becomes statistically identifiable through a one-sided paired
//! t-test — while the CFs themselves keep their validity and proximity.
//!
//! Module map:
//! - [`matrix`], [`autodiff`]: dense `f64` matrices and a reverse-mode tape
//!   whose gradients are themselves tape values (meta-gradients).
//! - [`mlp`]: small feed-forward binary classifiers — training, fine-tuning,
//!   magnitude pruning, agreement.
//! - [`data`]: CSV + schema ingestion, min-max/one-hot feature engineering,
//!   stratified splits, bootstrap attack pools, built-in datasets.
//! - [`explain`]: gradient-descent and growing-sphere CF generators plus
//!   validity/proximity metrics.
//! - [`watermark`]: the bi-level embedding itself.
//! - [`extract`]: querying / CF-augmented / dual-CF model extraction attacks
//!   against a defended service.
//! - [`verify`]: the paired t-test, its closed-form rejection condition, and
//!   the Student-t machinery they need.
//! - [`harness`]: end-to-end evaluation protocol, ablations, robustness
//!   sweeps, and machine-readable reports.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod explain;
pub mod extract;
pub mod harness;
pub mod matrix;
pub mod mlp;
pub mod rng;
pub mod verify;
pub mod watermark;

pub use error::{Error, Result};
pub use matrix::Matrix;
