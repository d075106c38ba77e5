//! Domain-adversarial training (DAT) laboratory.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode engine over dense `f64` matrices, including the
//!   gradient-reversal operation.
//! - [`nets`]: the generator `G`, domain classifier `C` and task network `R`, with their losses.
//! - [`theory`]: discrete-support checks of the adversarial objective (closed-form optimal
//!   classifier, KL/JS divergences, alternating minimax).
//! - [`datagen`]: deterministic synthetic multi-domain data plus the JSON-lines file format.
//! - [`relabel`]: k-means and soft-label relabeling of domain classes (reDAT).
//! - [`trainer`]: the DAT update rules, baselines, evaluation and invariance diagnostics.
//! - [`cli`]: the `redat` command-line harness.
//!
//! Data-parallel loops (k-means restarts and assignment, probe sweeps, seed grids) go through
//! [`par::Execution`], which runs on rayon when the `parallel` feature is enabled and falls back
//! to plain iteration otherwise. Results are always collected in input order, so both paths
//! produce identical bytes.

pub mod autodiff;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod nets;
pub mod par;
pub mod relabel;
pub(crate) mod seed;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
