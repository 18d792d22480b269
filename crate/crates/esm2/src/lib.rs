//! Entire-space multi-task conversion-rate modeling on the behavior graph
//! impression→click→D(O)Action→purchase.
//!
//! The crate bundles everything needed to reproduce the modeling study at
//! desk scale:
//!
//! * [`datagen`] — a calibrated synthetic impression-log generator and the
//!   tab-separated dataset loader;
//! * [`features`] — the shared embedding module mapping sparse IDs and dense
//!   numerics to the tower input vector;
//! * [`network`] — per-tower MLPs with hand-rolled backprop and Adam;
//! * [`composition`] — the parameter-free sequential composition of the four
//!   tower probabilities into ctr/ctavr/cvr/ctcvr;
//! * [`training`] — losses, the mini-batch loop and the model variants
//!   (four-tower, two-tower product baseline, independent DNNs with and
//!   without oversampling);
//! * [`checkpoint`] — versioned binary model serialization;
//! * [`metrics`] — AUC, grouped AUC, F1 at top-k% and the purchase-frequency
//!   breakdown;
//! * [`cli`] — the `esm2` command-line driver (gen/train/eval/sweep/ablate/
//!   report).

pub mod checkpoint;
pub mod cli;
pub mod composition;
pub mod config;
pub mod datagen;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod network;
pub mod seeding;
pub mod training;

pub use error::{Esm2Error, Result};
