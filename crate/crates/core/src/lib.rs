//! Differentially private sparse fine-tuning.
//!
//! The crate trains small classifiers with DP-SGD while only a selected
//! subset of the weights is allowed to move. The subset (the mask) is chosen
//! privately from one epoch of clipped, noised absolute gradients summed over
//! groups of parameters such as weight-matrix rows. Summing over a group
//! averages out independent noise, so the group score keeps more signal than
//! any single coordinate does.
//!
//! Modules:
//! - [`model`]: logistic regression and MLPs with exact per-sample gradients.
//! - [`accountant`]: Rényi-DP ledger for subsampled Gaussian mechanisms.
//! - [`engine`]: clipping, noise, Poisson batches and masked momentum updates.
//! - [`mask`]: groupings, budgets and every selection strategy.
//! - [`data`]: IDX/CSV loading and a planted synthetic transfer task.
//! - [`harness`]: configs, full runs, reports and sweeps.
//! - [`persist`]: mask files and parameter checkpoints.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod accountant;
pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod mask;
pub mod model;
pub mod params;
pub mod persist;
pub mod rng;

pub use accountant::{PrivacyLedger, SgmEvent};
pub use error::{Error, Result};
pub use harness::{run_experiment, RunReport, Strategy, TrainConfig};
pub use mask::{Grouping, GroupingKind, Mask, SparsityBudget};
pub use model::{Batch, Model, ModelSpec};
pub use params::{Layout, ParamVector};
