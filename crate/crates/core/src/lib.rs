//! Estimating and certifying the worst-case risk of a model over
//! subpopulations defined by a set of attributes.
//!
//! Given per-sample losses and attributes, the worst-case risk at level
//! `alpha` is the largest mean of the conditional risk `E[loss | Z]` over
//! any subpopulation holding at least an `alpha` share of the data. The
//! crate provides the empirical tail-mean machinery ([`cvar`]), first-stage
//! regressors for the conditional risk ([`learner`]), a cross-fitted,
//! bias-corrected estimator with confidence intervals ([`estimator`]),
//! smallest-safe-share certificates ([`certificate`]), upper confidence
//! bounds ([`bounds`]) and a synthetic benchmark ([`simulation`]).

pub mod bounds;
pub mod certificate;
pub mod cvar;
pub mod data;
pub mod error;
pub mod estimator;
pub mod format;
pub mod learner;
pub mod normal;
pub mod simulation;

pub use bounds::{dim_free_ucb, DimFreeBound};
pub use certificate::{certificate_error_bound, certify, AlphaHat, Certificate, CertifyMode, ErrorBound};
pub use cvar::{empirical_cvar, generalized_worst_case, higher_order_cvar, AlphaMixture, CvarCurve};
pub use data::{load_csv, load_losses, make_folds, Dataset, EvalConfig, FoldPartition, LearnerKind, LossSample};
pub use error::{Error, Result};
pub use estimator::{estimate, estimate_plugin_only, CrossFit, WorstCaseEstimate};
pub use format::fmt_g17;
pub use simulation::{oracle_true_w, simulate_dataset, ErrorSummary, OracleResult, SimConfig};
