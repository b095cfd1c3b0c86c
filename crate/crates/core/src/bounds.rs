//! Data-dependent, dimension-free upper confidence bound for each fold:
//!
//! ```text
//! ucb_k = omega_k + (2/alpha) * ( sqrt([mse_k(mu_hat_k) - mse_k(refit)]_+)
//!                                 + misspec_budget
//!                                 + C * M * (2 K log(2/delta) / n)^(1/4) )
//! ```
//!
//! `mse_k(refit)` is the in-fold MSE of the same learner refit on the fold,
//! standing in for the best in-class MSE. `C` has no known value and
//! defaults to 1 (a heuristic constant); `misspec_budget` bounds the
//! distance from the class to the true conditional risk and defaults to 0,
//! i.e. a well-specified bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EvalConfig};
use crate::error::{Error, Result};
use crate::estimator::CrossFit;
use crate::learner::{min_class_mse, mse_of};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimFreeBound {
    pub k: usize,
    pub omega_k: f64,
    pub fold_mse: f64,
    pub refit_mse: f64,
    pub excess_mse_term: f64,
    pub misspec_budget: f64,
    pub concentration_term: f64,
    pub ucb: f64,
    pub constants: BoundConstants,
}

pub fn dim_free_ucb(ds: &Dataset, cfg: &EvalConfig, c: f64, m: f64, misspec_budget: f64) -> Result<Vec<DimFreeBound>> {
    check_constants(ds, c, m, misspec_budget)?;
    let cf = CrossFit::fit(ds, cfg)?;
    dim_free_ucb_fitted(&cf, ds, cfg, c, m, misspec_budget)
}

fn check_constants(ds: &Dataset, c: f64, m: f64, misspec_budget: f64) -> Result<()> {
    if !c.is_finite() || c <= 0.0 {
        return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
    }
    if !m.is_finite() || m < ds.max_loss() {
        return Err(Error::InvalidArgument(format!("M = {m} is below the largest observed loss {}", ds.max_loss())));
    }
    if !misspec_budget.is_finite() || misspec_budget < 0.0 {
        return Err(Error::InvalidArgument(format!("misspec_budget must be >= 0, got {misspec_budget}")));
    }
    Ok(())
}

/// `sqrt([fold_mse - refit_mse]_+)`.
pub fn excess_term(fold_mse: f64, refit_mse: f64) -> f64 {
    (fold_mse - refit_mse).max(0.0).sqrt()
}

/// Bounds from fold models that were already fitted with `cfg`.
pub fn dim_free_ucb_fitted(
    cf: &CrossFit,
    ds: &Dataset,
    cfg: &EvalConfig,
    c: f64,
    m: f64,
    misspec_budget: f64,
) -> Result<Vec<DimFreeBound>> {
    check_constants(ds, c, m, misspec_budget)?;
    let alpha = cfg.alpha;
    let n = cf.n() as f64;
    let concentration_term = c * m * (2.0 * cf.k() as f64 * (2.0 / cfg.delta).ln() / n).powf(0.25);
    (0..cf.k())
        .into_par_iter()
        .map(|k| {
            let rows = cf.fold_rows(k);
            if rows.len() < 2 {
                return Err(Error::InvalidArgument(format!("fold {k} is too small")));
            }
            let omega_k = cf.fold_estimate(k, alpha, true).omega_k;
            let fold_mse = mse_of(cf.fold_predictions(k), rows.iter().map(|&i| ds.loss(i)));
            let refit_mse = min_class_mse(ds, rows, cfg.learner, &cfg.params)?;
            let excess_mse_term = excess_term(fold_mse, refit_mse);
            let ucb = omega_k + (2.0 / alpha) * (excess_mse_term + misspec_budget + concentration_term);
            Ok(DimFreeBound {
                k,
                omega_k,
                fold_mse,
                refit_mse,
                excess_mse_term,
                misspec_budget,
                concentration_term,
                ucb,
                constants: BoundConstants { c, m, delta: cfg.delta },
            })
        })
        .collect()
}
