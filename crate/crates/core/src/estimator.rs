//! Cross-fitted debiased estimation of the worst-case subpopulation value.
//!
//! For each fold `I_k`, the first stage is fit on the complement, the
//! threshold `q_hat_k` is the complement's lower `(1 - alpha)`-quantile of
//! `mu_hat_k`, and on `I_k`:
//!
//! ```text
//! omega_k  = W_alpha({mu_hat_k(Z_i)}) + mean_i[ tau_k(Z_i) (loss_i - mu_hat_k(Z_i)) ]
//! sigma2_k = Var[(mu_hat_k(Z) - q_hat_k)_+] / alpha^2 + Var[ tau_k(Z) (loss - mu_hat_k(Z)) ]
//! tau_k(z) = 1{mu_hat_k(z) >= q_hat_k} / alpha
//! ```
//!
//! Fold results are combined with weights `|I_k| / n` (the plain average
//! when the folds have equal size) and the interval is
//! `omega +/- z_{1-delta/2} sigma / sqrt(n)`. Variances divide by `|I_k|`.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvar::{CvarCurve, QuantileKind};
use crate::data::{check_alpha, make_folds, Dataset, EvalConfig, FoldPartition, LearnerKind};
use crate::error::{Error, Result};
use crate::learner::{fit_predictor, Predictor, RiskModel};
use crate::normal::two_sided_critical;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEstimate {
    pub k: usize,
    pub size: usize,
    pub omega_k: f64,
    pub sigma2_k: f64,
    pub plug_in_k: f64,
    pub correction_k: f64,
    pub q_hat_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseEstimate {
    pub alpha: f64,
    pub delta: f64,
    pub omega: f64,
    pub sigma: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub folds: Vec<FoldEstimate>,
}

/// Worst-case weight `1{mu >= q_hat} / alpha`. At `alpha = 1` every point
/// belongs to the (whole-population) worst case.
pub fn tau_weight(mu: f64, q_hat: f64, alpha: f64) -> f64 {
    if alpha >= 1.0 || mu >= q_hat {
        1.0 / alpha
    } else {
        0.0
    }
}

pub fn tau_hat(model: &RiskModel, z: &[f64]) -> Result<f64> {
    Ok(tau_weight(model.predict(z)?, model.q_hat(), model.alpha()))
}

/// Population variance, computed on values shifted by the first element so
/// that a constant input gives exactly zero.
pub(crate) fn pop_variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = xs.clone();
    let Some(shift) = it.next() else { return 0.0 };
    let n = xs.clone().count() as f64;
    let mean = xs.clone().map(|x| x - shift).sum::<f64>() / n;
    xs.map(|x| {
        let d = x - shift - mean;
        d * d
    })
    .sum::<f64>()
        / n
}

/// Per-fold quantities computed from aligned predictions and losses.
#[derive(Debug, Clone, Copy)]
struct FoldTerms {
    plug_in: f64,
    correction: f64,
    sigma2: f64,
}

fn fold_terms(curve: &CvarCurve, pred: &[f64], loss: &[f64], q_hat: f64, alpha: f64) -> FoldTerms {
    let n = pred.len() as f64;
    let weighted = || pred.iter().zip(loss).map(move |(&m, &l)| tau_weight(m, q_hat, alpha) * (l - m));
    let correction = weighted().sum::<f64>() / n;
    let excess = pred.iter().map(move |&m| if alpha >= 1.0 { m } else { (m - q_hat).max(0.0) });
    let sigma2 = pop_variance(excess) / (alpha * alpha) + pop_variance(weighted());
    FoldTerms { plug_in: curve.value(alpha), correction, sigma2 }
}

fn fold_predictions(model: &RiskModel, ds: &Dataset, fold: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if fold.is_empty() {
        return Err(Error::InvalidArgument("empty fold".into()));
    }
    let pred = model.predict_rows(ds, fold)?;
    let loss = fold.iter().map(|&i| ds.loss(i)).collect();
    Ok((pred, loss))
}

/// Plug-in worst-case value of `mu_hat` over the rows `fold`.
pub fn plug_in_cvar(model: &RiskModel, ds: &Dataset, fold: &[usize]) -> Result<f64> {
    let (pred, _) = fold_predictions(model, ds, fold)?;
    Ok(CvarCurve::new(&pred)?.value(model.alpha()))
}

/// `mean_i tau(Z_i) (loss_i - mu_hat(Z_i))` over the rows `fold`.
pub fn debias_correction(model: &RiskModel, ds: &Dataset, fold: &[usize]) -> Result<f64> {
    let (pred, loss) = fold_predictions(model, ds, fold)?;
    let (q, a) = (model.q_hat(), model.alpha());
    Ok(pred.iter().zip(&loss).map(|(&m, &l)| tau_weight(m, q, a) * (l - m)).sum::<f64>() / pred.len() as f64)
}

pub fn fold_variance(model: &RiskModel, ds: &Dataset, fold: &[usize]) -> Result<f64> {
    if fold.len() < 2 {
        return Err(Error::InvalidArgument("fold variance needs at least 2 samples".into()));
    }
    let (pred, loss) = fold_predictions(model, ds, fold)?;
    let curve = CvarCurve::new(&pred)?;
    Ok(fold_terms(&curve, &pred, &loss, model.q_hat(), model.alpha()).sigma2)
}

#[derive(Debug, Clone)]
struct FoldFit {
    predictor: Predictor,
    eval_rows: Vec<usize>,
    eval_pred: Vec<f64>,
    eval_loss: Vec<f64>,
    eval_curve: CvarCurve,
    aux_curve: CvarCurve,
}

fn compare_rows(ds: &Dataset, a: usize, b: usize) -> Ordering {
    let (sa, sb) = (&ds.samples()[a], &ds.samples()[b]);
    let ext = |i: usize| ds.external_mu().map_or(0.0, |m| m[i]);
    sa.loss
        .total_cmp(&sb.loss)
        .then_with(|| {
            sa.z.iter().zip(&sb.z).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
        })
        .then_with(|| ext(a).total_cmp(&ext(b)))
}

/// First-stage fits for every fold, reusable across `alpha` values.
#[derive(Debug, Clone)]
pub struct CrossFit {
    n: usize,
    partition: FoldPartition,
    folds: Vec<FoldFit>,
}

impl CrossFit {
    /// Fit with folds from `make_folds(n, cfg.folds, cfg.seed)`.
    pub fn fit(ds: &Dataset, cfg: &EvalConfig) -> Result<Self> {
        cfg.validate_for(ds)?;
        let partition = make_folds(ds.len(), cfg.folds, cfg.seed)?;
        Self::fit_with_folds(ds, cfg, partition)
    }

    pub fn fit_with_folds(ds: &Dataset, cfg: &EvalConfig, partition: FoldPartition) -> Result<Self> {
        cfg.validate_for(ds)?;
        if partition.len() != ds.len() || partition.k() != cfg.folds {
            return Err(Error::InvalidArgument("fold partition does not match dataset / config".into()));
        }
        let members: Vec<Vec<usize>> = (0..partition.k())
            .map(|k| {
                let mut rows = partition.fold(k);
                rows.sort_by(|&a, &b| compare_rows(ds, a, b));
                rows
            })
            .collect();
        let folds = (0..partition.k())
            .into_par_iter()
            .map(|k| {
                let eval_rows = members[k].clone();
                let aux_rows: Vec<usize> =
                    members.iter().enumerate().filter(|&(j, _)| j != k).flat_map(|(_, m)| m.iter().copied()).collect();
                if eval_rows.len() < 2 {
                    return Err(Error::InvalidArgument(format!("fold {k} has fewer than 2 samples")));
                }
                let predictor = match cfg.learner {
                    LearnerKind::External => Predictor::external(ds)?,
                    kind => fit_predictor(ds, &aux_rows, kind, &cfg.params)?,
                };
                let aux_pred = predictor.predict_rows(ds, &aux_rows)?;
                let eval_pred = predictor.predict_rows(ds, &eval_rows)?;
                let eval_loss = eval_rows.iter().map(|&i| ds.loss(i)).collect();
                Ok(FoldFit {
                    eval_curve: CvarCurve::new(&eval_pred)?,
                    aux_curve: CvarCurve::new(&aux_pred)?,
                    predictor,
                    eval_rows,
                    eval_pred,
                    eval_loss,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n: ds.len(), partition, folds })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn partition(&self) -> &FoldPartition {
        &self.partition
    }

    /// Rows of fold `k`, ordered by content (loss, then attributes, then
    /// external prediction) so that results do not depend on row order.
    pub fn fold_rows(&self, k: usize) -> &[usize] {
        &self.folds[k].eval_rows
    }

    /// `mu_hat_k` evaluated on fold `k`.
    pub fn fold_predictions(&self, k: usize) -> &[f64] {
        &self.folds[k].eval_pred
    }

    pub fn predictor(&self, k: usize) -> &Predictor {
        &self.folds[k].predictor
    }

    /// The fold-`k` risk model with `q_hat` set for `alpha`.
    pub fn risk_model(&self, k: usize, alpha: f64) -> Result<RiskModel> {
        let f = &self.folds[k];
        RiskModel::with_threshold(f.predictor.clone(), alpha, f.aux_curve.quantile(1.0 - alpha, QuantileKind::Lower))
    }

    fn weight(&self, k: usize) -> f64 {
        self.folds[k].eval_rows.len() as f64 / self.n as f64
    }

    /// Plug-in value on fold `k` (nonincreasing in `alpha`).
    pub fn fold_plugin(&self, k: usize, alpha: f64) -> f64 {
        self.folds[k].eval_curve.value(alpha)
    }

    pub fn fold_estimate(&self, k: usize, alpha: f64, debias: bool) -> FoldEstimate {
        let f = &self.folds[k];
        let q_hat = f.aux_curve.quantile(1.0 - alpha, QuantileKind::Lower);
        let t = fold_terms(&f.eval_curve, &f.eval_pred, &f.eval_loss, q_hat, alpha);
        let correction = if debias { t.correction } else { 0.0 };
        FoldEstimate {
            k,
            size: f.eval_rows.len(),
            omega_k: t.plug_in + correction,
            sigma2_k: t.sigma2,
            plug_in_k: t.plug_in,
            correction_k: correction,
            q_hat_k: q_hat,
        }
    }

    fn aggregate(&self, alpha: f64, delta: f64, debias: bool) -> Result<WorstCaseEstimate> {
        check_alpha(alpha)?;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0,1), got {delta}")));
        }
        let folds: Vec<FoldEstimate> = (0..self.k()).map(|k| self.fold_estimate(k, alpha, debias)).collect();
        let omega = folds.iter().map(|f| self.weight(f.k) * f.omega_k).sum::<f64>();
        let sigma2 = folds.iter().map(|f| self.weight(f.k) * f.sigma2_k).sum::<f64>();
        let sigma = sigma2.max(0.0).sqrt();
        let half = two_sided_critical(delta) * sigma / (self.n as f64).sqrt();
        Ok(WorstCaseEstimate {
            alpha,
            delta,
            omega,
            sigma,
            ci_low: omega - half,
            ci_high: omega + half,
            n: self.n,
            k: self.k(),
            folds,
        })
    }

    pub fn estimate(&self, alpha: f64, delta: f64) -> Result<WorstCaseEstimate> {
        self.aggregate(alpha, delta, true)
    }

    /// Same as [`CrossFit::estimate`] with every correction term set to zero.
    pub fn estimate_plugin_only(&self, alpha: f64, delta: f64) -> Result<WorstCaseEstimate> {
        self.aggregate(alpha, delta, false)
    }

    /// Cross-fitted plug-in curve value at `alpha`.
    pub fn plugin_value(&self, alpha: f64) -> f64 {
        (0..self.k()).map(|k| self.weight(k) * self.fold_plugin(k, alpha)).sum()
    }

    /// Cross-fitted debiased value at `alpha`.
    pub fn debiased_value(&self, alpha: f64) -> f64 {
        (0..self.k()).map(|k| self.weight(k) * self.fold_estimate(k, alpha, true).omega_k).sum()
    }
}

pub fn estimate(ds: &Dataset, cfg: &EvalConfig) -> Result<WorstCaseEstimate> {
    CrossFit::fit(ds, cfg)?.estimate(cfg.alpha, cfg.delta)
}

pub fn estimate_plugin_only(ds: &Dataset, cfg: &EvalConfig) -> Result<WorstCaseEstimate> {
    CrossFit::fit(ds, cfg)?.estimate_plugin_only(cfg.alpha, cfg.delta)
}
