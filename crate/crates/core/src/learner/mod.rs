//! First-stage regression of the loss on the attributes.
//!
//! The fitted conditional-risk model `mu_hat(z)` approximates
//! `E[loss | Z = z]` by least squares on the auxiliary folds. Predictions of
//! fitted learners are clamped to the training loss range, which keeps them
//! nonnegative and bounded.

mod boost;
mod knn;

use serde::{Deserialize, Serialize};

pub use boost::{BoostParams, BoostedTrees};
pub use knn::{auto_neighbors, KnnRegressor};

use crate::cvar::{CvarCurve, QuantileKind};
use crate::data::{check_alpha, Dataset, LearnerKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct KnnParams {
    /// `None` selects `ceil(sqrt(|aux|))`.
    pub k_neighbors: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LearnerParams {
    pub knn: KnnParams,
    pub boost: BoostParams,
}

impl LearnerParams {
    pub fn validate(&self) -> Result<()> {
        if self.knn.k_neighbors == Some(0) {
            return Err(Error::InvalidArgument("k_neighbors must be >= 1".into()));
        }
        self.boost.validate()
    }

    pub fn knn(k: usize) -> Self {
        Self { knn: KnnParams { k_neighbors: Some(k) }, ..Default::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Fitted {
    Knn(KnnRegressor),
    Boosted(BoostedTrees),
    /// Row-aligned predictions supplied with the data.
    External(Vec<f64>),
}

/// A conditional-risk predictor without a quantile attached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Predictor {
    fitted: Fitted,
    dim: usize,
    /// Training loss range used to clamp predictions of fitted learners.
    clamp: (f64, f64),
}

impl Predictor {
    pub fn kind(&self) -> LearnerKind {
        match self.fitted {
            Fitted::Knn(_) => LearnerKind::Knn,
            Fitted::Boosted(_) => LearnerKind::BoostedStumps,
            Fitted::External(_) => LearnerKind::External,
        }
    }

    /// Wrap precomputed, row-aligned predictions.
    pub fn external(ds: &Dataset) -> Result<Self> {
        let mu = ds.external_mu().ok_or(Error::MissingExternalMu)?;
        Ok(Self { fitted: Fitted::External(mu.to_vec()), dim: ds.dim(), clamp: (f64::NEG_INFINITY, f64::INFINITY) })
    }

    /// Predict at an attribute vector. External predictors can only be
    /// queried by row (see [`Predictor::predict_row`]).
    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: z.len() });
        }
        let raw = match &self.fitted {
            Fitted::Knn(m) => m.predict(z),
            Fitted::Boosted(m) => m.predict(z),
            Fitted::External(_) => return Err(Error::ExternalNeedsIndex),
        };
        Ok(raw.clamp(self.clamp.0, self.clamp.1))
    }

    /// Predict for row `i` of `ds`.
    pub fn predict_row(&self, ds: &Dataset, i: usize) -> Result<f64> {
        match &self.fitted {
            Fitted::External(mu) => {
                mu.get(i).copied().ok_or(Error::ExternalIndexOutOfRange { index: i, len: mu.len() })
            }
            _ => {
                if i >= ds.len() {
                    return Err(Error::InvalidArgument(format!("row {i} out of range")));
                }
                self.predict(ds.z(i))
            }
        }
    }

    /// Predictions for the listed rows, in order.
    pub fn predict_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        match &self.fitted {
            Fitted::Knn(m) => {
                let queries: Vec<&[f64]> = rows.iter().map(|&i| ds.z(i)).collect();
                if let Some(q) = queries.iter().find(|q| q.len() != self.dim) {
                    return Err(Error::DimensionMismatch { expected: self.dim, found: q.len() });
                }
                Ok(m.predict_many(&queries).into_iter().map(|v| v.clamp(self.clamp.0, self.clamp.1)).collect())
            }
            _ => rows.iter().map(|&i| self.predict_row(ds, i)).collect(),
        }
    }
}

/// Fit the first-stage predictor on the rows `aux` of `ds`.
pub fn fit_predictor(ds: &Dataset, aux: &[usize], kind: LearnerKind, params: &LearnerParams) -> Result<Predictor> {
    if aux.is_empty() {
        return Err(Error::InvalidArgument("empty auxiliary sample".into()));
    }
    params.validate()?;
    let z: Vec<&[f64]> = aux.iter().map(|&i| ds.z(i)).collect();
    let y: Vec<f64> = aux.iter().map(|&i| ds.loss(i)).collect();
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let fitted = match kind {
        LearnerKind::Knn => {
            let k = params.knn.k_neighbors.unwrap_or_else(|| auto_neighbors(aux.len()));
            Fitted::Knn(KnnRegressor::fit(&z, &y, k)?)
        }
        LearnerKind::BoostedStumps => Fitted::Boosted(BoostedTrees::fit(&z, &y, &params.boost)?),
        LearnerKind::External => {
            return Err(Error::InvalidArgument("external models are taken from the mu_hat column, not fitted".into()))
        }
    };
    Ok(Predictor { fitted, dim: ds.dim(), clamp: (lo, hi) })
}

/// A fitted conditional-risk model together with the auxiliary-sample
/// `(1 - alpha)`-quantile `q_hat` of its predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskModel {
    predictor: Predictor,
    alpha: f64,
    q_hat: f64,
}

impl RiskModel {
    /// Attach the lower `(1 - alpha)`-quantile of `aux_predictions`.
    pub fn new(predictor: Predictor, aux_predictions: &[f64], alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let q_hat = CvarCurve::new(aux_predictions)?.quantile(1.0 - alpha, QuantileKind::Lower);
        Ok(Self { predictor, alpha, q_hat })
    }

    /// Use an explicitly supplied threshold.
    pub fn with_threshold(predictor: Predictor, alpha: f64, q_hat: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { predictor, alpha, q_hat })
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn kind(&self) -> LearnerKind {
        self.predictor.kind()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn q_hat(&self) -> f64 {
        self.q_hat
    }

    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        self.predictor.predict(z)
    }

    pub fn predict_row(&self, ds: &Dataset, i: usize) -> Result<f64> {
        self.predictor.predict_row(ds, i)
    }

    pub fn predict_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        self.predictor.predict_rows(ds, rows)
    }
}

/// Fit on `aux` (or wrap `mu_hat` for `LearnerKind::External`) and set
/// `q_hat` from the auxiliary predictions.
pub fn fit_conditional_risk(
    ds: &Dataset,
    aux: &[usize],
    kind: LearnerKind,
    params: &LearnerParams,
    alpha: f64,
) -> Result<RiskModel> {
    if aux.is_empty() {
        return Err(Error::InvalidArgument("empty auxiliary sample".into()));
    }
    let predictor = match kind {
        LearnerKind::External => Predictor::external(ds)?,
        _ => fit_predictor(ds, aux, kind, params)?,
    };
    let aux_pred = predictor.predict_rows(ds, aux)?;
    RiskModel::new(predictor, &aux_pred, alpha)
}

/// Mean squared error of the predictor on the rows `fold`.
pub fn mse_on(predictor: &Predictor, ds: &Dataset, fold: &[usize]) -> Result<f64> {
    if fold.is_empty() {
        return Err(Error::InvalidArgument("empty fold".into()));
    }
    let pred = predictor.predict_rows(ds, fold)?;
    Ok(mse_of(&pred, fold.iter().map(|&i| ds.loss(i))))
}

pub(crate) fn mse_of(pred: &[f64], losses: impl Iterator<Item = f64>) -> f64 {
    let n = pred.len() as f64;
    pred.iter().zip(losses).map(|(p, l)| (l - p) * (l - p)).sum::<f64>() / n
}

/// In-sample MSE of the same learner refit directly on `fold`: a computable
/// stand-in for the smallest MSE attainable on the fold within the class.
pub fn min_class_mse(ds: &Dataset, fold: &[usize], kind: LearnerKind, params: &LearnerParams) -> Result<f64> {
    if fold.is_empty() {
        return Err(Error::InvalidArgument("empty fold".into()));
    }
    match kind {
        // An external model has no class to refit; its own fit is the reference.
        LearnerKind::External => mse_on(&Predictor::external(ds)?, ds, fold),
        _ => {
            // An explicit k may exceed a small fold; cap it at the fold size.
            let mut params = *params;
            if let Some(k) = params.knn.k_neighbors {
                params.knn.k_neighbors = Some(k.min(fold.len()));
            }
            let p = fit_predictor(ds, fold, kind, &params)?;
            mse_on(&p, ds, fold)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_data(n: usize) -> Dataset {
        let z: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        let l: Vec<f64> = z.iter().map(|r| r[0]).collect();
        Dataset::from_columns(&l, &z, None).unwrap()
    }

    #[test]
    fn knn_one_reproduces_training_losses() {
        let ds = line_data(30);
        let aux: Vec<usize> = (0..30).collect();
        let m = fit_conditional_risk(&ds, &aux, LearnerKind::Knn, &LearnerParams::knn(1), 0.3).unwrap();
        for &i in &aux {
            assert_eq!(m.predict_row(&ds, i).unwrap(), ds.loss(i));
        }
    }

    #[test]
    fn constant_losses_give_constant_predictions() {
        let z: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64).sin(), i as f64]).collect();
        let l = vec![0.7; 40];
        let ds = Dataset::from_columns(&l, &z, None).unwrap();
        let aux: Vec<usize> = (0..40).collect();
        for kind in [LearnerKind::Knn, LearnerKind::BoostedStumps] {
            let m = fit_conditional_risk(&ds, &aux, kind, &LearnerParams::default(), 0.5).unwrap();
            for q in [[0.0, 0.0], [5.0, -100.0]] {
                assert_eq!(m.predict(&q).unwrap(), 0.7);
            }
        }
    }

    #[test]
    fn boosted_step_and_predict() {
        let z: Vec<Vec<f64>> = (0..400).map(|i| vec![(i as f64 - 200.0) / 50.0]).collect();
        let l: Vec<f64> = z.iter().map(|r| if r[0] > 0.0 { 1.0 } else { 0.0 }).collect();
        let ds = Dataset::from_columns(&l, &z, None).unwrap();
        let aux: Vec<usize> = (0..400).collect();
        let params = LearnerParams {
            boost: BoostParams { rounds: 50, learning_rate: 0.3, ..Default::default() },
            ..Default::default()
        };
        let p = fit_predictor(&ds, &aux, LearnerKind::BoostedStumps, &params).unwrap();
        assert!(mse_on(&p, &ds, &aux).unwrap() <= 0.01);
        assert!((p.predict(&[2.0]).unwrap() - 1.0).abs() < 0.05);
        assert!(min_class_mse(&ds, &aux, LearnerKind::BoostedStumps, &params).unwrap() <= 0.01);
    }

    #[test]
    fn mse_examples() {
        let ds = Dataset::from_columns(&[0.0, 2.0], &[vec![0.0], vec![0.0]], Some(vec![1.0, 1.0])).unwrap();
        let ext = Predictor::external(&ds).unwrap();
        assert_eq!(mse_on(&ext, &ds, &[0, 1]).unwrap(), 1.0);
        for kind in [LearnerKind::Knn, LearnerKind::BoostedStumps] {
            assert_eq!(min_class_mse(&ds, &[0, 1], kind, &LearnerParams::default()).unwrap(), 1.0);
            assert_eq!(min_class_mse(&ds, &[0, 1], kind, &LearnerParams::knn(1)).unwrap(), 1.0);
        }
        let perfect = ds.clone().with_external_mu(vec![0.0, 2.0]).unwrap();
        assert_eq!(mse_on(&Predictor::external(&perfect).unwrap(), &perfect, &[0, 1]).unwrap(), 0.0);
        let flat = Dataset::from_columns(&[3.0; 5], &vec![vec![1.0]; 5], None).unwrap();
        assert_eq!(min_class_mse(&flat, &[0, 1, 2, 3, 4], LearnerKind::Knn, &LearnerParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn prediction_errors() {
        let ds = line_data(10).with_external_mu(vec![0.5; 10]).unwrap();
        let ext = Predictor::external(&ds).unwrap();
        assert_eq!(ext.predict_row(&ds, 3).unwrap(), 0.5);
        assert!(matches!(ext.predict_row(&ds, 10), Err(Error::ExternalIndexOutOfRange { .. })));
        assert!(matches!(ext.predict(&[0.0]), Err(Error::ExternalNeedsIndex)));
        let knn = fit_predictor(&ds, &[0, 1, 2], LearnerKind::Knn, &LearnerParams::default()).unwrap();
        assert!(matches!(knn.predict(&[0.0, 1.0]), Err(Error::DimensionMismatch { expected: 1, found: 2 })));
        assert!(matches!(
            fit_predictor(&ds, &[0, 1], LearnerKind::Knn, &LearnerParams::knn(3)),
            Err(Error::TooManyNeighbors { k: 3, n: 2 })
        ));
        assert!(fit_predictor(&ds, &[], LearnerKind::Knn, &LearnerParams::default()).is_err());
        assert!(fit_predictor(&ds, &[0], LearnerKind::External, &LearnerParams::default()).is_err());
    }

    #[test]
    fn q_hat_is_lower_quantile_of_aux_predictions() {
        let ds = line_data(10);
        let aux: Vec<usize> = (0..10).collect();
        let m = fit_conditional_risk(&ds, &aux, LearnerKind::Knn, &LearnerParams::knn(1), 0.3).unwrap();
        // predictions are 0.0..0.9; lower 0.7-quantile is the 7th smallest
        assert_eq!(m.q_hat(), 0.6);
    }

    #[test]
    fn knn_full_k_is_aux_mean() {
        let ds = line_data(12);
        let aux: Vec<usize> = (0..12).collect();
        let p = fit_predictor(&ds, &aux, LearnerKind::Knn, &LearnerParams::knn(12)).unwrap();
        let mean = ds.losses().iter().sum::<f64>() / 12.0;
        for q in [-4.0, 0.3, 17.0] {
            assert!((p.predict(&[q]).unwrap() - mean).abs() < 1e-15);
        }
    }

    fn random_data() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (10usize..80).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..5.0, n),
                prop::collection::vec(-2.0f64..2.0, n),
                prop::collection::vec(-2.0f64..2.0, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn boosting_training_mse_nonincreasing((l, a, b) in random_data()) {
            let z: Vec<Vec<f64>> = a.iter().zip(&b).map(|(x, y)| vec![*x, *y]).collect();
            let rows: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
            let params = BoostParams { rounds: 30, learning_rate: 0.5, max_depth: 2, n_bins: 8 };
            let m = BoostedTrees::fit(&rows, &l, &params).unwrap();
            let mut prev = f64::INFINITY;
            for r in 0..=30 {
                let mse = rows.iter().zip(&l).map(|(z, t)| (m.predict_truncated(z, r) - t).powi(2)).sum::<f64>();
                prop_assert!(mse <= prev * (1.0 + 1e-12) + 1e-12);
                prev = mse;
            }
        }

        #[test]
        fn fitting_is_deterministic((l, a, b) in random_data()) {
            let z: Vec<Vec<f64>> = a.iter().zip(&b).map(|(x, y)| vec![*x, *y]).collect();
            let ds = Dataset::from_columns(&l, &z, None).unwrap();
            let aux: Vec<usize> = (0..l.len()).collect();
            for kind in [LearnerKind::Knn, LearnerKind::BoostedStumps] {
                let p1 = fit_predictor(&ds, &aux, kind, &LearnerParams::default()).unwrap();
                let p2 = fit_predictor(&ds, &aux, kind, &LearnerParams::default()).unwrap();
                let (v1, v2) = (p1.predict_rows(&ds, &aux).unwrap(), p2.predict_rows(&ds, &aux).unwrap());
                prop_assert!(v1.iter().zip(&v2).all(|(x, y)| x.to_bits() == y.to_bits()));
                let (lo, hi) = (l.iter().copied().fold(f64::INFINITY, f64::min), l.iter().copied().fold(0.0, f64::max));
                prop_assert!(v1.iter().all(|v| *v >= lo && *v <= hi));
            }
        }
    }
}
