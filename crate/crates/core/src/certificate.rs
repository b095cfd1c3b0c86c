//! Certificate of robustness: the smallest subpopulation size whose
//! estimated worst-case loss stays at or below an acceptable threshold.
//!
//! The plug-in curve `alpha -> W_alpha(mu_hat)` is nonincreasing, so the
//! crossing point is located by bisection on `[alpha_lo, 1]`.

use serde::{Deserialize, Serialize, Serializer};

use crate::cvar::{CvarCurve, QuantileKind};
use crate::data::{Dataset, EvalConfig};
use crate::error::{Error, Result};
use crate::estimator::CrossFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CertifyMode {
    /// Bisection on each fold's plug-in curve; the certificate is the mean
    /// of the per-fold crossing points.
    #[default]
    PluginPerFold,
    /// Bracket with the cross-fitted plug-in curve, then refine on the
    /// cross-fitted debiased curve.
    DebiasedCurve,
}

impl std::str::FromStr for CertifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plugin_per_fold" | "plugin-per-fold" | "plugin" => Ok(Self::PluginPerFold),
            "debiased_curve" | "debiased-curve" | "debiased" => Ok(Self::DebiasedCurve),
            other => Err(Error::InvalidArgument(format!("unknown certify mode `{other}`"))),
        }
    }
}

/// Outcome of one bisection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Crossing {
    /// The curve crosses the threshold inside the bracket; the value is the
    /// right end of the final bracket (curve <= threshold there).
    Interior(f64),
    /// The curve is already acceptable at `alpha_lo`.
    Boundary(f64),
    /// The curve exceeds the threshold even at `alpha = 1`.
    Infeasible,
}

impl Crossing {
    pub fn alpha(&self) -> Option<f64> {
        match *self {
            Crossing::Interior(a) | Crossing::Boundary(a) => Some(a),
            Crossing::Infeasible => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// Fold whose curve was probed; `None` for cross-fitted curves.
    pub fold: Option<usize>,
    pub alpha: f64,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaHat {
    Value(f64),
    Infeasible,
}

impl Serialize for AlphaHat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            AlphaHat::Value(v) => s.serialize_f64(v),
            AlphaHat::Infeasible => s.serialize_str("infeasible"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub threshold: f64,
    pub alpha_hat: AlphaHat,
    /// `alpha_hat` equals `alpha_lo` because the whole bracket is acceptable.
    pub boundary: bool,
    pub mode: CertifyMode,
    pub alpha_lo: f64,
    pub tol: f64,
    /// Per-fold crossing points (`None` = infeasible on that fold).
    pub per_fold_alpha: Vec<Option<f64>>,
    /// Crossing of the cross-fitted plug-in curve, used to bracket the
    /// debiased refinement.
    pub plugin_alpha: Option<f64>,
    pub trace: Vec<Probe>,
    pub notes: Vec<String>,
}

impl Certificate {
    pub fn is_feasible(&self) -> bool {
        matches!(self.alpha_hat, AlphaHat::Value(_))
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.alpha_hat {
            AlphaHat::Value(a) => Some(a),
            AlphaHat::Infeasible => None,
        }
    }
}

/// Default lower end of the search bracket, `max(10/n, 0.01)`. Below about
/// ten tail points the empirical worst case is dominated by single observations.
pub fn default_alpha_lo(n: usize) -> f64 {
    (10.0 / n as f64).max(0.01)
}

fn check_bracket(alpha_lo: f64, tol: f64, threshold: f64) -> Result<()> {
    if !(alpha_lo > 0.0 && alpha_lo < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_lo must lie in (0,1), got {alpha_lo}")));
    }
    if !tol.is_finite() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument("threshold must be finite".into()));
    }
    Ok(())
}

/// Bisection for `inf { alpha in [alpha_lo, 1] : curve(alpha) <= threshold }`
/// on a nonincreasing curve. Every evaluation is appended to `trace`.
pub fn bisect_curve<F: FnMut(f64) -> f64>(
    mut curve: F,
    threshold: f64,
    alpha_lo: f64,
    tol: f64,
    fold: Option<usize>,
    trace: &mut Vec<Probe>,
) -> Result<Crossing> {
    check_bracket(alpha_lo, tol, threshold)?;
    let mut probe = |alpha: f64, trace: &mut Vec<Probe>| {
        let w = curve(alpha);
        trace.push(Probe { fold, alpha, w });
        w
    };
    if probe(1.0, trace) > threshold {
        return Ok(Crossing::Infeasible);
    }
    if probe(alpha_lo, trace) <= threshold {
        return Ok(Crossing::Boundary(alpha_lo));
    }
    Ok(Crossing::Interior(bisect_bracket(probe, threshold, alpha_lo, 1.0, tol, trace)))
}

/// Shrink `[bad, good]` (curve > threshold at `bad`, <= at `good`) to width <= tol.
fn bisect_bracket<F: FnMut(f64, &mut Vec<Probe>) -> f64>(
    mut probe: F,
    threshold: f64,
    mut bad: f64,
    mut good: f64,
    tol: f64,
    trace: &mut Vec<Probe>,
) -> f64 {
    while good - bad > tol {
        let mid = 0.5 * (bad + good);
        if probe(mid, trace) <= threshold {
            good = mid;
        } else {
            bad = mid;
        }
    }
    good
}

/// Certificate for a single sample of `mu_hat` values (no cross-fitting).
pub fn certify_curve(curve: &CvarCurve, threshold: f64, alpha_lo: f64, tol: f64) -> Result<Certificate> {
    let mut trace = Vec::new();
    let c = bisect_curve(|a| curve.value(a), threshold, alpha_lo, tol, None, &mut trace)?;
    Ok(Certificate {
        threshold,
        alpha_hat: c.alpha().map_or(AlphaHat::Infeasible, AlphaHat::Value),
        boundary: matches!(c, Crossing::Boundary(_)),
        mode: CertifyMode::PluginPerFold,
        alpha_lo,
        tol,
        per_fold_alpha: vec![c.alpha()],
        plugin_alpha: c.alpha(),
        trace,
        notes: Vec::new(),
    })
}

/// Certificate from already-fitted fold models.
pub fn certify_fitted(
    cf: &CrossFit,
    threshold: f64,
    alpha_lo: f64,
    tol: f64,
    mode: CertifyMode,
) -> Result<Certificate> {
    check_bracket(alpha_lo, tol, threshold)?;
    let mut trace = Vec::new();
    let mut notes = Vec::new();
    let mut per_fold = Vec::with_capacity(cf.k());
    for k in 0..cf.k() {
        let c = bisect_curve(|a| cf.fold_plugin(k, a), threshold, alpha_lo, tol, Some(k), &mut trace)?;
        per_fold.push(c);
    }
    let per_fold_alpha: Vec<Option<f64>> = per_fold.iter().map(Crossing::alpha).collect();

    let (alpha_hat, boundary, plugin_alpha) = match mode {
        CertifyMode::PluginPerFold => {
            if per_fold_alpha.iter().any(Option::is_none) {
                (AlphaHat::Infeasible, false, None)
            } else {
                let mean = per_fold_alpha.iter().flatten().sum::<f64>() / per_fold_alpha.len() as f64;
                let all_boundary = per_fold.iter().all(|c| matches!(c, Crossing::Boundary(_)));
                (AlphaHat::Value(mean), all_boundary, Some(mean))
            }
        }
        CertifyMode::DebiasedCurve => {
            let plugin = bisect_curve(|a| cf.plugin_value(a), threshold, alpha_lo, tol, None, &mut trace)?;
            let (hat, boundary) = refine_debiased(cf, threshold, alpha_lo, tol, plugin, &mut trace);
            if let (Some(p), AlphaHat::Value(d)) = (plugin.alpha(), hat) {
                if (p - d).abs() > tol {
                    notes.push(format!("debiased crossing {d} differs from plug-in crossing {p} by more than tol"));
                }
            }
            if plugin.alpha().is_some() != matches!(hat, AlphaHat::Value(_)) {
                notes.push("plug-in and debiased curves disagree on feasibility".to_string());
            }
            (hat, boundary, plugin.alpha())
        }
    };
    Ok(Certificate { threshold, alpha_hat, boundary, mode, alpha_lo, tol, per_fold_alpha, plugin_alpha, trace, notes })
}

fn refine_debiased(
    cf: &CrossFit,
    threshold: f64,
    alpha_lo: f64,
    tol: f64,
    plugin: Crossing,
    trace: &mut Vec<Probe>,
) -> (AlphaHat, bool) {
    let probe = |alpha: f64, trace: &mut Vec<Probe>| {
        let w = cf.debiased_value(alpha);
        trace.push(Probe { fold: None, alpha, w });
        w
    };
    if probe(1.0, trace) > threshold {
        return (AlphaHat::Infeasible, false);
    }
    if probe(alpha_lo, trace) <= threshold {
        return (AlphaHat::Value(alpha_lo), true);
    }
    let start = match plugin {
        Crossing::Interior(a) | Crossing::Boundary(a) => a,
        Crossing::Infeasible => 1.0,
    };
    // Grow a bracket around the plug-in crossing until it straddles the
    // debiased crossing; alpha_lo (bad) and 1 (good) always do.
    let mut width = tol;
    let mut bad = (start - width).max(alpha_lo);
    while bad > alpha_lo && probe(bad, trace) <= threshold {
        width *= 2.0;
        bad = (start - width).max(alpha_lo);
    }
    let mut width = tol;
    let mut good = (start + width).min(1.0);
    while good < 1.0 && probe(good, trace) > threshold {
        width *= 2.0;
        good = (start + width).min(1.0);
    }
    (AlphaHat::Value(bisect_bracket(probe, threshold, bad, good, tol, trace)), false)
}

/// Fit the fold models once and certify.
pub fn certify(
    ds: &Dataset,
    cfg: &EvalConfig,
    threshold: f64,
    alpha_lo: f64,
    tol: f64,
    mode: CertifyMode,
) -> Result<Certificate> {
    check_bracket(alpha_lo, tol, threshold)?;
    let cf = CrossFit::fit(ds, cfg)?;
    certify_fitted(&cf, threshold, alpha_lo, tol, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ErrorBound {
    /// Bound on `|alpha_true / alpha_hat - 1|`.
    Radius(f64),
    /// The positive-part mean in the denominator is zero.
    Vacuous,
}

/// Relative-error radius for a certificate:
/// `U / mean[(mu_hat - q_{1 - min(alpha_floor, alpha_hat)})_+]` over the
/// evaluation-fold predictions, with `q` the lower empirical quantile.
pub fn certificate_error_bound(mu_fold: &[f64], alpha_hat: f64, alpha_floor: f64, u_delta: f64) -> Result<ErrorBound> {
    if !(alpha_floor > 0.0 && alpha_floor <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_floor must lie in (0,1], got {alpha_floor}")));
    }
    if !(alpha_hat > 0.0 && alpha_hat <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_hat must lie in (0,1], got {alpha_hat}")));
    }
    if !u_delta.is_finite() || u_delta < 0.0 {
        return Err(Error::InvalidArgument(format!("U(delta) must be finite and >= 0, got {u_delta}")));
    }
    if u_delta == 0.0 {
        return Ok(ErrorBound::Radius(0.0));
    }
    let curve = CvarCurve::new(mu_fold)?;
    let level = alpha_floor.min(alpha_hat);
    let q = curve.quantile(1.0 - level, QuantileKind::Lower);
    let denom = mu_fold.iter().map(|&m| (m - q).max(0.0)).sum::<f64>() / mu_fold.len() as f64;
    if denom > 0.0 {
        Ok(ErrorBound::Radius(u_delta / denom))
    } else {
        Ok(ErrorBound::Vacuous)
    }
}
