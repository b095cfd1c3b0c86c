//! Exact empirical worst-case (CVaR) evaluation.
//!
//! For a sample `v` of size `n`, the worst-case average over subpopulations
//! of mass at least `alpha` is
//!
//! ```text
//! W_alpha(v) = inf_eta { eta + (1/(alpha n)) sum_i (v_i - eta)_+ }
//!            = (1/(alpha n)) [ sum of the floor(alpha n) largest values
//!                              + (alpha n - floor(alpha n)) * next largest ]
//! ```
//!
//! The sorted-tail closed form is used as the definition; it equals the dual
//! infimum with or without ties at the quantile.

use serde::{Deserialize, Serialize};

use crate::data::check_alpha;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileKind {
    /// `inf { t : F(t) >= level }`
    Lower,
    /// `inf { t : F(t) > level }`
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCvarResult {
    pub value: f64,
    /// Lower empirical (1 - alpha)-quantile; minimizes the dual objective.
    pub eta_star: f64,
    /// Upper end of the interval of dual minimizers.
    pub eta_upper: f64,
}

/// Snap `x` to the nearest integer when it is within a few ulps of it, so
/// that e.g. `0.3 * 10.0 = 3.0000000000000004` counts as exactly 3.
pub(crate) fn snap_count(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 8.0 * f64::EPSILON * x.abs().max(1.0) {
        r
    } else {
        x
    }
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("values must be finite".into()));
    }
    Ok(())
}

fn sorted_ascending(values: &[f64]) -> Vec<f64> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Index into an ascending sort for the lower/upper empirical quantile.
fn quantile_index(n: usize, level: f64, kind: QuantileKind) -> usize {
    let pn = snap_count(level * n as f64);
    let i = match kind {
        // smallest i with i/n >= level
        QuantileKind::Lower => (pn.ceil() as usize).max(1),
        // smallest i with i/n > level
        QuantileKind::Upper => pn.floor() as usize + 1,
    };
    i.min(n) - 1
}

pub fn empirical_quantile(values: &[f64], level: f64, kind: QuantileKind) -> Result<f64> {
    check_values(values)?;
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidArgument(format!("quantile level must lie in [0,1], got {level}")));
    }
    let s = sorted_ascending(values);
    Ok(s[quantile_index(s.len(), level, kind)])
}

/// The dual objective `eta + mean[(v - eta)_+] / alpha`.
pub fn dual_objective(values: &[f64], alpha: f64, eta: f64) -> f64 {
    let excess: f64 = values.iter().map(|&v| (v - eta).max(0.0)).sum();
    eta + excess / (alpha * values.len() as f64)
}

/// Sorted sample with prefix sums: evaluates `W_alpha` for many `alpha`
/// in O(1) each after an O(n log n) setup.
#[derive(Debug, Clone)]
pub struct CvarCurve {
    ascending: Vec<f64>,
    /// `top_sums[j]` is the sum of the `j` largest values.
    top_sums: Vec<f64>,
    mean: f64,
}

impl CvarCurve {
    pub fn new(values: &[f64]) -> Result<Self> {
        check_values(values)?;
        let ascending = sorted_ascending(values);
        let mut top_sums = Vec::with_capacity(values.len() + 1);
        let mut acc = 0.0;
        top_sums.push(0.0);
        for &v in ascending.iter().rev() {
            acc += v;
            top_sums.push(acc);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Ok(Self { ascending, top_sums, mean })
    }

    pub fn len(&self) -> usize {
        self.ascending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ascending.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn max(&self) -> f64 {
        *self.ascending.last().unwrap()
    }

    pub fn min(&self) -> f64 {
        self.ascending[0]
    }

    pub fn quantile(&self, level: f64, kind: QuantileKind) -> f64 {
        self.ascending[quantile_index(self.len(), level, kind)]
    }

    /// `W_alpha` of the stored sample. `alpha` must lie in (0, 1].
    pub fn value(&self, alpha: f64) -> f64 {
        if alpha >= 1.0 {
            return self.mean;
        }
        let n = self.len();
        let m = snap_count(alpha * n as f64);
        let whole = m.floor() as usize;
        let frac = m - whole as f64;
        let deepest = self.ascending[n - m.ceil() as usize];
        if deepest == self.max() {
            // Flat tail: avoid rounding in the prefix sums.
            return deepest;
        }
        let mut tail = self.top_sums[whole];
        if frac > 0.0 {
            // `whole < n` here since m < n.
            tail += frac * self.ascending[n - 1 - whole];
        }
        tail / m
    }

    pub fn evaluate(&self, alpha: f64) -> Result<EmpiricalCvarResult> {
        check_alpha(alpha)?;
        Ok(EmpiricalCvarResult {
            value: self.value(alpha),
            eta_star: self.quantile(1.0 - alpha, QuantileKind::Lower),
            eta_upper: self.quantile(1.0 - alpha, QuantileKind::Upper),
        })
    }
}

pub fn empirical_cvar(values: &[f64], alpha: f64) -> Result<EmpiricalCvarResult> {
    check_alpha(alpha)?;
    CvarCurve::new(values)?.evaluate(alpha)
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section minimization of a convex function on `[lo, hi]`.
pub(crate) fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (lo + hi);
    let fm = f(mid);
    [(x1, f1), (x2, f2), (mid, fm)].into_iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap()
}

/// Higher-order CVaR: `inf_eta { eta + (mean[(v - eta)_+^k])^(1/k) / alpha }`.
///
/// `k = 1` is the ordinary worst-case value. For `k > 1` the convex
/// objective is minimized by golden-section search over `[min v, max v]`
/// to an absolute tolerance of `1e-10` in `eta`.
pub fn higher_order_cvar(values: &[f64], alpha: f64, k: f64) -> Result<f64> {
    check_values(values)?;
    check_alpha(alpha)?;
    if !k.is_finite() || k < 1.0 {
        return Err(Error::InvalidArgument(format!("order k must be finite and >= 1, got {k}")));
    }
    if k == 1.0 {
        return Ok(empirical_cvar(values, alpha)?.value);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(lo);
    }
    let n = values.len() as f64;
    let objective = |eta: f64| {
        let moment: f64 = values.iter().map(|&v| (v - eta).max(0.0).powf(k)).sum::<f64>() / n;
        eta + moment.powf(1.0 / k) / alpha
    };
    let (_, best) = golden_section(objective, lo, hi, 1e-10);
    // At eta = max v the objective is exactly max v.
    Ok(best.min(hi))
}

/// Discrete probability measure over subpopulation sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaMixture {
    atoms: Vec<(f64, f64)>,
}

impl AlphaMixture {
    /// `atoms` are `(alpha, weight)` pairs; weights must be positive and sum to one.
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidArgument("mixture has no atoms".into()));
        }
        for &(a, w) in &atoms {
            check_alpha(a)?;
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidArgument(format!("mixture weight must be positive, got {w}")));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { atoms })
    }

    /// Point mass at a single `alpha`.
    pub fn dirac(alpha: f64) -> Result<Self> {
        Self::new(vec![(alpha, 1.0)])
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }
}

/// `sum_i weight_i * W_{alpha_i}(v)`.
pub fn generalized_worst_case(values: &[f64], mixture: &AlphaMixture) -> Result<f64> {
    let curve = CvarCurve::new(values)?;
    Ok(mixture.atoms().iter().map(|&(a, w)| w * curve.value(a)).sum())
}
