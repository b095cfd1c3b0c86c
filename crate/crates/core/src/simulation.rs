//! Synthetic classification benchmark with a rare, label-flipped group.
//!
//! Two unit vectors `theta` (the model) and `theta0` (the truth) are drawn
//! from the seed. Covariates are `X ~ N(0, I_d)`, the label is
//! `sgn(X . theta0)` when `X[0] <= clip` and flipped otherwise, the loss is
//! the hinge loss `[1 - Y theta . X]_+`, and `X[0]` is the only attribute.
//! Rows beyond the clip point (about 5% at the default 1.645) are the group
//! on which the model fails.
//!
//! Random streams: the problem vectors, each data replicate and each
//! oracle block use separate ChaCha8 streams of the same seed, so results
//! do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvar::{CvarCurve, QuantileKind};
use crate::data::{check_alpha, Dataset, LossSample};
use crate::error::{Error, Result};

const DATA_STREAM: u64 = 1 << 48;
const ORACLE_STREAM: u64 = 2 << 48;
const ORACLE_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub d: usize,
    pub n: usize,
    /// Selects the problem instance (`theta`, `theta0`).
    pub seed: u64,
    /// Selects an independent data draw for the same problem instance.
    pub replicate: u64,
    pub clip: f64,
    pub alpha: f64,
    pub outer: usize,
    pub inner: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { d: 5, n: 1000, seed: 0, replicate: 0, clip: 1.645, alpha: 0.3, outer: 20_000, inner: 5_000 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidArgument(format!("d must be >= 2, got {}", self.d)));
        }
        if self.n < 1 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        if self.outer < 1 || self.inner < 1 {
            return Err(Error::InvalidArgument("oracle sizes must be >= 1".into()));
        }
        if !self.clip.is_finite() {
            return Err(Error::InvalidArgument("clip must be finite".into()));
        }
        check_alpha(self.alpha)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// The fixed model `theta` and truth `theta0` for this seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub theta: Vec<f64>,
    pub theta0: Vec<f64>,
    pub clip: f64,
}

impl Problem {
    pub fn from_config(cfg: &SimConfig) -> Self {
        let mut rng = rng_for(cfg.seed, 0);
        let theta = unit_vector(&mut rng, cfg.d);
        let theta0 = unit_vector(&mut rng, cfg.d);
        Self { theta, theta0, clip: cfg.clip }
    }

    /// Hinge loss at `x` given the projections `x . theta` and `x . theta0`.
    fn loss(&self, x0: f64, proj: f64, proj0: f64) -> f64 {
        let sign = if proj0 >= 0.0 { 1.0 } else { -1.0 };
        let y = if x0 <= self.clip { sign } else { -sign };
        (1.0 - y * proj).max(0.0)
    }
}

pub fn simulate_dataset(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let problem = Problem::from_config(cfg);
    let mut rng = rng_for(cfg.seed, DATA_STREAM | cfg.replicate);
    let mut x = vec![0.0; cfg.d];
    let samples = (0..cfg.n)
        .map(|_| {
            x.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let proj = dot(&x, &problem.theta);
            let proj0 = dot(&x, &problem.theta0);
            LossSample { loss: problem.loss(x[0], proj, proj0), z: vec![x[0]] }
        })
        .collect();
    Dataset::new(samples, None)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    /// Combined Monte-Carlo standard error of `value`.
    pub stderr: f64,
    /// Standard error from sampling `outer` attribute values.
    pub outer_stderr: f64,
    /// Standard error from estimating each conditional risk with `inner` draws.
    pub inner_stderr: f64,
    /// Ranks outer draws by the first half of their inner draws and averages
    /// the second half over the top `alpha` share. Biased low where `value`
    /// is biased high, so the two bracket the truth up to Monte-Carlo error.
    /// `None` when `inner < 2`.
    pub split_value: Option<f64>,
    /// Mean of the conditional-risk estimates (the overall mean loss).
    pub mean_loss: f64,
    pub alpha: f64,
    pub outer: usize,
    pub inner: usize,
}

/// Nested Monte Carlo for the true worst-case value: draw `outer` values of
/// `X[0]`, estimate the conditional risk at each by averaging the loss over
/// `inner` draws of the remaining coordinates, then take the empirical
/// worst case of those estimates at `cfg.alpha`.
pub fn oracle_true_w(cfg: &SimConfig) -> Result<OracleResult> {
    cfg.validate()?;
    let problem = Problem::from_config(cfg);
    let blocks = cfg.outer.div_ceil(ORACLE_BLOCK);
    let per_block: Vec<Vec<InnerStats>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(cfg.seed, ORACLE_STREAM | b as u64);
            let count = ORACLE_BLOCK.min(cfg.outer - b * ORACLE_BLOCK);
            (0..count).map(|_| conditional_risk(&problem, &mut rng, cfg.inner)).collect()
        })
        .collect();
    let stats: Vec<InnerStats> = per_block.into_iter().flatten().collect();
    let mu: Vec<f64> = stats.iter().map(|s| s.mean).collect();
    let var: Vec<f64> = stats.iter().map(|s| s.var).collect();

    let alpha = cfg.alpha;
    let curve = CvarCurve::new(&mu)?;
    let value = curve.value(alpha);
    let eta = if alpha >= 1.0 { f64::NEG_INFINITY } else { curve.quantile(1.0 - alpha, QuantileKind::Lower) };
    let excess: Vec<f64> = mu.iter().map(|&m| if alpha >= 1.0 { m } else { (m - eta).max(0.0) }).collect();
    let outer_var = crate::estimator::pop_variance(excess.iter().copied()) / (alpha * alpha);
    let outer_stderr = (outer_var / cfg.outer as f64).sqrt();
    let tail: Vec<f64> = mu.iter().zip(&var).filter(|(m, _)| **m >= eta).map(|(_, v)| *v).collect();
    let tail_var = tail.iter().sum::<f64>() / tail.len() as f64;
    let inner_stderr = (tail_var / (cfg.inner as f64 * alpha * cfg.outer as f64)).sqrt();
    Ok(OracleResult {
        value,
        stderr: (outer_stderr.powi(2) + inner_stderr.powi(2)).sqrt(),
        outer_stderr,
        inner_stderr,
        split_value: (cfg.inner >= 2).then(|| split_tail_mean(&stats, alpha)),
        mean_loss: curve.mean(),
        alpha,
        outer: cfg.outer,
        inner: cfg.inner,
    })
}

struct InnerStats {
    mean: f64,
    /// Sample variance of the loss over the inner draws.
    var: f64,
    first_half: f64,
    second_half: f64,
}

/// One outer draw: loss statistics over `inner` draws of the non-attribute
/// coordinates.
fn conditional_risk(problem: &Problem, rng: &mut ChaCha8Rng, inner: usize) -> InnerStats {
    let x0: f64 = rng.sample(StandardNormal);
    let base = x0 * problem.theta[0];
    let base0 = x0 * problem.theta0[0];
    let half = inner / 2;
    let (mut mean, mut m2, mut first_sum) = (0.0, 0.0, 0.0);
    for i in 0..inner {
        let (mut proj, mut proj0) = (base, base0);
        for (t, t0) in problem.theta[1..].iter().zip(&problem.theta0[1..]) {
            let x: f64 = rng.sample(StandardNormal);
            proj += t * x;
            proj0 += t0 * x;
        }
        let l = problem.loss(x0, proj, proj0);
        if i < half {
            first_sum += l;
        }
        let delta = l - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (l - mean);
    }
    let var = if inner > 1 { m2 / (inner - 1) as f64 } else { 0.0 };
    let first_half = if half > 0 { first_sum / half as f64 } else { mean };
    let second_half = if inner > half { (mean * inner as f64 - first_sum) / (inner - half) as f64 } else { mean };
    InnerStats { mean, var, first_half, second_half }
}

fn split_tail_mean(stats: &[InnerStats], alpha: f64) -> f64 {
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| stats[b].first_half.total_cmp(&stats[a].first_half).then(a.cmp(&b)));
    let total = crate::cvar::snap_count(alpha * stats.len() as f64);
    let mut mass = total;
    let mut acc = 0.0;
    for i in order {
        let w = mass.min(1.0);
        if w <= 0.0 {
            break;
        }
        acc += w * stats[i].second_half;
        mass -= w;
    }
    acc / total
}

/// Spread of estimation errors over repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub runs: usize,
    pub mean_abs: f64,
    pub median_abs: f64,
    /// Sample standard deviation of the absolute errors.
    pub sd: f64,
    /// `sd / sqrt(runs)`.
    pub se: f64,
}

impl ErrorSummary {
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() || errors.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidArgument("errors must be a nonempty list of finite values".into()));
        }
        let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let runs = abs.len();
        let mean_abs = abs.iter().sum::<f64>() / runs as f64;
        let median_abs = if runs % 2 == 1 { abs[runs / 2] } else { 0.5 * (abs[runs / 2 - 1] + abs[runs / 2]) };
        let sd = if runs > 1 {
            (abs.iter().map(|a| (a - mean_abs).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { runs, mean_abs, median_abs, sd, se: sd / (runs as f64).sqrt() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_rate_near_five_percent() {
        let cfg = SimConfig { n: 40_000, seed: 3, ..Default::default() };
        let ds = simulate_dataset(&cfg).unwrap();
        let flipped = ds.samples().iter().filter(|s| s.z[0] > 1.645).count() as f64 / 40_000.0;
        // P(N(0,1) > 1.645) = 0.04998; binomial 3-sigma band
        let p = 0.049_984_905;
        let sd = (p * (1.0 - p) / 40_000.0f64).sqrt();
        assert!((flipped - p).abs() <= 3.0 * sd, "{flipped}");
        assert!(ds.samples().iter().all(|s| s.loss >= 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SimConfig { n: 500, seed: 11, ..Default::default() };
        assert_eq!(simulate_dataset(&cfg).unwrap(), simulate_dataset(&cfg).unwrap());
        let other = SimConfig { replicate: 1, ..cfg };
        assert_ne!(simulate_dataset(&cfg).unwrap(), simulate_dataset(&other).unwrap());
        assert_eq!(Problem::from_config(&cfg), Problem::from_config(&other));
    }

    #[test]
    fn problem_vectors_are_unit() {
        let p = Problem::from_config(&SimConfig::default());
        for v in [&p.theta, &p.theta0] {
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn labels_follow_the_flip_rule() {
        let p = Problem { theta: vec![1.0, 0.0], theta0: vec![0.0, 1.0], clip: 1.645 };
        // unflipped: y = +1, margin 0.5 -> loss 0.5
        assert_eq!(p.loss(0.5, 0.5, 2.0), 0.5);
        // flipped: y = -1, margin -2 -> loss 0 ... and 1 + 2 = 3 in reverse
        assert_eq!(p.loss(2.0, -2.0, 1.0), 0.0);
        assert_eq!(p.loss(2.0, 2.0, 1.0), 3.0);
    }

    #[test]
    fn oracle_monotone_in_alpha_and_deterministic() {
        let base = SimConfig { outer: 600, inner: 200, ..Default::default() };
        let values: Vec<f64> = [0.1, 0.3, 0.6, 1.0]
            .iter()
            .map(|&alpha| oracle_true_w(&SimConfig { alpha, ..base }).unwrap().value)
            .collect();
        assert!(values.windows(2).all(|w| w[0] >= w[1]), "{values:?}");
        assert_eq!(oracle_true_w(&base).unwrap(), oracle_true_w(&base).unwrap());
    }

    #[test]
    fn split_value_sits_below_plain_value() {
        let r = oracle_true_w(&SimConfig { outer: 2000, inner: 400, ..Default::default() }).unwrap();
        assert!(r.split_value.unwrap() < r.value);
        let one = oracle_true_w(&SimConfig { outer: 10, inner: 1, ..Default::default() }).unwrap();
        assert_eq!(one.split_value, None);
    }

    #[test]
    fn error_summary_statistics() {
        let s = ErrorSummary::from_errors(&[-1.0, 2.0, 3.0, -2.0]).unwrap();
        assert_eq!((s.runs, s.mean_abs, s.median_abs), (4, 2.0, 2.0));
        assert!((s.sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.se - s.sd / 2.0).abs() < 1e-15);
        assert!(ErrorSummary::from_errors(&[]).is_err());
    }

    #[test]
    fn validates() {
        assert!(SimConfig { d: 1, ..Default::default() }.validate().is_err());
        assert!(SimConfig { outer: 0, ..Default::default() }.validate().is_err());
        assert!(SimConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
    }
}
