//! Least-squares gradient boosting of shallow regression trees with
//! histogram (pre-binned) split search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub n_bins: usize,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self { rounds: 200, learning_rate: 0.1, max_depth: 2, n_bins: 64 }
    }
}

impl BoostParams {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::InvalidArgument("rounds must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!("learning_rate must lie in (0,1], got {}", self.learning_rate)));
        }
        if !(1..=3).contains(&self.max_depth) {
            return Err(Error::InvalidArgument(format!("max_depth must be 1, 2 or 3, got {}", self.max_depth)));
        }
        if !(2..=u16::MAX as usize).contains(&self.n_bins) {
            return Err(Error::InvalidArgument(format!("n_bins must lie in [2, 65535], got {}", self.n_bins)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    /// Samples with `z[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

/// A regression tree; node 0 is the root. Leaf values already include the
/// shrinkage factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, z: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Split { feature, threshold, left, right } => {
                    at = if z[feature] <= threshold { left } else { right };
                }
                Node::Leaf(v) => return v,
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostedTrees {
    base: f64,
    trees: Vec<Tree>,
    dim: usize,
}

/// Candidate thresholds for one feature: midpoints between distinct values,
/// thinned to at most `n_bins - 1` cuts at evenly spaced ranks.
fn thresholds(column: &mut [f64], n_bins: usize) -> Vec<f64> {
    column.sort_by(f64::total_cmp);
    let mid = |a: f64, b: f64| {
        let t = a + (b - a) / 2.0;
        if t < b {
            t
        } else {
            a
        }
    };
    let mut uniq: Vec<f64> = column.to_vec();
    uniq.dedup();
    let mut cuts = Vec::new();
    if uniq.len() <= n_bins {
        for w in uniq.windows(2) {
            cuts.push(mid(w[0], w[1]));
        }
    } else {
        let m = column.len();
        for j in 1..n_bins {
            let idx = j * m / n_bins;
            if idx == 0 || idx >= m {
                continue;
            }
            let (a, b) = (column[idx - 1], column[idx]);
            if a < b {
                cuts.push(mid(a, b));
            }
        }
        cuts.dedup();
    }
    cuts
}

struct Binned {
    /// Per feature, the sorted cut points.
    cuts: Vec<Vec<f64>>,
    /// `bins[f][i]`: number of cuts strictly below sample `i`'s value.
    bins: Vec<Vec<u16>>,
}

impl Binned {
    fn new(z: &[&[f64]], n_bins: usize) -> Self {
        let d = z[0].len();
        let mut cuts = Vec::with_capacity(d);
        let mut bins = Vec::with_capacity(d);
        for f in 0..d {
            let mut col: Vec<f64> = z.iter().map(|r| r[f]).collect();
            let c = thresholds(&mut col, n_bins);
            let b = z.iter().map(|r| c.partition_point(|&t| t < r[f]) as u16).collect();
            cuts.push(c);
            bins.push(b);
        }
        Self { cuts, bins }
    }
}

struct BestSplit {
    feature: usize,
    bin: usize,
    gain: f64,
}

fn best_split(binned: &Binned, residual: &[f64], members: &[usize]) -> Option<BestSplit> {
    let n = members.len() as f64;
    let total: f64 = members.iter().map(|&i| residual[i]).sum();
    let base = total * total / n;
    let sse: f64 = members.iter().map(|&i| residual[i] * residual[i]).sum();
    let min_gain = 1e-12 * sse;
    if sse == 0.0 {
        return None;
    }
    let mut best: Option<BestSplit> = None;
    for (f, cuts) in binned.cuts.iter().enumerate() {
        if cuts.is_empty() {
            continue;
        }
        let nb = cuts.len() + 1;
        let mut sums = vec![0.0; nb];
        let mut counts = vec![0usize; nb];
        for &i in members {
            let b = binned.bins[f][i] as usize;
            sums[b] += residual[i];
            counts[b] += 1;
        }
        let (mut sl, mut cl) = (0.0, 0usize);
        // Split after bin `b`: bins 0..=b go left, i.e. z <= cuts[b].
        for b in 0..nb - 1 {
            sl += sums[b];
            cl += counts[b];
            let cr = members.len() - cl;
            if cl == 0 || cr == 0 {
                continue;
            }
            let sr = total - sl;
            let gain = sl * sl / cl as f64 + sr * sr / cr as f64 - base;
            if gain > best.as_ref().map_or(min_gain, |s| s.gain) {
                best = Some(BestSplit { feature: f, bin: b, gain });
            }
        }
    }
    best
}

fn grow(
    binned: &Binned,
    residual: &[f64],
    members: Vec<usize>,
    depth: usize,
    max_depth: usize,
    lr: f64,
    nodes: &mut Vec<Node>,
) -> usize {
    let at = nodes.len();
    nodes.push(Node::Leaf(0.0));
    let split = if depth < max_depth && members.len() >= 2 { best_split(binned, residual, &members) } else { None };
    match split {
        Some(s) => {
            let (left, right): (Vec<usize>, Vec<usize>) =
                members.iter().partition(|&&i| (binned.bins[s.feature][i] as usize) <= s.bin);
            let l = grow(binned, residual, left, depth + 1, max_depth, lr, nodes);
            let r = grow(binned, residual, right, depth + 1, max_depth, lr, nodes);
            nodes[at] = Node::Split { feature: s.feature, threshold: binned.cuts[s.feature][s.bin], left: l, right: r };
        }
        None => {
            let mean = members.iter().map(|&i| residual[i]).sum::<f64>() / members.len() as f64;
            nodes[at] = Node::Leaf(lr * mean);
        }
    }
    at
}

impl BoostedTrees {
    pub fn fit(z: &[&[f64]], targets: &[f64], params: &BoostParams) -> Result<Self> {
        params.validate()?;
        let n = z.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let dim = z[0].len();
        let base = targets.iter().sum::<f64>() / n as f64;
        let binned = Binned::new(z, params.n_bins);
        let mut fitted = vec![base; n];
        let mut residual = vec![0.0; n];
        let mut trees = Vec::with_capacity(params.rounds);
        for _ in 0..params.rounds {
            for i in 0..n {
                residual[i] = targets[i] - fitted[i];
            }
            let mut nodes = Vec::new();
            grow(&binned, &residual, (0..n).collect(), 0, params.max_depth, params.learning_rate, &mut nodes);
            let tree = Tree { nodes };
            for (f, row) in fitted.iter_mut().zip(z) {
                *f += tree.predict(row);
            }
            trees.push(tree);
        }
        Ok(Self { base, trees, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rounds(&self) -> usize {
        self.trees.len()
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        self.trees.iter().fold(self.base, |acc, t| acc + t.predict(z))
    }

    /// Prediction using only the first `rounds` trees.
    pub fn predict_truncated(&self, z: &[f64], rounds: usize) -> f64 {
        self.trees.iter().take(rounds).fold(self.base, |acc, t| acc + t.predict(z))
    }
}
