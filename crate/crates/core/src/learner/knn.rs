use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// k-nearest-neighbor regressor on standardized attributes.
///
/// All training points tied with the k-th smallest distance are averaged,
/// so repeated attribute values never make the fit depend on row order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnRegressor {
    k: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Standardized training points, row-major `n x d`.
    points: Vec<f64>,
    targets: Vec<f64>,
}

/// `ceil(sqrt(n))`, the default neighbor count.
pub fn auto_neighbors(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).clamp(1, n.max(1))
}

impl KnnRegressor {
    pub fn fit(z: &[&[f64]], targets: &[f64], k: usize) -> Result<Self> {
        let n = z.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k_neighbors must be >= 1".into()));
        }
        if k > n {
            return Err(Error::TooManyNeighbors { k, n });
        }
        let d = z[0].len();
        let mut center = vec![0.0; d];
        for row in z {
            for (c, v) in center.iter_mut().zip(row.iter()) {
                *c += v;
            }
        }
        center.iter_mut().for_each(|c| *c /= n as f64);
        let mut scale = vec![0.0; d];
        for row in z {
            for ((s, v), c) in scale.iter_mut().zip(row.iter()).zip(&center) {
                *s += (v - c) * (v - c);
            }
        }
        for s in scale.iter_mut() {
            let sd = (*s / n as f64).sqrt();
            *s = if sd > 0.0 { sd } else { 1.0 };
        }
        let mut points = Vec::with_capacity(n * d);
        for row in z {
            points.extend(row.iter().zip(&center).zip(&scale).map(|((v, c), s)| (v - c) / s));
        }
        Ok(Self { k, center, scale, points, targets: targets.to_vec() })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn standardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.center).zip(&self.scale).map(|((v, c), s)| (v - c) / s).collect()
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        let q = self.standardize(z);
        let d = q.len();
        let dist: Vec<f64> =
            self.points.chunks_exact(d).map(|p| p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
        let radius = {
            let mut scratch = dist.clone();
            let (_, kth, _) = scratch.select_nth_unstable_by(self.k - 1, f64::total_cmp);
            *kth
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for (dd, &t) in dist.iter().zip(&self.targets) {
            if *dd <= radius {
                sum += t;
                count += 1;
            }
        }
        sum / count as f64
    }

    /// Predict many points, sharing work between exactly repeated queries.
    pub fn predict_many(&self, queries: &[&[f64]]) -> Vec<f64> {
        let mut cache: HashMap<Vec<u64>, f64> = HashMap::new();
        queries
            .iter()
            .map(|z| {
                let key: Vec<u64> = z.iter().map(|v| v.to_bits()).collect();
                *cache.entry(key).or_insert_with(|| self.predict(z))
            })
            .collect()
    }
}
