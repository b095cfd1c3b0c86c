//! Dataset container, fold partitioning and CSV ingestion.
//!
//! A dataset row holds the realized loss of the model under evaluation and
//! the attribute vector `z` that defines subpopulations. An optional
//! `mu_hat` column carries conditional-risk predictions produced elsewhere.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::fmt_g17;

/// One observation: the loss of the fixed model and its attribute vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub loss: f64,
    pub z: Vec<f64>,
}

impl LossSample {
    pub fn new(loss: f64, z: Vec<f64>) -> Result<Self> {
        if !loss.is_finite() {
            return Err(Error::InvalidDataset("loss must be finite".into()));
        }
        if loss < 0.0 {
            return Err(Error::InvalidDataset(format!("negative loss {loss}")));
        }
        if z.is_empty() {
            return Err(Error::InvalidDataset("attribute vector is empty".into()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("attribute values must be finite".into()));
        }
        Ok(Self { loss, z })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<LossSample>,
    external_mu: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(samples: Vec<LossSample>, external_mu: Option<Vec<f64>>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidDataset("dataset is empty".into()));
        };
        let d = first.z.len();
        for (i, s) in samples.iter().enumerate() {
            if s.z.len() != d {
                return Err(Error::InvalidDataset(format!(
                    "sample {i} has attribute dimension {} (expected {d})",
                    s.z.len()
                )));
            }
            if !s.loss.is_finite() || s.loss < 0.0 {
                return Err(Error::InvalidDataset(format!("sample {i} has invalid loss {}", s.loss)));
            }
            if d == 0 || s.z.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!("sample {i} has invalid attributes")));
            }
        }
        if let Some(mu) = &external_mu {
            if mu.len() != samples.len() {
                return Err(Error::InvalidDataset(format!(
                    "external mu_hat has length {} but dataset has {} samples",
                    mu.len(),
                    samples.len()
                )));
            }
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset("external mu_hat must be finite".into()));
            }
        }
        Ok(Self { samples, external_mu })
    }

    /// Build from parallel loss / attribute columns.
    pub fn from_columns(losses: &[f64], z: &[Vec<f64>], external_mu: Option<Vec<f64>>) -> Result<Self> {
        if losses.len() != z.len() {
            return Err(Error::InvalidDataset("losses and attributes differ in length".into()));
        }
        let samples = losses.iter().zip(z).map(|(&l, z)| LossSample::new(l, z.clone())).collect::<Result<Vec<_>>>()?;
        Self::new(samples, external_mu)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Attribute dimension `d`.
    pub fn dim(&self) -> usize {
        self.samples[0].z.len()
    }

    pub fn samples(&self) -> &[LossSample] {
        &self.samples
    }

    pub fn external_mu(&self) -> Option<&[f64]> {
        self.external_mu.as_deref()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.loss).collect()
    }

    pub fn loss(&self, i: usize) -> f64 {
        self.samples[i].loss
    }

    pub fn z(&self, i: usize) -> &[f64] {
        &self.samples[i].z
    }

    pub fn with_external_mu(mut self, mu: Vec<f64>) -> Result<Self> {
        self.external_mu = Some(mu);
        Self::new(self.samples, self.external_mu)
    }

    pub fn max_loss(&self) -> f64 {
        self.samples.iter().map(|s| s.loss).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Write in the ingestion format. Floats use 17 significant digits so a
    /// reload reproduces every value bit-for-bit.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.dim();
        let mut header = vec!["loss".to_string()];
        header.extend((0..d).map(|j| format!("z{j}")));
        if self.external_mu.is_some() {
            header.push("mu_hat".into());
        }
        w.write_record(&header).map_err(csv_write_err)?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut rec = Vec::with_capacity(d + 2);
            rec.push(fmt_g17(s.loss));
            rec.extend(s.z.iter().map(|&v| fmt_g17(v)));
            if let Some(mu) = &self.external_mu {
                rec.push(fmt_g17(mu[i]));
            }
            w.write_record(&rec).map_err(csv_write_err)?;
        }
        w.flush().map_err(|e| Error::Io { path: "<output>".into(), source: e })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn csv_write_err(e: csv::Error) -> Error {
    Error::Io { path: "<output>".into(), source: std::io::Error::other(e.to_string()) }
}

/// Load a dataset from a CSV file (see [`read_csv`]).
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    read_csv(bytes.as_slice())
}

/// Load the `loss` column of a CSV file (see [`read_losses`]).
pub fn load_losses(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    read_losses(bytes.as_slice())
}

/// Parse the ingestion format: header with `loss`, `z0..z{d-1}` and an
/// optional `mu_hat`, in any column order. Rows are numbered from 1 (the
/// first data row) in diagnostics.
pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut rdr = csv_reader(input);
    let headers = read_headers(&mut rdr)?;

    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut loss_col = None;
    let mut mu_col = None;
    let mut z_cols: Vec<(usize, usize)> = Vec::new();
    for (c, name) in headers.iter().enumerate() {
        if seen.insert(name, c).is_some() {
            return Err(Error::DuplicateColumn(name.to_string()));
        }
        match name {
            "loss" => loss_col = Some(c),
            "mu_hat" => mu_col = Some(c),
            _ => match name.strip_prefix('z').and_then(|s| s.parse::<usize>().ok()) {
                Some(j) if name == format!("z{j}") => z_cols.push((j, c)),
                _ => return Err(Error::UnexpectedColumn(name.to_string())),
            },
        }
    }
    let loss_col = loss_col.ok_or(Error::MissingLossColumn)?;
    if z_cols.is_empty() {
        return Err(Error::NoAttributeColumns);
    }
    z_cols.sort_unstable();
    for (expect, &(j, _)) in z_cols.iter().enumerate() {
        if j != expect {
            return Err(Error::AttributeGap { found: j, missing: expect });
        }
    }

    let mut samples = Vec::new();
    let mut mu = mu_col.map(|_| Vec::new());
    for_each_row(&mut rdr, &headers, |row, cell| {
        let loss = checked_loss(row, cell(loss_col)?)?;
        let z = z_cols.iter().map(|&(_, c)| cell(c)).collect::<Result<Vec<_>>>()?;
        if let (Some(mu), Some(c)) = (mu.as_mut(), mu_col) {
            mu.push(cell(c)?);
        }
        samples.push(LossSample { loss, z });
        Ok(())
    })?;
    if samples.is_empty() {
        return Err(Error::EmptyFile);
    }
    Dataset::new(samples, mu)
}

/// Read only the `loss` column; other columns are ignored.
pub fn read_losses<R: Read>(input: R) -> Result<Vec<f64>> {
    let mut rdr = csv_reader(input);
    let headers = read_headers(&mut rdr)?;
    let mut matches = headers.iter().enumerate().filter(|(_, h)| *h == "loss");
    let (loss_col, _) = matches.next().ok_or(Error::MissingLossColumn)?;
    if matches.next().is_some() {
        return Err(Error::DuplicateColumn("loss".into()));
    }
    let mut losses = Vec::new();
    for_each_row(&mut rdr, &headers, |row, cell| {
        losses.push(checked_loss(row, cell(loss_col)?)?);
        Ok(())
    })?;
    if losses.is_empty() {
        return Err(Error::EmptyFile);
    }
    Ok(losses)
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(input)
}

fn read_headers<R: Read>(rdr: &mut csv::Reader<R>) -> Result<csv::StringRecord> {
    let headers = rdr.headers().map_err(|e| Error::Csv { row: 0, message: e.to_string() })?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyFile);
    }
    Ok(headers)
}

fn checked_loss(row: usize, loss: f64) -> Result<f64> {
    if loss < 0.0 {
        return Err(Error::NegativeLoss { row });
    }
    Ok(loss)
}

/// Calls `f(row, cell)` for every data row, where `cell(c)` parses column
/// `c` as a finite number.
fn for_each_row<R, F>(rdr: &mut csv::Reader<R>, headers: &csv::StringRecord, mut f: F) -> Result<()>
where
    R: Read,
    F: FnMut(usize, &dyn Fn(usize) -> Result<f64>) -> Result<()>,
{
    let width = headers.len();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Csv { row, message: e.to_string() })?;
        if rec.len() != width {
            return Err(Error::RaggedRow { row, expected: width, found: rec.len() });
        }
        let cell = |c: usize| -> Result<f64> {
            let raw = &rec[c];
            let v: f64 = raw.parse().map_err(|_| Error::NonNumeric {
                row,
                column: headers[c].to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, column: headers[c].to_string() });
            }
            Ok(v)
        };
        f(row, &cell)?;
    }
    Ok(())
}

/// Assignment of each sample to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    k: usize,
    assignment: Vec<usize>,
    seed: u64,
}

impl FoldPartition {
    /// Build from an explicit assignment, checking that every fold is
    /// nonempty and fold sizes differ by at most one.
    pub fn from_assignment(k: usize, assignment: Vec<usize>, seed: u64) -> Result<Self> {
        let n = assignment.len();
        if k < 2 || k > n {
            return Err(Error::InvalidFoldCount { k, n });
        }
        let mut sizes = vec![0usize; k];
        for &a in &assignment {
            if a >= k {
                return Err(Error::InvalidArgument(format!("fold index {a} out of range for K={k}")));
            }
            sizes[a] += 1;
        }
        let lo = *sizes.iter().min().unwrap();
        let hi = *sizes.iter().max().unwrap();
        if lo == 0 || hi - lo > 1 {
            return Err(Error::InvalidArgument(format!("unbalanced fold sizes {sizes:?}")));
        }
        Ok(Self { k, assignment, seed })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Members of fold `k` in dataset order.
    pub fn fold(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == k).collect()
    }

    /// Complement of fold `k`: the other folds concatenated in fold-index
    /// order, each in dataset order.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        (0..self.k).filter(|&j| j != k).flat_map(|j| self.fold(j)).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Uniformly shuffled balanced K-fold assignment, deterministic in `(n, k, seed)`.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPartition> {
    if k < 2 || k > n {
        return Err(Error::InvalidFoldCount { k, n });
    }
    let mut assignment: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assignment.shuffle(&mut rng);
    Ok(FoldPartition { k, assignment, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Knn,
    BoostedStumps,
    External,
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(Self::Knn),
            "boosted_stumps" | "boosted-stumps" | "boost" => Ok(Self::BoostedStumps),
            "external" => Ok(Self::External),
            other => Err(Error::InvalidArgument(format!("unknown learner `{other}`"))),
        }
    }
}

/// Configuration of one cross-fitted evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub alpha: f64,
    pub folds: usize,
    pub delta: f64,
    pub learner: LearnerKind,
    pub params: crate::learner::LearnerParams,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            folds: 5,
            delta: 0.1,
            learner: LearnerKind::BoostedStumps,
            params: Default::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if self.folds < 2 {
            return Err(Error::InvalidFoldCount { k: self.folds, n: 0 });
        }
        self.params.validate()
    }

    pub fn validate_for(&self, ds: &Dataset) -> Result<()> {
        self.validate()?;
        if self.learner == LearnerKind::External && ds.external_mu().is_none() {
            return Err(Error::MissingExternalMu);
        }
        if ds.len() < 2 * self.folds {
            return Err(Error::TooFewSamples { n: ds.len(), k: self.folds });
        }
        Ok(())
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must lie in (0,1], got {alpha}")))
    }
}
