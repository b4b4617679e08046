//! Model-agnostic explanations over a batch prediction function: interventional
//! Shapley values (exact and permutation-sampled), permutation importance and
//! ICE / partial-dependence curves.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{accuracy, pr_auc, roc_auc};
use crate::{derive_seed, rng, Dataset, Matrix};

/// Maps each row of a matrix to a real-valued prediction.
pub type Predict<'a> = dyn Fn(&Matrix) -> Result<Vec<f64>> + Sync + 'a;

const CHUNK_ROWS: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Replace off-coalition features by the column means of the reference rows.
    SingleRowMean,
    /// Average the prediction over every reference row.
    #[default]
    PerRowAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub reference_rows: Matrix,
    pub reduction: Reduction,
}

impl Background {
    pub fn new(reference_rows: Matrix, reduction: Reduction) -> Result<Self> {
        if reference_rows.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { reference_rows, reduction })
    }

    /// Seeded sample of at most `max_rows` rows of `data`.
    pub fn sample(data: &Matrix, max_rows: usize, reduction: Reduction, seed: u64) -> Result<Self> {
        let mut idx: Vec<usize> = (0..data.nrows()).collect();
        if idx.len() > max_rows {
            idx.shuffle(&mut rng(seed));
            idx.truncate(max_rows);
            idx.sort_unstable();
        }
        Self::new(data.select_rows(&idx), reduction)
    }

    fn effective_rows(&self) -> Matrix {
        match self.reduction {
            Reduction::PerRowAverage => self.reference_rows.clone(),
            Reduction::SingleRowMean => {
                let n = self.reference_rows.nrows() as f64;
                let mean: Vec<f64> = (0..self.reference_rows.ncols())
                    .map(|j| self.reference_rows.column(j).iter().sum::<f64>() / n)
                    .collect();
                Matrix::from_rows(&[mean]).expect("one row")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub row_id: u64,
    pub phi: Vec<f64>,
    pub baseline_value: f64,
    pub prediction: f64,
    /// `sum(phi) + baseline_value - prediction`.
    pub efficiency_residual: f64,
    /// Per-feature standard errors (sampled estimator only).
    pub std_error: Option<Vec<f64>>,
}

fn residual(phi: &[f64], baseline: f64, prediction: f64) -> f64 {
    phi.iter().sum::<f64>() + baseline - prediction
}

/// Evaluates `v(S)` for every coalition, where `coalitions[c][j]` says whether
/// feature `j` takes its value from `x`.
fn coalition_values(predict: &Predict, x: &[f64], bg: &Matrix, coalitions: &[Vec<bool>]) -> Result<Vec<f64>> {
    let d = x.len();
    let r = bg.nrows();
    let per_chunk = (CHUNK_ROWS / r).max(1);
    let mut values = Vec::with_capacity(coalitions.len());
    for chunk in coalitions.chunks(per_chunk) {
        let mut data = Vec::with_capacity(chunk.len() * r * d);
        for mask in chunk {
            for b in bg.rows_iter() {
                data.extend((0..d).map(|j| if mask[j] { x[j] } else { b[j] }));
            }
        }
        let batch = Matrix::from_vec(chunk.len() * r, d, data)?;
        let preds = predict(&batch)?;
        if preds.len() != batch.nrows() {
            return Err(Error::LengthMismatch { left: preds.len(), right: batch.nrows() });
        }
        if preds.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinitePrediction);
        }
        values.extend(preds.chunks(r).map(|c| c.iter().sum::<f64>() / r as f64));
    }
    Ok(values)
}

fn check_background(x: &[f64], background: &Background) -> Result<()> {
    if background.reference_rows.ncols() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), found: background.reference_rows.ncols() });
    }
    if background.reference_rows.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Exact interventional Shapley values over all `2^d` coalitions.
pub fn shapley_exact(
    predict: &Predict,
    x: &[f64],
    row_id: u64,
    background: &Background,
    feature_limit: usize,
) -> Result<Attribution> {
    let d = x.len();
    if d > feature_limit || d >= usize::BITS as usize - 1 {
        return Err(Error::TooManyFeatures { features: d, limit: feature_limit });
    }
    check_background(x, background)?;
    let bg = background.effective_rows();
    let n_sets = 1usize << d;
    let coalitions: Vec<Vec<bool>> = (0..n_sets).map(|s| (0..d).map(|j| s >> j & 1 == 1).collect()).collect();
    let v = coalition_values(predict, x, &bg, &coalitions)?;
    // weight[|S|] = |S|! (d - |S| - 1)! / d!
    let weights: Vec<f64> = (0..d)
        .map(|s| (ln_factorial(s) + ln_factorial(d - s - 1) - ln_factorial(d)).exp())
        .collect();
    let mut phi = vec![0.0; d];
    for s in 0..n_sets {
        let size = s.count_ones() as usize;
        for (j, p) in phi.iter_mut().enumerate() {
            if s >> j & 1 == 0 {
                *p += weights[size] * (v[s | 1 << j] - v[s]);
            }
        }
    }
    let baseline_value = v[0];
    let prediction = v[n_sets - 1];
    Ok(Attribution {
        row_id,
        efficiency_residual: residual(&phi, baseline_value, prediction),
        phi,
        baseline_value,
        prediction,
        std_error: None,
    })
}

fn all_permutations(d: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                rec(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; d], &mut out);
    out
}

/// Monte-Carlo Shapley values from seeded random feature orderings. When
/// `n_permutations >= d!` every ordering is enumerated once and the result is exact.
pub fn shapley_sampled(
    predict: &Predict,
    x: &[f64],
    row_id: u64,
    background: &Background,
    n_permutations: usize,
    seed: u64,
) -> Result<Attribution> {
    if n_permutations == 0 {
        return Err(Error::InvalidHyperparameter("n_permutations must be >= 1".into()));
    }
    check_background(x, background)?;
    let d = x.len();
    let bg = background.effective_rows();
    let exhaustive = (1..=d).try_fold(1usize, |acc, k| acc.checked_mul(k)).is_some_and(|f| n_permutations >= f);
    let perms: Vec<Vec<usize>> = if exhaustive {
        all_permutations(d)
    } else {
        let mut r = rng(seed);
        (0..n_permutations)
            .map(|_| {
                let mut p: Vec<usize> = (0..d).collect();
                p.shuffle(&mut r);
                p
            })
            .collect()
    };
    let empty = coalition_values(predict, x, &bg, &[vec![false; d]])?[0];
    let full = coalition_values(predict, x, &bg, &[vec![true; d]])?[0];
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let per_chunk = (CHUNK_ROWS / (bg.nrows() * d.max(1))).max(1);
    for chunk in perms.chunks(per_chunk) {
        let mut coalitions = Vec::with_capacity(chunk.len() * d);
        for p in chunk {
            let mut mask = vec![false; d];
            for &j in &p[..d.saturating_sub(1)] {
                mask[j] = true;
                coalitions.push(mask.clone());
            }
        }
        let v = coalition_values(predict, x, &bg, &coalitions)?;
        let mut idx = 0;
        for p in chunk {
            let mut prev = empty;
            for (step, &j) in p.iter().enumerate() {
                let cur = if step + 1 == d { full } else { v[idx + step] };
                let delta = cur - prev;
                sum[j] += delta;
                sum_sq[j] += delta * delta;
                prev = cur;
            }
            idx += d.saturating_sub(1);
        }
    }
    let n = perms.len() as f64;
    let phi: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_error = (0..d)
        .map(|j| {
            if exhaustive || perms.len() < 2 {
                0.0
            } else {
                let var = (sum_sq[j] - n * phi[j] * phi[j]).max(0.0) / (n - 1.0);
                (var / n).sqrt()
            }
        })
        .collect();
    Ok(Attribution {
        row_id,
        efficiency_residual: residual(&phi, empty, full),
        phi,
        baseline_value: empty,
        prediction: full,
        std_error: Some(std_error),
    })
}

/// Exact attributions for the given row indices of `data`, computed in parallel.
pub fn shapley_exact_rows(
    predict: &Predict,
    data: &Dataset,
    rows: &[usize],
    background: &Background,
    feature_limit: usize,
) -> Result<Vec<Attribution>> {
    rows.par_iter()
        .map(|&i| shapley_exact(predict, data.features().row(i), data.row_ids()[i], background, feature_limit))
        .collect()
}

/// Sampled attributions; row `i` is seeded with `derive_seed(seed, row_id)`.
pub fn shapley_sampled_rows(
    predict: &Predict,
    data: &Dataset,
    rows: &[usize],
    background: &Background,
    n_permutations: usize,
    seed: u64,
) -> Result<Vec<Attribution>> {
    rows.par_iter()
        .map(|&i| {
            let id = data.row_ids()[i];
            shapley_sampled(predict, data.features().row(i), id, background, n_permutations, derive_seed(seed, id))
        })
        .collect()
}

/// Weighted average of per-model attributions of the same row.
pub fn aggregate_ensemble_shap(per_model: &[Attribution], weights: &[f64]) -> Result<Attribution> {
    if per_model.len() != weights.len() {
        return Err(Error::LengthMismatch { left: per_model.len(), right: weights.len() });
    }
    let first = per_model.first().ok_or(Error::ZeroWeights)?;
    if let Some(a) = per_model.iter().find(|a| a.phi.len() != first.phi.len()) {
        return Err(Error::LengthMismatch { left: first.phi.len(), right: a.phi.len() });
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidHyperparameter("aggregation weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    let avg = |f: &dyn Fn(&Attribution) -> f64| per_model.iter().zip(weights).map(|(a, w)| w * f(a)).sum::<f64>() / total;
    let phi: Vec<f64> = (0..first.phi.len()).map(|j| avg(&|a| a.phi[j])).collect();
    let baseline_value = avg(&|a| a.baseline_value);
    let prediction = avg(&|a| a.prediction);
    Ok(Attribution {
        row_id: first.row_id,
        efficiency_residual: residual(&phi, baseline_value, prediction),
        phi,
        baseline_value,
        prediction,
        std_error: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMetric {
    #[default]
    PrAuc,
    RocAuc,
    /// Accuracy of predictions thresholded at 0.5.
    Accuracy,
}

impl ImportanceMetric {
    fn score(self, y: &[u8], scores: &[f64]) -> Result<f64> {
        match self {
            ImportanceMetric::PrAuc => pr_auc(y, scores),
            ImportanceMetric::RocAuc => roc_auc(y, scores),
            ImportanceMetric::Accuracy => {
                let labels: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
                accuracy(y, &labels)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub feature_name: String,
    pub mean_drop: f64,
    pub sd_drop: f64,
}

/// Sorted by `mean_drop`, largest first; ties keep feature order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking {
    pub entries: Vec<ImportanceEntry>,
}

/// Drop in `metric` after shuffling each column, over `n_repeats` seeded shuffles.
/// The sd is the sample standard deviation (0 for a single repeat).
pub fn permutation_importance(
    predict: &Predict,
    data: &Dataset,
    metric: ImportanceMetric,
    n_repeats: usize,
    seed: u64,
) -> Result<ImportanceRanking> {
    if n_repeats == 0 {
        return Err(Error::InvalidHyperparameter("n_repeats must be >= 1".into()));
    }
    let y = data.labels();
    let base = metric.score(y, &predict(data.features())?)?;
    let mut entries = (0..data.n_features())
        .into_par_iter()
        .map(|j| {
            let mut r = rng(derive_seed(seed, j as u64));
            let mut x = data.features().clone();
            let original = data.features().column(j);
            let mut col = original.clone();
            let mut drops = Vec::with_capacity(n_repeats);
            for _ in 0..n_repeats {
                col.copy_from_slice(&original);
                col.shuffle(&mut r);
                for (i, v) in col.iter().enumerate() {
                    x.set(i, j, *v);
                }
                drops.push(base - metric.score(y, &predict(&x)?)?);
            }
            let n = drops.len() as f64;
            let mean = drops.iter().sum::<f64>() / n;
            let sd = if drops.len() < 2 {
                0.0
            } else {
                (drops.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            Ok(ImportanceEntry { feature_name: data.feature_names()[j].clone(), mean_drop: mean, sd_drop: sd })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| b.mean_drop.total_cmp(&a.mean_drop));
    Ok(ImportanceRanking { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    #[default]
    Quantile,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IceResult {
    pub feature_name: String,
    pub grid: Vec<f64>,
    /// Rows are instances; columns are grid points.
    pub curves: Matrix,
    pub pdp: Vec<f64>,
    pub row_ids: Vec<u64>,
}

/// Grid over the observed values of one column. Quantile grids interpolate the
/// sorted values linearly; repeated grid values are dropped.
pub fn feature_grid(values: &[f64], grid_size: usize, kind: GridKind) -> Result<Vec<f64>> {
    if grid_size < 2 {
        return Err(Error::InvalidHyperparameter("grid_size must be >= 2".into()));
    }
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let last = (grid_size - 1) as f64;
    let mut grid: Vec<f64> = (0..grid_size)
        .map(|j| match kind {
            GridKind::Linear => {
                if j + 1 == grid_size {
                    hi
                } else {
                    lo + (hi - lo) * j as f64 / last
                }
            }
            GridKind::Quantile => {
                let pos = (sorted.len() - 1) as f64 * j as f64 / last;
                let (a, frac) = (pos.floor() as usize, pos.fract());
                if a + 1 < sorted.len() {
                    sorted[a] + frac * (sorted[a + 1] - sorted[a])
                } else {
                    sorted[a]
                }
            }
        })
        .collect();
    grid.dedup_by(|b, a| *b <= *a);
    Ok(grid)
}

pub fn ice_curves(
    predict: &Predict,
    data: &Dataset,
    feature: &str,
    grid_size: usize,
    grid_kind: GridKind,
) -> Result<IceResult> {
    let j = data.feature_index(feature).ok_or_else(|| Error::UnknownFeature(feature.to_string()))?;
    let grid = feature_grid(&data.features().column(j), grid_size, grid_kind)?;
    let n = data.n_rows();
    let g = grid.len();
    let d = data.n_features();
    let mut batch = Vec::with_capacity(n * g * d);
    for row in data.features().rows_iter() {
        for &v in &grid {
            batch.extend_from_slice(row);
            let at = batch.len() - d + j;
            batch[at] = v;
        }
    }
    let preds = predict(&Matrix::from_vec(n * g, d, batch)?)?;
    if preds.len() != n * g {
        return Err(Error::LengthMismatch { left: preds.len(), right: n * g });
    }
    let curves = Matrix::from_vec(n, g, preds)?;
    let pdp = (0..g).map(|c| curves.column(c).iter().sum::<f64>() / n as f64).collect();
    Ok(IceResult { feature_name: feature.to_string(), grid, curves, pdp, row_ids: data.row_ids().to_vec() })
}

/// `row_id,feature,phi`, one line per row and feature.
pub fn write_shap_csv(path: impl AsRef<Path>, attributions: &[Attribution], feature_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row_id", "feature", "phi"])?;
    for a in attributions {
        for (name, phi) in feature_names.iter().zip(&a.phi) {
            w.write_record([a.row_id.to_string(), name.clone(), phi.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `feature,mean_drop,sd_drop` in ranking order.
pub fn write_pip_csv(path: impl AsRef<Path>, ranking: &ImportanceRanking) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature", "mean_drop", "sd_drop"])?;
    for e in &ranking.entries {
        w.write_record([e.feature_name.clone(), e.mean_drop.to_string(), e.sd_drop.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `row_id,grid_value,prediction`.
pub fn write_ice_csv(path: impl AsRef<Path>, ice: &IceResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row_id", "grid_value", "prediction"])?;
    for (i, id) in ice.row_ids.iter().enumerate() {
        for (c, g) in ice.grid.iter().enumerate() {
            w.write_record([id.to_string(), g.to_string(), ice.curves.get(i, c).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// File name used for a feature's ICE table.
pub fn ice_file_name(feature: &str) -> String {
    let safe: String = feature.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
    format!("ice_{safe}.csv")
}
