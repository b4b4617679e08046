//! Tabular data: CSV ingest, feature scaling, train/test splits and stratified folds.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, Matrix, Warnings};

/// Feature matrix with binary labels (1 = anomaly) and stable row identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<u8>,
    feature_names: Vec<String>,
    row_ids: Vec<u64>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<u8>,
        feature_names: Vec<String>,
        row_ids: Vec<u64>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || row_ids.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{n} feature rows, {} labels, {} row ids",
                labels.len(),
                row_ids.len()
            )));
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::DimensionMismatch {
                expected: features.ncols(),
                found: feature_names.len(),
            });
        }
        let mut seen = HashSet::new();
        if !feature_names.iter().all(|f| seen.insert(f.as_str())) {
            return Err(Error::InvalidDataset("duplicate feature names".into()));
        }
        if let Some(row) = labels.iter().position(|&l| l > 1) {
            return Err(Error::NonBinaryLabel { row });
        }
        let mut ids = HashSet::with_capacity(n);
        if !row_ids.iter().all(|id| ids.insert(*id)) {
            return Err(Error::InvalidDataset("duplicate row ids".into()));
        }
        Ok(Self { features, labels, feature_names, row_ids })
    }

    /// Dataset with row ids `0..n` and generated names `x0, x1, ...`.
    pub fn from_parts(features: Matrix, labels: Vec<u8>) -> Result<Self> {
        let names = (0..features.ncols()).map(|j| format!("x{j}")).collect();
        let ids = (0..features.nrows() as u64).collect();
        Self::new(features, labels, names, ids)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row_ids(&self) -> &[u64] {
        &self.row_ids
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn n_negative(&self) -> usize {
        self.n_rows() - self.n_positive()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Row positions belonging to `class`, in storage order.
    pub fn class_rows(&self, class: u8) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Rows at the given positions, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }

    /// Same rows and labels over a replacement feature matrix (e.g. a learned representation).
    pub fn with_features(&self, features: Matrix, feature_names: Vec<String>) -> Result<Dataset> {
        Dataset::new(features, self.labels.clone(), feature_names, self.row_ids.clone())
    }

    /// Appends rows; ids must not collide with existing ones.
    pub fn append(&self, features: &Matrix, labels: &[u8], row_ids: &[u64]) -> Result<Dataset> {
        let mut l = self.labels.clone();
        l.extend_from_slice(labels);
        let mut ids = self.row_ids.clone();
        ids.extend_from_slice(row_ids);
        Dataset::new(self.features.vstack(features)?, l, self.feature_names.clone(), ids)
    }
}

/// Reads a headed, comma-separated file; `label_column` holds 0/1 labels, every other column a feature.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_col = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingLabelColumn(label_column.to_string()))?;
    let names: Vec<String> =
        header.iter().enumerate().filter(|(j, _)| *j != label_col).map(|(_, h)| h.clone()).collect();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::InvalidDataset(format!(
                "row {row} has {} cells, header has {}",
                record.len(),
                header.len()
            )));
        }
        for (col, cell) in record.iter().enumerate() {
            if col == label_col {
                labels.push(match cell {
                    "0" => 0,
                    "1" => 1,
                    _ => match cell.parse::<f64>() {
                        Ok(v) if v == 0.0 => 0,
                        Ok(v) if v == 1.0 => 1,
                        _ => return Err(Error::NonBinaryLabel { row }),
                    },
                });
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => data.push(v),
                    _ => return Err(Error::NonNumericCell { row, col }),
                }
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = labels.len();
    let features = Matrix::from_vec(n, names.len(), data)?;
    Dataset::new(features, labels, names, (0..n as u64).collect())
}

/// Writes a dataset back out in the `load_csv` dialect.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = data.feature_names.iter().map(String::as_str).collect();
    header.push(label_column);
    w.write_record(&header)?;
    for i in 0..data.n_rows() {
        let mut rec: Vec<String> = data.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.labels[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerKind {
    #[default]
    Zscore,
    Minmax,
}

/// Per-feature affine scaling fitted on training rows.
///
/// For `Zscore`, `a` holds means and `b` population standard deviations; for
/// `Minmax`, `a` holds minima and `b` maxima. Constant columns map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub kind: ScalerKind,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub constant_features: Vec<usize>,
}

pub fn fit_scaler(train: &Dataset, kind: ScalerKind, warnings: &mut Warnings) -> Result<ScalerParams> {
    if train.n_rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = train.n_features();
    let n = train.n_rows() as f64;
    let mut a = Vec::with_capacity(d);
    let mut b = Vec::with_capacity(d);
    let mut constant = Vec::new();
    for j in 0..d {
        let col = train.features.column(j);
        match kind {
            ScalerKind::Zscore => {
                let mean = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd == 0.0 {
                    constant.push(j);
                }
                a.push(mean);
                b.push(sd);
            }
            ScalerKind::Minmax => {
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi == lo {
                    constant.push(j);
                }
                a.push(lo);
                b.push(hi);
            }
        }
    }
    if !constant.is_empty() {
        let names: Vec<&str> = constant.iter().map(|&j| train.feature_names[j].as_str()).collect();
        warnings.push(format!("constant feature(s) scaled to 0: {}", names.join(", ")));
    }
    Ok(ScalerParams { kind, a, b, constant_features: constant })
}

impl ScalerParams {
    #[inline]
    pub fn scale_value(&self, j: usize, v: f64) -> f64 {
        match self.kind {
            ScalerKind::Zscore if self.b[j] > 0.0 => (v - self.a[j]) / self.b[j],
            ScalerKind::Minmax if self.b[j] > self.a[j] => (v - self.a[j]) / (self.b[j] - self.a[j]),
            _ => 0.0,
        }
    }

    pub fn scale_matrix(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.a.len() {
            return Err(Error::DimensionMismatch { expected: self.a.len(), found: x.ncols() });
        }
        let mut out = x.clone();
        for i in 0..out.nrows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = self.scale_value(j, *v);
            }
        }
        Ok(out)
    }

    /// Number of scaled cells outside [0, 1] (minmax only; always 0 for zscore).
    pub fn range_excursions(&self, scaled: &Matrix) -> usize {
        match self.kind {
            ScalerKind::Zscore => 0,
            ScalerKind::Minmax => scaled.as_slice().iter().filter(|v| !(0.0..=1.0).contains(*v)).count(),
        }
    }
}

pub fn apply_scaler(params: &ScalerParams, data: &Dataset) -> Result<Dataset> {
    let features = params.scale_matrix(&data.features)?;
    data.with_features(features, data.feature_names.clone())
}

fn shuffled(mut idx: Vec<usize>, rng: &mut impl rand::Rng) -> Vec<usize> {
    idx.shuffle(rng);
    idx
}

/// Splits rows into (train, test). Both sides keep the input row order.
pub fn train_test_split(
    data: &Dataset,
    test_fraction: f64,
    stratified: bool,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::DegenerateSplit);
    }
    let mut rng = rng(seed);
    let mut test = Vec::new();
    if stratified {
        for class in [0u8, 1] {
            let rows = data.class_rows(class);
            if rows.is_empty() {
                return Err(Error::ClassAbsent(class));
            }
            let n_test = (rows.len() as f64 * test_fraction).round() as usize;
            test.extend(shuffled(rows, &mut rng).into_iter().take(n_test));
        }
    } else {
        let n_test = (data.n_rows() as f64 * test_fraction).round() as usize;
        test.extend(shuffled((0..data.n_rows()).collect(), &mut rng).into_iter().take(n_test));
    }
    if test.is_empty() || test.len() == data.n_rows() {
        return Err(Error::DegenerateSplit);
    }
    let mut in_test = vec![false; data.n_rows()];
    for &i in &test {
        in_test[i] = true;
    }
    let train_idx: Vec<usize> = (0..data.n_rows()).filter(|&i| !in_test[i]).collect();
    let test_idx: Vec<usize> = (0..data.n_rows()).filter(|&i| in_test[i]).collect();
    Ok((data.subset(&train_idx), data.subset(&test_idx)))
}

/// Assignment of every row of a dataset to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Row ids in dataset order.
    pub row_ids: Vec<u64>,
    /// Fold index of the row at the same position.
    pub fold_assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Positions of rows held out in fold `f`.
    pub fn test_rows(&self, f: usize) -> Vec<usize> {
        (0..self.fold_assignment.len()).filter(|&i| self.fold_assignment[i] == f).collect()
    }

    /// Positions of rows used for training when fold `f` is held out.
    pub fn train_rows(&self, f: usize) -> Vec<usize> {
        (0..self.fold_assignment.len()).filter(|&i| self.fold_assignment[i] != f).collect()
    }
}

/// Shuffles each class independently, then deals rows round-robin into folds.
///
/// Dealing continues across classes from where the previous class stopped, so
/// fold sizes differ by at most one.
pub fn stratified_kfold(data: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidHyperparameter(format!("k = {k}; need k >= 2")));
    }
    let mut rng = rng(seed);
    let mut assignment = vec![0usize; data.n_rows()];
    let mut next = 0usize;
    for class in [0u8, 1] {
        let rows = data.class_rows(class);
        if rows.len() < k {
            return Err(Error::TooFewPerClass { class, count: rows.len(), k });
        }
        for i in shuffled(rows, &mut rng) {
            assignment[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan { k, row_ids: data.row_ids.clone(), fold_assignment: assignment, seed })
}
