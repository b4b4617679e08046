//! Base classifiers: logistic regression, k-nearest neighbours, random forest and a
//! linear SVC, all behind [`Classifier::predict_proba`].

use std::cmp::Ordering;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, sigmoid, sq_dist, Dataset, Matrix, Warnings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogregParams {
    pub l2_lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for LogregParams {
    fn default() -> Self {
        Self { l2_lambda: 1e-3, epochs: 500, learning_rate: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnParams {
    pub k: usize,
    pub seed: u64,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self { k: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubsample {
    #[default]
    Sqrt,
    All,
    Count(usize),
}

impl FeatureSubsample {
    fn resolve(self, d: usize) -> usize {
        match self {
            FeatureSubsample::Sqrt => ((d as f64).sqrt().round() as usize).clamp(1, d),
            FeatureSubsample::All => d,
            FeatureSubsample::Count(m) => m.clamp(1, d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_subsample: FeatureSubsample,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 10,
            min_leaf: 2,
            feature_subsample: FeatureSubsample::Sqrt,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvcCalibration {
    /// `sigmoid(margin)`: monotone in the margin, not a fitted calibration.
    #[default]
    LogisticMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvcParams {
    pub c: f64,
    pub epochs: usize,
    pub calibration: SvcCalibration,
    pub seed: u64,
}

impl Default for SvcParams {
    fn default() -> Self {
        Self { c: 1.0, epochs: 200, calibration: SvcCalibration::LogisticMap, seed: 0 }
    }
}

/// Algorithm choice plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum LearnerSpec {
    Logreg(LogregParams),
    Knn(KnnParams),
    Forest(ForestParams),
    Svc(SvcParams),
}

impl LearnerSpec {
    pub fn logreg() -> Self {
        LearnerSpec::Logreg(LogregParams::default())
    }
    pub fn knn(k: usize) -> Self {
        LearnerSpec::Knn(KnnParams { k, ..Default::default() })
    }
    pub fn forest() -> Self {
        LearnerSpec::Forest(ForestParams::default())
    }
    pub fn svc() -> Self {
        LearnerSpec::Svc(SvcParams::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Logreg(_) => "logreg",
            LearnerSpec::Knn(_) => "knn",
            LearnerSpec::Forest(_) => "forest",
            LearnerSpec::Svc(_) => "svc",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            LearnerSpec::Logreg(p) => p.seed,
            LearnerSpec::Knn(p) => p.seed,
            LearnerSpec::Forest(p) => p.seed,
            LearnerSpec::Svc(p) => p.seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            LearnerSpec::Logreg(p) => p.seed = seed,
            LearnerSpec::Knn(p) => p.seed = seed,
            LearnerSpec::Forest(p) => p.seed = seed,
            LearnerSpec::Svc(p) => p.seed = seed,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidHyperparameter(m.to_string()));
        match *self {
            LearnerSpec::Logreg(p) => {
                if p.epochs == 0 || !(p.learning_rate > 0.0) || !(p.l2_lambda >= 0.0) {
                    return bad("logreg needs epochs >= 1, learning_rate > 0, l2_lambda >= 0");
                }
            }
            LearnerSpec::Knn(p) => {
                if p.k == 0 {
                    return bad("knn needs k >= 1");
                }
            }
            LearnerSpec::Forest(p) => {
                if p.n_trees == 0 || p.min_leaf == 0 || p.max_depth == 0 {
                    return bad("forest needs n_trees, max_depth, min_leaf >= 1");
                }
                if p.feature_subsample == FeatureSubsample::Count(0) {
                    return bad("feature_subsample count must be >= 1");
                }
            }
            LearnerSpec::Svc(p) => {
                if p.epochs == 0 || !(p.c > 0.0) {
                    return bad("svc needs epochs >= 1 and c > 0");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { negatives: usize, positives: usize },
}

/// A CART tree stored as a flat node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    /// Positive-class frequency of the leaf reached by `x`.
    pub fn leaf_frequency(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
                TreeNode::Leaf { negatives, positives } => {
                    return positives as f64 / (negatives + positives) as f64;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClassifierState {
    Linear { weights: Vec<f64>, bias: f64 },
    Knn { x: Matrix, labels: Vec<u8>, row_ids: Vec<u64> },
    Forest { trees: Vec<DecisionTree> },
}

/// A trained base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub spec: LearnerSpec,
    pub n_features: usize,
    pub state: ClassifierState,
}

/// Mean L2-regularised logistic loss and its gradient `(loss, d/dw, d/db)`.
///
/// `loss = mean(softplus(m) - y m) + lambda/2 |w|^2` with `m = w.x + b`; the bias is not penalised.
pub fn logistic_loss_grad(weights: &[f64], bias: f64, x: &Matrix, y: &[u8], l2_lambda: f64) -> (f64, Vec<f64>, f64) {
    let n = x.nrows() as f64;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    let mut loss = 0.0;
    for (row, &label) in x.rows_iter().zip(y) {
        let m: f64 = bias + row.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>();
        let t = f64::from(label);
        let softplus = if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
        loss += softplus - t * m;
        let r = sigmoid(m) - t;
        gb += r;
        for (g, a) in gw.iter_mut().zip(row) {
            *g += r * a;
        }
    }
    loss /= n;
    gb /= n;
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / n + l2_lambda * w;
    }
    loss += 0.5 * l2_lambda * weights.iter().map(|w| w * w).sum::<f64>();
    (loss, gw, gb)
}

fn fit_logreg(p: &LogregParams, train: &Dataset) -> ClassifierState {
    let x = train.features();
    let mut w = vec![0.0; x.ncols()];
    let mut b = 0.0;
    for _ in 0..p.epochs {
        let (_, gw, gb) = logistic_loss_grad(&w, b, x, train.labels(), p.l2_lambda);
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= p.learning_rate * g;
        }
        b -= p.learning_rate * gb;
    }
    ClassifierState::Linear { weights: w, bias: b }
}

/// Pegasos subgradient descent on the hinge loss; the bias rides along as a constant feature.
fn fit_svc(p: &SvcParams, train: &Dataset) -> ClassifierState {
    let x = train.features();
    let n = x.nrows();
    let d = x.ncols();
    let lambda = 1.0 / (p.c * n as f64);
    let mut w = vec![0.0; d + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng(p.seed);
    let mut t = 0usize;
    for _ in 0..p.epochs {
        order.shuffle(&mut r);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let yi = if train.labels()[i] == 1 { 1.0 } else { -1.0 };
            let row = x.row(i);
            let margin = w[d] + row.iter().zip(&w).map(|(a, wi)| a * wi).sum::<f64>();
            let shrink = 1.0 - eta * lambda;
            for wi in w.iter_mut() {
                *wi *= shrink;
            }
            if yi * margin < 1.0 {
                for (wi, a) in w.iter_mut().zip(row) {
                    *wi += eta * yi * a;
                }
                w[d] += eta * yi;
            }
        }
    }
    let bias = w.pop().unwrap_or(0.0);
    ClassifierState::Linear { weights: w, bias }
}

struct TreeBuilder<'a> {
    x: &'a Matrix,
    y: &'a [u8],
    params: &'a ForestParams,
    n_candidates: usize,
    nodes: Vec<TreeNode>,
}

/// `n * gini`: `n - (pos^2 + neg^2) / n`.
#[inline]
fn weighted_gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let (p, q, n) = (pos as f64, (n - pos) as f64, n as f64);
    n - (p * p + q * q) / n
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, samples: &[usize]) -> usize {
        let positives = samples.iter().filter(|&&i| self.y[i] == 1).count();
        self.nodes.push(TreeNode::Leaf { negatives: samples.len() - positives, positives });
        self.nodes.len() - 1
    }

    /// Best (score, feature, threshold) over the candidate features, first found wins ties.
    fn best_split(&self, samples: &[usize], features: &[usize]) -> Option<(f64, usize, f64)> {
        let n = samples.len();
        let total_pos = samples.iter().filter(|&&i| self.y[i] == 1).count();
        let min_leaf = self.params.min_leaf;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<(f64, u8)> = Vec::with_capacity(n);
        for &f in features {
            sorted.clear();
            sorted.extend(samples.iter().map(|&i| (self.x.get(i, f), self.y[i])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for s in 0..n - 1 {
                left_pos += usize::from(sorted[s].1);
                if sorted[s].0 == sorted[s + 1].0 {
                    continue;
                }
                let nl = s + 1;
                if nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let score = weighted_gini(left_pos, nl) + weighted_gini(total_pos - left_pos, n - nl);
                if best.is_none_or(|b| score < b.0) {
                    best = Some((score, f, 0.5 * (sorted[s].0 + sorted[s + 1].0)));
                }
            }
        }
        best
    }

    fn build(&mut self, samples: Vec<usize>, depth: usize, r: &mut impl Rng) -> usize {
        let n = samples.len();
        let pos = samples.iter().filter(|&&i| self.y[i] == 1).count();
        if depth >= self.params.max_depth || n < 2 * self.params.min_leaf || pos == 0 || pos == n {
            return self.leaf(&samples);
        }
        let d = self.x.ncols();
        let features: Vec<usize> = if self.n_candidates >= d {
            (0..d).collect()
        } else {
            let mut f = index::sample(r, d, self.n_candidates).into_vec();
            f.sort_unstable();
            f
        };
        let parent = weighted_gini(pos, n);
        match self.best_split(&samples, &features) {
            Some((score, feature, threshold)) if score + 1e-12 < parent => {
                let (l, rr): (Vec<usize>, Vec<usize>) =
                    samples.iter().partition(|&&i| self.x.get(i, feature) <= threshold);
                let at = self.nodes.len();
                self.nodes.push(TreeNode::Leaf { negatives: 0, positives: 0 });
                let left = self.build(l, depth + 1, r);
                let right = self.build(rr, depth + 1, r);
                self.nodes[at] = TreeNode::Split { feature, threshold, left, right };
                at
            }
            _ => self.leaf(&samples),
        }
    }
}

fn fit_forest(p: &ForestParams, train: &Dataset) -> ClassifierState {
    let x = train.features();
    let n = x.nrows();
    let trees = (0..p.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut r = rng(p.seed.wrapping_add(t as u64));
            let samples: Vec<usize> =
                if p.bootstrap { (0..n).map(|_| r.random_range(0..n)).collect() } else { (0..n).collect() };
            let mut b = TreeBuilder {
                x,
                y: train.labels(),
                params: p,
                n_candidates: p.feature_subsample.resolve(x.ncols()),
                nodes: Vec::new(),
            };
            b.build(samples, 0, &mut r);
            DecisionTree { nodes: b.nodes }
        })
        .collect();
    ClassifierState::Forest { trees }
}

impl Classifier {
    pub fn fit(spec: &LearnerSpec, train: &Dataset, warnings: &mut Warnings) -> Result<Classifier> {
        spec.validate()?;
        if train.n_rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let single = train.n_positive() == 0 || train.n_negative() == 0;
        let state = match spec {
            LearnerSpec::Knn(_) => {
                if single {
                    warnings.push("knn fitted on a single-class training set");
                }
                ClassifierState::Knn {
                    x: train.features().clone(),
                    labels: train.labels().to_vec(),
                    row_ids: train.row_ids().to_vec(),
                }
            }
            _ if single => return Err(Error::SingleClass),
            LearnerSpec::Logreg(p) => fit_logreg(p, train),
            LearnerSpec::Forest(p) => fit_forest(p, train),
            LearnerSpec::Svc(p) => fit_svc(p, train),
        };
        Ok(Classifier { spec: *spec, n_features: train.n_features(), state })
    }

    /// Weights and bias of a linear model (logreg, svc).
    pub fn linear_parts(&self) -> Option<(&[f64], f64)> {
        match &self.state {
            ClassifierState::Linear { weights, bias } => Some((weights, *bias)),
            _ => None,
        }
    }

    /// Linear score `w.x + b` for linear models.
    pub fn decision_function(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let (w, b) = self
            .linear_parts()
            .ok_or_else(|| Error::InvalidHyperparameter(format!("{} has no linear score", self.spec.name())))?;
        Ok(x.rows_iter().map(|row| b + row.iter().zip(w).map(|(a, wi)| a * wi).sum::<f64>()).collect())
    }

    fn check_dim(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, found: x.ncols() });
        }
        Ok(())
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(match &self.state {
            ClassifierState::Linear { .. } => self.decision_function(x)?.into_iter().map(sigmoid).collect(),
            ClassifierState::Knn { x: train, labels, row_ids } => {
                let k = match self.spec {
                    LearnerSpec::Knn(p) => p.k.min(labels.len()),
                    _ => unreachable!("knn state with non-knn spec"),
                };
                (0..x.nrows())
                    .into_par_iter()
                    .map(|q| {
                        let query = x.row(q);
                        let mut cand: Vec<(f64, u64, u8)> = (0..train.nrows())
                            .map(|i| (sq_dist(query, train.row(i)), row_ids[i], labels[i]))
                            .collect();
                        let cmp = |a: &(f64, u64, u8), b: &(f64, u64, u8)| -> Ordering {
                            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
                        };
                        if k < cand.len() {
                            cand.select_nth_unstable_by(k - 1, cmp);
                        }
                        cand[..k].iter().filter(|c| c.2 == 1).count() as f64 / k as f64
                    })
                    .collect()
            }
            ClassifierState::Forest { trees } => x
                .rows_iter()
                .map(|row| trees.iter().map(|t| t.leaf_frequency(row)).sum::<f64>() / trees.len() as f64)
                .collect(),
        })
    }

    /// Label 1 iff probability >= threshold.
    pub fn predict(&self, x: &Matrix, threshold: f64) -> Result<Vec<u8>> {
        Ok(threshold_labels(&self.predict_proba(x)?, threshold))
    }
}

pub fn threshold_labels(probabilities: &[f64], threshold: f64) -> Vec<u8> {
    probabilities.iter().map(|&p| u8::from(p >= threshold)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: &[Vec<f64>], labels: &[u8]) -> Dataset {
        Dataset::from_parts(Matrix::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn logreg_separable_pair() {
        let d = ds(&[vec![0.0, 0.0], vec![1.0, 1.0]], &[0, 1]);
        let spec = LearnerSpec::Logreg(LogregParams { l2_lambda: 0.01, ..Default::default() });
        let m = Classifier::fit(&spec, &d, &mut Warnings::new()).unwrap();
        assert_eq!(m.predict(d.features(), 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn zero_weight_logreg_is_half() {
        let m = Classifier {
            spec: LearnerSpec::logreg(),
            n_features: 2,
            state: ClassifierState::Linear { weights: vec![0.0, 0.0], bias: 0.0 },
        };
        let p = m.predict_proba(&Matrix::from_rows(&[[3.0, -1.0], [0.0, 9.0]]).unwrap()).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(matches!(m.predict_proba(&Matrix::zeros(1, 3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn knn_counts_and_memorises() {
        let d = ds(&[vec![0.0], vec![1.0], vec![2.0], vec![10.0], vec![11.0]], &[1, 1, 0, 0, 0]);
        let m = Classifier::fit(&LearnerSpec::knn(3), &d, &mut Warnings::new()).unwrap();
        assert!((m.predict_proba(&Matrix::from_rows(&[[0.9]]).unwrap()).unwrap()[0] - 2.0 / 3.0).abs() < 1e-15);
        let m1 = Classifier::fit(&LearnerSpec::knn(1), &d, &mut Warnings::new()).unwrap();
        assert_eq!(m1.predict(d.features(), 0.5).unwrap(), d.labels());
        let all = Classifier::fit(&LearnerSpec::knn(5), &d, &mut Warnings::new()).unwrap();
        for p in all.predict_proba(&Matrix::from_rows(&[[-4.0], [5.0], [40.0]]).unwrap()).unwrap() {
            assert!((p - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn knn_tolerates_single_class() {
        let d = ds(&[vec![0.0], vec![1.0]], &[0, 0]);
        let mut w = Warnings::new();
        assert!(Classifier::fit(&LearnerSpec::knn(1), &d, &mut w).is_ok());
        assert_eq!(w.len(), 1);
        assert!(matches!(Classifier::fit(&LearnerSpec::logreg(), &d, &mut w), Err(Error::SingleClass)));
    }

    #[test]
    fn stump_splits_on_informative_feature() {
        // Feature 0 separates the classes at 0.5; feature 1 is noise.
        let rows = vec![
            vec![0.1, 0.7],
            vec![0.2, 0.1],
            vec![0.3, 0.9],
            vec![0.7, 0.2],
            vec![0.8, 0.8],
            vec![0.9, 0.3],
        ];
        let d = ds(&rows, &[0, 0, 0, 1, 1, 1]);
        let spec = LearnerSpec::Forest(ForestParams {
            n_trees: 1,
            max_depth: 1,
            min_leaf: 1,
            feature_subsample: FeatureSubsample::All,
            bootstrap: false,
            seed: 0,
        });
        let m = Classifier::fit(&spec, &d, &mut Warnings::new()).unwrap();
        let ClassifierState::Forest { trees } = &m.state else { panic!() };
        match trees[0].nodes[0] {
            TreeNode::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert!((threshold - 0.5).abs() < 1e-12);
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn forest_averages_leaf_frequencies() {
        let leaf = |neg, pos| DecisionTree { nodes: vec![TreeNode::Leaf { negatives: neg, positives: pos }] };
        let m = Classifier {
            spec: LearnerSpec::forest(),
            n_features: 1,
            state: ClassifierState::Forest { trees: vec![leaf(1, 4), leaf(3, 2)] },
        };
        let p = m.predict_proba(&Matrix::from_rows(&[[0.0]]).unwrap()).unwrap()[0];
        assert!((p - 0.6).abs() < 1e-15);
    }

    #[test]
    fn threshold_rule() {
        assert_eq!(threshold_labels(&[0.5, 0.49, 0.9], 0.5), vec![1, 0, 1]);
        assert_eq!(threshold_labels(&[0.0, 0.3], 0.0), vec![1, 1]);
    }

    #[test]
    fn svc_separates_blobs() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let t = i as f64 * 0.1;
            rows.push(vec![t, 2.0 + t]);
            labels.push(1);
            rows.push(vec![t, -2.0 - t]);
            labels.push(0);
        }
        let d = ds(&rows, &labels);
        let m = Classifier::fit(&LearnerSpec::svc(), &d, &mut Warnings::new()).unwrap();
        assert_eq!(m.predict(d.features(), 0.5).unwrap(), labels);
    }

    #[test]
    fn invalid_hyperparameters() {
        let d = ds(&[vec![0.0], vec![1.0]], &[0, 1]);
        for spec in [
            LearnerSpec::knn(0),
            LearnerSpec::Forest(ForestParams { n_trees: 0, ..Default::default() }),
            LearnerSpec::Svc(SvcParams { c: 0.0, ..Default::default() }),
        ] {
            assert!(matches!(Classifier::fit(&spec, &d, &mut Warnings::new()), Err(Error::InvalidHyperparameter(_))));
        }
    }
}
