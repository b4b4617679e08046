//! Evaluation metrics: confusion-based scores, ranking scores, agreement coefficients,
//! the Brier score and learning curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{stratified_kfold, Dataset};
use crate::error::{Error, Result};
use crate::learners::{Classifier, LearnerSpec};
use crate::{derive_seed, rng, Warnings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Counts with class 1 as the positive class.
pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch { left: y_true.len(), right: y_pred.len() });
    }
    if y_true.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (1, 1) => cm.tp += 1,
            (0, 1) => cm.fp += 1,
            (1, 0) => cm.fn_ += 1,
            (0, 0) => cm.tn += 1,
            _ => return Err(Error::NonBinary),
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassificationScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub kappa: f64,
}

/// Names of scores whose denominator was zero (and which were therefore reported as 0).
pub type DegenerateFlags = BTreeMap<String, bool>;

fn ratio(num: f64, den: f64, name: &str, flags: &mut DegenerateFlags) -> f64 {
    let degenerate = den == 0.0;
    flags.insert(name.to_string(), degenerate);
    if degenerate {
        0.0
    } else {
        num / den
    }
}

pub fn classification_scores(cm: &ConfusionMatrix) -> (ClassificationScores, DegenerateFlags) {
    let mut flags = DegenerateFlags::new();
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let n = tp + fp + fn_ + tn;
    let precision = ratio(tp, tp + fp, "precision", &mut flags);
    let recall = ratio(tp, tp + fn_, "recall", &mut flags);
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_, "f1", &mut flags);
    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = ratio(tp * tn - fp * fn_, mcc_den, "mcc", &mut flags);
    let p_o = (tp + tn) / n;
    let p_e = ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (n * n);
    let kappa = ratio(p_o - p_e, 1.0 - p_e, "kappa", &mut flags);
    (ClassificationScores { precision, recall, f1, mcc, kappa }, flags)
}

fn check_binary(y: &[u8]) -> Result<()> {
    if y.iter().any(|&l| l > 1) {
        return Err(Error::NonBinary);
    }
    Ok(())
}

/// Mann-Whitney estimate of P(score of a random positive > score of a random negative), ties ½.
pub fn roc_auc(y_true: &[u8], scores: &[f64]) -> Result<f64> {
    if y_true.len() != scores.len() {
        return Err(Error::LengthMismatch { left: y_true.len(), right: scores.len() });
    }
    check_binary(y_true)?;
    let n_pos = y_true.iter().filter(|&&l| l == 1).count();
    let n_neg = y_true.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| y_true[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Average precision over descending score thresholds, tied scores grouped into one step.
pub fn pr_auc(y_true: &[u8], scores: &[f64]) -> Result<f64> {
    if y_true.len() != scores.len() {
        return Err(Error::LengthMismatch { left: y_true.len(), right: scores.len() });
    }
    check_binary(y_true)?;
    let n_pos = y_true.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if y_true[k] == 1 { tp += 1 } else { fp += 1 }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

pub fn brier(y_true: &[u8], probabilities: &[f64]) -> Result<f64> {
    if y_true.len() != probabilities.len() {
        return Err(Error::LengthMismatch { left: y_true.len(), right: probabilities.len() });
    }
    if y_true.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_binary(y_true)?;
    if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::OutOfRange);
    }
    let sse: f64 = y_true.iter().zip(probabilities).map(|(&y, &p)| (p - f64::from(y)).powi(2)).sum();
    Ok(sse / y_true.len() as f64)
}

pub fn accuracy(y_true: &[u8], y_pred: &[u8]) -> Result<f64> {
    let cm = confusion(y_true, y_pred)?;
    Ok((cm.tp + cm.tn) as f64 / cm.total() as f64)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub mcc: f64,
    pub kappa: f64,
    pub brier: f64,
    pub support: ConfusionMatrix,
    pub n: usize,
    pub degenerate: DegenerateFlags,
}

impl MetricsReport {
    /// Column order used by `metrics.csv`.
    pub const COLUMNS: [&'static str; 8] =
        ["precision", "recall", "f1", "roc_auc", "pr_auc", "mcc", "kappa", "brier"];

    pub fn values(&self) -> [f64; 8] {
        [self.precision, self.recall, self.f1, self.roc_auc, self.pr_auc, self.mcc, self.kappa, self.brier]
    }
}

pub fn evaluate(y_true: &[u8], y_pred: &[u8], probabilities: &[f64]) -> Result<MetricsReport> {
    if y_true.len() != probabilities.len() {
        return Err(Error::LengthMismatch { left: y_true.len(), right: probabilities.len() });
    }
    let cm = confusion(y_true, y_pred)?;
    let (s, degenerate) = classification_scores(&cm);
    Ok(MetricsReport {
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        roc_auc: roc_auc(y_true, probabilities)?,
        pr_auc: pr_auc(y_true, probabilities)?,
        mcc: s.mcc,
        kappa: s.kappa,
        brier: brier(y_true, probabilities)?,
        support: cm,
        n: y_true.len(),
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningCurveRow {
    pub train_size: usize,
    pub mean_train_accuracy: f64,
    pub mean_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub rows: Vec<LearningCurveRow>,
}

/// Stratified subsample of `size` rows (positions into `data`).
fn stratified_subsample(data: &Dataset, size: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut r = rng(seed);
    let pos = data.class_rows(1);
    let mut neg = data.class_rows(0);
    let mut pos = pos;
    let n_pos = ((size as f64 * pos.len() as f64 / data.n_rows() as f64).round() as usize)
        .clamp(usize::from(size >= 2), pos.len().min(size));
    let n_neg = (size - n_pos).min(neg.len());
    pos.shuffle(&mut r);
    neg.shuffle(&mut r);
    let mut idx: Vec<usize> = pos.into_iter().take(n_pos).chain(neg.into_iter().take(n_neg)).collect();
    idx.sort_unstable();
    idx
}

pub fn learning_curve(
    spec: &LearnerSpec,
    data: &Dataset,
    train_sizes: &[usize],
    k: usize,
    seed: u64,
) -> Result<LearningCurve> {
    if train_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidHyperparameter("train sizes must be strictly increasing".into()));
    }
    let plan = stratified_kfold(data, k, seed)?;
    let folds: Vec<(Dataset, Dataset)> =
        (0..k).map(|f| (data.subset(&plan.train_rows(f)), data.subset(&plan.test_rows(f)))).collect();
    let available = folds.iter().map(|(tr, _)| tr.n_rows()).min().unwrap_or(0);
    let mut rows = Vec::with_capacity(train_sizes.len());
    let mut warnings = Warnings::new();
    for &size in train_sizes {
        if size > available {
            return Err(Error::SizeTooLarge { size, available });
        }
        let (mut train_acc, mut test_acc) = (0.0, 0.0);
        for (f, (train, test)) in folds.iter().enumerate() {
            let sub = train.subset(&stratified_subsample(train, size, derive_seed(seed, (f * 7919 + size) as u64)));
            let model = Classifier::fit(spec, &sub, &mut warnings)?;
            train_acc += accuracy(sub.labels(), &model.predict(sub.features(), 0.5)?)?;
            test_acc += accuracy(test.labels(), &model.predict(test.features(), 0.5)?)?;
        }
        rows.push(LearningCurveRow {
            train_size: size,
            mean_train_accuracy: train_acc / k as f64,
            mean_test_accuracy: test_acc / k as f64,
        });
    }
    Ok(LearningCurve { rows })
}
