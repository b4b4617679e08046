//! Voting and stacked ensembles over [`Classifier`]s.
//!
//! Stacking trains the meta-model on out-of-fold base probabilities and then
//! refits every base spec on the full training set for inference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::stratified_kfold;
use crate::error::{Error, Result};
use crate::learners::threshold_labels;
use crate::{derive_seed, sigmoid, Classifier, Dataset, FoldPlan, LearnerSpec, Matrix, Warnings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaLink {
    /// Meta-model probability `sigmoid(w.h + b)`.
    #[default]
    Logistic,
    /// Raw weighted sum `w.h + b`.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackingConfig {
    pub k: usize,
    pub link: MetaLink,
    /// Permit a meta-model other than logistic regression.
    pub allow_any_meta: bool,
}

impl Default for StackingConfig {
    fn default() -> Self {
        Self { k: 5, link: MetaLink::Logistic, allow_any_meta: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedEnsemble {
    pub base_specs: Vec<LearnerSpec>,
    pub base_models: Vec<Classifier>,
    pub meta_model: Classifier,
    pub fold_plan: FoldPlan,
    pub link: MetaLink,
}

/// Which training rows produced the out-of-fold predictions of each fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldTrace {
    pub fold: usize,
    pub trained_on: Vec<u64>,
    pub predicted: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StackingTrace {
    pub folds: Vec<FoldTrace>,
}

impl StackingTrace {
    /// True when no row's meta-feature came from a model that saw that row.
    pub fn is_leak_free(&self) -> bool {
        self.folds.iter().all(|f| {
            let seen: std::collections::HashSet<u64> = f.trained_on.iter().copied().collect();
            f.predicted.iter().all(|id| !seen.contains(id))
        })
    }
}

/// Seed for base spec training on fold `fold`; depends only on the spec itself.
fn fold_seed(spec: &LearnerSpec, fold: usize) -> u64 {
    derive_seed(spec.seed(), fold as u64 + 1)
}

pub fn fit_stacking(
    base_specs: &[LearnerSpec],
    meta_spec: &LearnerSpec,
    train: &Dataset,
    k: usize,
    seed: u64,
    warnings: &mut Warnings,
) -> Result<StackedEnsemble> {
    let cfg = StackingConfig { k, ..Default::default() };
    Ok(fit_stacking_with_trace(base_specs, meta_spec, train, &cfg, seed, warnings)?.0)
}

pub fn fit_stacking_with_trace(
    base_specs: &[LearnerSpec],
    meta_spec: &LearnerSpec,
    train: &Dataset,
    cfg: &StackingConfig,
    seed: u64,
    warnings: &mut Warnings,
) -> Result<(StackedEnsemble, StackingTrace)> {
    if base_specs.is_empty() {
        return Err(Error::InvalidHyperparameter("stacking needs at least one base model".into()));
    }
    if !cfg.allow_any_meta && !matches!(meta_spec, LearnerSpec::Logreg(_)) {
        return Err(Error::InvalidHyperparameter(format!(
            "meta-model must be logreg (got {}; set allow_any_meta to override)",
            meta_spec.name()
        )));
    }
    if cfg.link == MetaLink::Identity && !matches!(meta_spec, LearnerSpec::Logreg(_) | LearnerSpec::Svc(_)) {
        return Err(Error::InvalidHyperparameter("identity link needs a linear meta-model".into()));
    }
    let plan = stratified_kfold(train, cfg.k, seed)?;
    let m = base_specs.len();
    let tasks: Vec<(usize, usize)> = (0..plan.k).flat_map(|f| (0..m).map(move |s| (f, s))).collect();
    let results: Vec<Result<(Vec<f64>, Warnings)>> = tasks
        .par_iter()
        .map(|&(f, s)| {
            let mut w = Warnings::new();
            let spec = base_specs[s].with_seed(fold_seed(&base_specs[s], f));
            let model = Classifier::fit(&spec, &train.subset(&plan.train_rows(f)), &mut w)?;
            let test = train.features().select_rows(&plan.test_rows(f));
            Ok((model.predict_proba(&test)?, w))
        })
        .collect();

    let mut meta_x = Matrix::zeros(train.n_rows(), m);
    for (&(f, s), r) in tasks.iter().zip(results) {
        let (probs, w) = r?;
        warnings.extend(w.prefixed(&format!("stacking fold {f}, base {s}")));
        for (&row, p) in plan.test_rows(f).iter().zip(probs) {
            meta_x.set(row, s, p);
        }
    }
    let trace = StackingTrace {
        folds: (0..plan.k)
            .map(|f| FoldTrace {
                fold: f,
                trained_on: plan.train_rows(f).iter().map(|&i| train.row_ids()[i]).collect(),
                predicted: plan.test_rows(f).iter().map(|&i| train.row_ids()[i]).collect(),
            })
            .collect(),
    };

    let names = (0..m).map(|s| format!("h{s}_{}", base_specs[s].name())).collect();
    let meta_data = train.with_features(meta_x, names)?;
    let meta_model = Classifier::fit(meta_spec, &meta_data, warnings)?;
    let fitted: Vec<Result<(Classifier, Warnings)>> = base_specs
        .par_iter()
        .map(|spec| {
            let mut w = Warnings::new();
            Ok((Classifier::fit(spec, train, &mut w)?, w))
        })
        .collect();
    let mut base_models = Vec::with_capacity(m);
    for (s, r) in fitted.into_iter().enumerate() {
        let (model, w) = r?;
        warnings.extend(w.prefixed(&format!("stacking base {s}")));
        base_models.push(model);
    }
    let model = StackedEnsemble { base_specs: base_specs.to_vec(), base_models, meta_model, fold_plan: plan, link: cfg.link };
    Ok((model, trace))
}

impl StackedEnsemble {
    /// Base probabilities, one column per base model.
    pub fn meta_features(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.nrows(), self.base_models.len());
        for (s, model) in self.base_models.iter().enumerate() {
            for (i, p) in model.predict_proba(x)?.into_iter().enumerate() {
                out.set(i, s, p);
            }
        }
        Ok(out)
    }

    /// Meta-model weights over base models with their bias, when linear.
    pub fn meta_weights(&self) -> Option<(&[f64], f64)> {
        self.meta_model.linear_parts()
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        predict_stacking(self, x)
    }
}

pub fn predict_stacking(model: &StackedEnsemble, x: &Matrix) -> Result<Vec<f64>> {
    let h = model.meta_features(x)?;
    match model.link {
        MetaLink::Logistic => model.meta_model.predict_proba(&h),
        MetaLink::Identity => model.meta_model.decision_function(&h),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingEnsemble {
    pub models: Vec<Classifier>,
    pub mode: VoteMode,
}

impl VotingEnsemble {
    pub fn new(models: Vec<Classifier>, mode: VoteMode) -> Result<Self> {
        if models.len() < 2 {
            return Err(Error::InvalidHyperparameter("voting needs at least 2 models".into()));
        }
        Ok(Self { models, mode })
    }

    pub fn fit(specs: &[LearnerSpec], mode: VoteMode, train: &Dataset, warnings: &mut Warnings) -> Result<Self> {
        let models = specs.iter().map(|s| Classifier::fit(s, train, warnings)).collect::<Result<Vec<_>>>()?;
        Self::new(models, mode)
    }

    fn member_probabilities(&self, x: &Matrix) -> Result<Vec<Vec<f64>>> {
        self.models.iter().map(|m| m.predict_proba(x)).collect()
    }

    /// Labels, plus the mean member probability in soft mode.
    pub fn vote(&self, x: &Matrix, threshold: f64) -> Result<(Vec<u8>, Option<Vec<f64>>)> {
        let probs = self.member_probabilities(x)?;
        let m = self.models.len() as f64;
        let mean: Vec<f64> = (0..x.nrows()).map(|i| probs.iter().map(|p| p[i]).sum::<f64>() / m).collect();
        match self.mode {
            VoteMode::Soft => Ok((threshold_labels(&mean, threshold), Some(mean))),
            VoteMode::Hard => {
                let labels = (0..x.nrows())
                    .map(|i| {
                        let yes = probs.iter().filter(|p| p[i] >= threshold).count();
                        let no = self.models.len() - yes;
                        match yes.cmp(&no) {
                            std::cmp::Ordering::Greater => 1,
                            std::cmp::Ordering::Less => 0,
                            std::cmp::Ordering::Equal => u8::from(mean[i] > threshold),
                        }
                    })
                    .collect();
                Ok((labels, None))
            }
        }
    }

    /// Ranking score: mean probability (soft) or fraction of positive votes (hard).
    pub fn scores(&self, x: &Matrix, threshold: f64) -> Result<Vec<f64>> {
        let probs = self.member_probabilities(x)?;
        let m = self.models.len() as f64;
        Ok((0..x.nrows())
            .map(|i| match self.mode {
                VoteMode::Soft => probs.iter().map(|p| p[i]).sum::<f64>() / m,
                VoteMode::Hard => probs.iter().filter(|p| p[i] >= threshold).count() as f64 / m,
            })
            .collect())
    }
}

/// `sigmoid(w.h + b)` for an explicit meta weight vector.
pub fn logistic_combiner(weights: &[f64], bias: f64, h: &[f64]) -> f64 {
    sigmoid(bias + weights.iter().zip(h).map(|(w, v)| w * v).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{ClassifierState, LogregParams};

    fn linear(weights: Vec<f64>, bias: f64) -> Classifier {
        Classifier {
            spec: LearnerSpec::logreg(),
            n_features: weights.len(),
            state: ClassifierState::Linear { weights, bias },
        }
    }

    fn two_blobs(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut r = crate::rng(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = u8::from(i % 4 == 0);
            let c = if y == 1 { 1.5 } else { -0.5 };
            rows.push(vec![c + r.random_range(-1.0..1.0), c + r.random_range(-1.0..1.0)]);
            labels.push(y);
        }
        Dataset::from_parts(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn hand_set_meta_weights() {
        let p = logistic_combiner(&[2.0, -1.0], 0.0, &[0.9, 0.1]);
        assert!((p - 1.0 / (1.0 + (-1.7f64).exp())).abs() < 1e-15);
        assert!((p - 0.845_534_734).abs() < 1e-9);
        assert_eq!(logistic_combiner(&[0.0, 0.0], 0.0, &[0.5, 0.5]), 0.5);
    }

    #[test]
    fn hard_and_soft_votes() {
        // Constant-probability members: bias only.
        let c = |p: f64| linear(vec![0.0], (p / (1.0 - p)).ln());
        let x = Matrix::from_rows(&[[0.0]]).unwrap();
        let hard = VotingEnsemble::new(vec![c(0.9), c(0.2), c(0.8)], VoteMode::Hard).unwrap();
        assert_eq!(hard.vote(&x, 0.5).unwrap().0, vec![1]);
        let soft = VotingEnsemble::new(vec![c(0.9), c(0.2), c(0.2)], VoteMode::Soft).unwrap();
        let (l, p) = soft.vote(&x, 0.5).unwrap();
        assert_eq!(l, vec![0]);
        assert!((p.unwrap()[0] - 1.3 / 3.0).abs() < 1e-12);
        let tie = VotingEnsemble::new(vec![c(0.9), c(0.5 - 1e-9)], VoteMode::Hard).unwrap();
        assert_eq!(tie.vote(&x, 0.5).unwrap().0, vec![1]);
        let tie0 = VotingEnsemble::new(vec![c(0.6), c(0.1)], VoteMode::Hard).unwrap();
        assert_eq!(tie0.vote(&x, 0.5).unwrap().0, vec![0]);
        assert!(VotingEnsemble::new(vec![c(0.6)], VoteMode::Hard).is_err());
    }

    #[test]
    fn stacking_trace_is_leak_free() {
        let d = two_blobs(20, 3);
        let (model, trace) = fit_stacking_with_trace(
            &[LearnerSpec::logreg(), LearnerSpec::knn(3)],
            &LearnerSpec::logreg(),
            &d,
            &StackingConfig::default(),
            9,
            &mut Warnings::new(),
        )
        .unwrap();
        assert!(trace.is_leak_free());
        let mut predicted: Vec<u64> = trace.folds.iter().flat_map(|f| f.predicted.clone()).collect();
        predicted.sort_unstable();
        assert_eq!(predicted, d.row_ids().to_vec());
        assert_eq!(model.meta_model.n_features, 2);
        let p = model.predict(d.features()).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_link_is_weighted_sum() {
        let d = two_blobs(40, 5);
        let cfg = StackingConfig { link: MetaLink::Identity, ..Default::default() };
        let (model, _) = fit_stacking_with_trace(
            &[LearnerSpec::logreg(), LearnerSpec::forest()],
            &LearnerSpec::logreg(),
            &d,
            &cfg,
            1,
            &mut Warnings::new(),
        )
        .unwrap();
        let out = model.predict(d.features()).unwrap();
        let h = model.meta_features(d.features()).unwrap();
        let (w, b) = model.meta_weights().unwrap();
        for (i, o) in out.iter().enumerate() {
            assert_eq!(*o, b + h.row(i).iter().zip(w).map(|(a, wi)| a * wi).sum::<f64>());
        }
    }

    #[test]
    fn meta_must_be_logreg_without_override() {
        let d = two_blobs(20, 1);
        let r = fit_stacking(&[LearnerSpec::logreg()], &LearnerSpec::knn(3), &d, 5, 0, &mut Warnings::new());
        assert!(matches!(r, Err(Error::InvalidHyperparameter(_))));
        let p = LearnerSpec::Logreg(LogregParams::default());
        assert!(fit_stacking(&[p], &p, &d, 10, 0, &mut Warnings::new()).is_err());
    }
}
