//! Config-driven experiment grid: split once, then for every run fit the scaler,
//! representation, resampler and model on training rows only and score the
//! untouched test rows.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, ArtifactKind};
use crate::data::{fit_scaler, load_csv, train_test_split};
use crate::ensemble::{fit_stacking_with_trace, MetaLink, StackingConfig};
use crate::error::{Error, Result};
use crate::explain::{
    aggregate_ensemble_shap, ice_curves, ice_file_name, permutation_importance, shapley_exact, shapley_sampled,
    write_ice_csv, write_pip_csv, write_shap_csv, GridKind, ImportanceMetric, Predict, Reduction,
};
use crate::learners::{threshold_labels, ForestParams, KnnParams};
use crate::metrics::evaluate;
use crate::resample::resample;
use crate::tsne::{fit_tsne, write_embedding_csv};
use crate::vae::{train_vae, Activation, Likelihood, TrainRows, VaeTrainConfig};
use crate::{
    derive_seed, fnv1a, Attribution, Background, Classifier, Dataset, Embedding, IceResult, ImportanceRanking,
    LearnerSpec, Matrix, MetricsReport, ResampleSpec, ScalerKind, ScalerParams, StackedEnsemble, TrainedVae,
    TsneConfig, VaeArchitecture, VoteMode, VotingEnsemble, Warnings,
};

const SALT_RESAMPLE: u64 = 1;
const SALT_VAE: u64 = 2;
const SALT_TSNE: u64 = 3;
const SALT_MODEL: u64 = 4;
const SALT_FOLDS: u64 = 5;
const SALT_BACKGROUND: u64 = 6;
const SALT_PIP: u64 = 7;
const SALT_SHAP: u64 = 8;

fn default_label() -> String {
    "Class".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default = "default_label")]
    pub label_column: String,
    #[serde(default)]
    pub scaler: ScalerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub test_fraction: f64,
    /// Defaults to the master seed.
    pub seed: Option<u64>,
    pub stratified: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { test_fraction: 0.3, seed: None, stratified: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub k: usize,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    #[default]
    Raw,
    Tsne,
    Vae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logreg,
    Knn,
    Svc,
    Forest,
    VotingHard,
    VotingSoft,
    Stacking,
}

impl ModelKind {
    fn default_spec(self) -> Option<LearnerSpec> {
        match self {
            ModelKind::Logreg => Some(LearnerSpec::logreg()),
            ModelKind::Knn => Some(LearnerSpec::knn(5)),
            ModelKind::Svc => Some(LearnerSpec::svc()),
            ModelKind::Forest => Some(LearnerSpec::forest()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    /// Defaults to one layer of width `2 * input_dim`.
    pub hidden_dims: Option<Vec<usize>>,
    pub latent_dim: usize,
    pub hidden_activation: Activation,
    pub dropout_rate: f64,
    pub decoder_likelihood: Likelihood,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_on: TrainRows,
}

impl Default for VaeSection {
    fn default() -> Self {
        let t = VaeTrainConfig::default();
        Self {
            hidden_dims: None,
            latent_dim: 2,
            hidden_activation: Activation::Linear,
            dropout_rate: 0.2,
            decoder_likelihood: Likelihood::GaussianUnitVariance,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            train_on: t.train_on,
        }
    }
}

impl VaeSection {
    pub fn architecture(&self, input_dim: usize) -> VaeArchitecture {
        VaeArchitecture {
            input_dim,
            hidden_dims: self.hidden_dims.clone().unwrap_or_else(|| vec![2 * input_dim]),
            latent_dim: self.latent_dim,
            hidden_activation: self.hidden_activation,
            dropout_rate: self.dropout_rate,
            decoder_likelihood: self.decoder_likelihood,
        }
    }

    pub fn train_config(&self, seed: u64) -> VaeTrainConfig {
        VaeTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            train_on: self.train_on,
        }
    }
}

fn default_members() -> Vec<LearnerSpec> {
    vec![
        LearnerSpec::logreg(),
        LearnerSpec::Knn(KnnParams { k: 5, ..Default::default() }),
        LearnerSpec::Forest(ForestParams { n_trees: 50, ..Default::default() }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub members: Vec<LearnerSpec>,
    pub meta: LearnerSpec,
    pub link: MetaLink,
    pub allow_any_meta: bool,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { members: default_members(), meta: LearnerSpec::logreg(), link: MetaLink::Logistic, allow_any_meta: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationWeights {
    /// Normalised absolute meta-model weights.
    #[default]
    MetaAbs,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainOptions {
    /// Number of leading test rows attributed by SHAP.
    pub rows: usize,
    pub background_rows: usize,
    pub reduction: Reduction,
    /// Exact Shapley values up to this many features, sampled beyond.
    pub exact_feature_limit: usize,
    pub n_permutations: usize,
    pub aggregation: AggregationWeights,
    pub pip_metric: ImportanceMetric,
    pub pip_repeats: usize,
    pub grid_size: usize,
    pub grid_kind: GridKind,
    /// Number of leading test rows drawn as ICE curves.
    pub ice_rows: usize,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self {
            rows: 10,
            background_rows: 100,
            reduction: Reduction::PerRowAverage,
            exact_feature_limit: 15,
            n_permutations: 200,
            aggregation: AggregationWeights::MetaAbs,
            pip_metric: ImportanceMetric::PrAuc,
            pip_repeats: 10,
            grid_size: 20,
            grid_kind: GridKind::Quantile,
            ice_rows: 200,
        }
    }
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    #[serde(default)]
    pub resample: ResampleSpec,
    #[serde(default)]
    pub representation: Representation,
    pub model: ModelKind,
    /// Hyperparameters for single-learner models.
    #[serde(default)]
    pub learner: Option<LearnerSpec>,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub vae: VaeSection,
    #[serde(default)]
    pub tsne: TsneConfig,
    /// Any of `shap`, `pip`, `ice:<feature>`.
    #[serde(default)]
    pub explain: Vec<String>,
    #[serde(default)]
    pub explain_options: ExplainOptions,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl RunSpec {
    pub fn new(name: impl Into<String>, model: ModelKind) -> Self {
        Self {
            name: name.into(),
            resample: ResampleSpec::default(),
            representation: Representation::Raw,
            model,
            learner: None,
            ensemble: EnsembleSection::default(),
            vae: VaeSection::default(),
            tsne: TsneConfig::default(),
            explain: Vec::new(),
            explain_options: ExplainOptions::default(),
            threshold: 0.5,
        }
    }

    pub fn explain_request(&self) -> Result<ExplainRequest> {
        let mut req = ExplainRequest::default();
        for (i, item) in self.explain.iter().enumerate() {
            match item.as_str() {
                "shap" => req.shap = true,
                "pip" => req.pip = true,
                s if s.starts_with("ice:") && s.len() > 4 => {
                    req.ice.extend(s[4..].split(',').map(|f| f.trim().to_string()).filter(|f| !f.is_empty()));
                }
                other => {
                    return Err(Error::config(
                        format!("grid.{}.explain[{i}]", self.name),
                        format!("unknown explanation {other:?}; expected shap, pip or ice:<feature>"),
                    ))
                }
            }
        }
        Ok(req)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExplainRequest {
    pub shap: bool,
    pub pip: bool,
    pub ice: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub cv: CvSection,
    pub grid: Vec<RunSpec>,
}

impl ExperimentConfig {
    /// Parses TOML; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path, origin: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(origin, e.to_string()))?;
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(value)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { origin.to_string() } else { path }, e.into_inner().to_string())
        })?;
        if cfg.dataset.path.is_relative() {
            cfg.dataset.path = base_dir.join(&cfg.dataset.path);
        }
        if let Some(out) = &cfg.output_dir {
            if out.is_relative() {
                cfg.output_dir = Some(base_dir.join(out));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::config("grid", "grid must contain at least one run"));
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::config("split.test_fraction", "must lie in (0, 1)"));
        }
        if self.cv.k < 2 {
            return Err(Error::config("cv.k", "must be >= 2"));
        }
        let mut names = HashSet::new();
        for (i, run) in self.grid.iter().enumerate() {
            let at = |field: &str| format!("grid[{i}].{field}");
            if run.name.trim().is_empty() {
                return Err(Error::config(at("name"), "run names must be non-empty"));
            }
            if !names.insert(run.name.as_str()) {
                return Err(Error::config(at("name"), format!("duplicate run name {:?}", run.name)));
            }
            run.explain_request()?;
            run.resample.validate().map_err(|e| Error::config(at("resample"), e.to_string()))?;
            if !(run.threshold > 0.0 && run.threshold < 1.0) {
                return Err(Error::config(at("threshold"), "must lie in (0, 1)"));
            }
            match (run.model.default_spec(), &run.learner) {
                (Some(default), Some(spec)) => {
                    if spec.name() != default.name() {
                        return Err(Error::config(
                            at("learner.algorithm"),
                            format!("model is {} but learner.algorithm is {}", default.name(), spec.name()),
                        ));
                    }
                    spec.validate().map_err(|e| Error::config(at("learner"), e.to_string()))?;
                }
                (None, Some(_)) => {
                    return Err(Error::config(at("learner"), "ensemble models take ensemble.members instead"))
                }
                _ => {}
            }
            if matches!(run.model, ModelKind::VotingHard | ModelKind::VotingSoft) && run.ensemble.members.len() < 2 {
                return Err(Error::config(at("ensemble.members"), "voting needs at least 2 members"));
            }
            if run.model == ModelKind::Stacking {
                if run.ensemble.members.is_empty() {
                    return Err(Error::config(at("ensemble.members"), "stacking needs at least 1 member"));
                }
                if !run.ensemble.allow_any_meta && !matches!(run.ensemble.meta, LearnerSpec::Logreg(_)) {
                    return Err(Error::config(at("ensemble.meta"), "meta-model must be logreg unless allow_any_meta"));
                }
            }
            for (m, spec) in run.ensemble.members.iter().enumerate() {
                spec.validate().map_err(|e| Error::config(at(&format!("ensemble.members[{m}]")), e.to_string()))?;
            }
            if run.representation == Representation::Vae {
                let v = &run.vae;
                if v.decoder_likelihood == Likelihood::Bernoulli && self.dataset.scaler == ScalerKind::Zscore {
                    return Err(Error::config(
                        at("vae.decoder_likelihood"),
                        "bernoulli decoder needs inputs in [0, 1]; use dataset.scaler = \"minmax\"",
                    ));
                }
                if v.latent_dim == 0 || v.epochs == 0 || v.batch_size == 0 || !(v.learning_rate > 0.0) {
                    return Err(Error::config(at("vae"), "latent_dim, epochs, batch_size and learning_rate must be positive"));
                }
                if !(0.0..1.0).contains(&v.dropout_rate) {
                    return Err(Error::config(at("vae.dropout_rate"), "must lie in [0, 1)"));
                }
            }
            let req = run.explain_request()?;
            if run.representation == Representation::Tsne && (req.shap || req.pip || !req.ice.is_empty()) {
                return Err(Error::config(at("explain"), "t-SNE has no out-of-sample map; explanations need raw or vae"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding `output_dir`.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        container::sha256_hex(&serde_json::to_vec(&c).expect("config serialises"))
    }
}

/// Stage at which training rows were observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FitScaler,
    Resample,
    TrainVae,
    Fit,
    FitStacking,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    pub run: String,
    pub stage: Stage,
    pub row_ids: Vec<u64>,
}

/// Records every row id handed to a fitting stage.
#[derive(Debug, Default)]
pub struct LeakageAudit {
    records: Mutex<Vec<AuditRecord>>,
}

impl LeakageAudit {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, run: &str, stage: Stage, row_ids: &[u64]) {
        self.records.lock().expect("audit lock").push(AuditRecord {
            run: run.to_string(),
            stage,
            row_ids: row_ids.to_vec(),
        });
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.lock().expect("audit lock").clone()
    }

    /// Number of (record, row) pairs whose row id is in `test_ids`.
    pub fn contacts(&self, test_ids: &[u64]) -> usize {
        let test: HashSet<u64> = test_ids.iter().copied().collect();
        self.records().iter().map(|r| r.row_ids.iter().filter(|id| test.contains(id)).count()).sum()
    }

    pub fn stages(&self) -> HashSet<Stage> {
        self.records().iter().map(|r| r.stage).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedRepresentation {
    Raw,
    Vae(TrainedVae),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedModel {
    Single(Classifier),
    Voting(VotingEnsemble),
    Stacking(StackedEnsemble),
}

impl FittedModel {
    /// Ranking score (probability, vote fraction, or stacked output).
    pub fn score(&self, x: &Matrix, threshold: f64) -> Result<Vec<f64>> {
        match self {
            FittedModel::Single(c) => c.predict_proba(x),
            FittedModel::Voting(v) => v.scores(x, threshold),
            FittedModel::Stacking(s) => s.predict(x),
        }
    }

    pub fn labels(&self, x: &Matrix, threshold: f64) -> Result<Vec<u8>> {
        match self {
            FittedModel::Voting(v) => Ok(v.vote(x, threshold)?.0),
            _ => Ok(threshold_labels(&self.score(x, threshold)?, threshold)),
        }
    }
}

/// A complete fitted pipeline, from original features to a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub name: String,
    pub feature_names: Vec<String>,
    pub label_column: String,
    pub scaler: ScalerParams,
    pub representation: FittedRepresentation,
    pub model: FittedModel,
    pub threshold: f64,
    /// Unscaled training rows used as the default explanation background.
    pub background: Matrix,
    pub explain_options: ExplainOptions,
}

impl Pipeline {
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        let scaled = self.scaler.scale_matrix(x)?;
        match &self.representation {
            FittedRepresentation::Raw => Ok(scaled),
            FittedRepresentation::Vae(v) => v.latent_features(&scaled),
        }
    }

    pub fn score(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.model.score(&self.transform(x)?, self.threshold)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<u8>> {
        self.model.labels(&self.transform(x)?, self.threshold)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::save(path, ArtifactKind::Pipeline, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        container::load(path, ArtifactKind::Pipeline)
    }

    pub fn default_background(&self) -> Result<Background> {
        Background::new(self.background.clone(), self.explain_options.reduction)
    }
}

/// End-to-end Shapley values for the given rows of `data` (original features).
pub fn explain_shap(
    pipeline: &Pipeline,
    data: &Dataset,
    rows: &[usize],
    background: &Background,
    seed: u64,
) -> Result<Vec<Attribution>> {
    let f = |m: &Matrix| pipeline.score(m);
    shap_with(&f, data, rows, background, &pipeline.explain_options, seed)
}

fn shap_with(
    f: &Predict,
    data: &Dataset,
    rows: &[usize],
    background: &Background,
    opts: &ExplainOptions,
    seed: u64,
) -> Result<Vec<Attribution>> {
    rows.par_iter()
        .map(|&i| {
            let x = data.features().row(i);
            let id = data.row_ids()[i];
            if data.n_features() <= opts.exact_feature_limit {
                shapley_exact(f, x, id, background, opts.exact_feature_limit)
            } else {
                shapley_sampled(f, x, id, background, opts.n_permutations, derive_seed(seed, id))
            }
        })
        .collect()
}

/// Per-base-model end-to-end attributions of a stacking pipeline, averaged with
/// the configured weights.
pub fn explain_shap_aggregate(
    pipeline: &Pipeline,
    data: &Dataset,
    rows: &[usize],
    background: &Background,
    seed: u64,
) -> Result<Option<(Vec<Attribution>, Vec<f64>)>> {
    let FittedModel::Stacking(stack) = &pipeline.model else { return Ok(None) };
    let m = stack.base_models.len();
    let weights: Vec<f64> = match (pipeline.explain_options.aggregation, stack.meta_weights()) {
        (AggregationWeights::MetaAbs, Some((w, _))) if w.iter().any(|v| v.abs() > 0.0) => {
            let total: f64 = w.iter().map(|v| v.abs()).sum();
            w.iter().map(|v| v.abs() / total).collect()
        }
        _ => vec![1.0 / m as f64; m],
    };
    let per_model: Vec<Vec<Attribution>> = stack
        .base_models
        .iter()
        .map(|base| {
            let f = |x: &Matrix| base.predict_proba(&pipeline.transform(x)?);
            shap_with(&f, data, rows, background, &pipeline.explain_options, seed)
        })
        .collect::<Result<_>>()?;
    let aggregated = (0..rows.len())
        .map(|r| {
            let atts: Vec<Attribution> = per_model.iter().map(|a| a[r].clone()).collect();
            aggregate_ensemble_shap(&atts, &weights)
        })
        .collect::<Result<_>>()?;
    Ok(Some((aggregated, weights)))
}

pub fn explain_pip(pipeline: &Pipeline, data: &Dataset, seed: u64) -> Result<ImportanceRanking> {
    let f = |m: &Matrix| pipeline.score(m);
    let o = &pipeline.explain_options;
    permutation_importance(&f, data, o.pip_metric, o.pip_repeats, seed)
}

pub fn explain_ice(pipeline: &Pipeline, data: &Dataset, feature: &str) -> Result<IceResult> {
    let f = |m: &Matrix| pipeline.score(m);
    let o = &pipeline.explain_options;
    ice_curves(&f, data, feature, o.grid_size, o.grid_kind)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunExplanations {
    pub shap: Option<Vec<Attribution>>,
    pub shap_aggregate: Option<(Vec<Attribution>, Vec<f64>)>,
    pub pip: Option<ImportanceRanking>,
    pub ice: Vec<IceResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub name: String,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub warnings: Warnings,
    pub pipeline: Option<Pipeline>,
    pub explanations: RunExplanations,
    /// t-SNE runs: embedding of train followed by test rows, with their ids.
    pub embedding: Option<(Vec<u64>, Embedding)>,
    pub feature_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Environment {
    pub master_seed: u64,
    pub artifact_version: String,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    /// Run names in grid order.
    pub order: Vec<String>,
    pub runs: BTreeMap<String, std::result::Result<RunResult, String>>,
    pub environment: Environment,
    pub warnings: Vec<String>,
    pub test_row_ids: Vec<u64>,
}

impl ReportBundle {
    pub fn metrics(&self, name: &str) -> Option<&MetricsReport> {
        self.runs.get(name).and_then(|r| r.as_ref().ok()).map(|r| &r.metrics)
    }

    pub fn failed_runs(&self) -> Vec<&str> {
        self.order.iter().filter(|n| matches!(self.runs.get(*n), Some(Err(_)))).map(String::as_str).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let runs: serde_json::Map<String, serde_json::Value> = self
            .runs
            .iter()
            .map(|(name, r)| {
                let v = match r {
                    Ok(run) => serde_json::to_value(&run.metrics).expect("metrics serialise"),
                    Err(msg) => serde_json::json!({ "error": msg }),
                };
                (name.clone(), v)
            })
            .collect();
        serde_json::json!({
            "runs": runs,
            "environment": self.environment,
            "warnings": self.warnings,
        })
    }

    pub fn report_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(&self.to_json()).expect("report serialises");
        bytes.push(b'\n');
        bytes
    }

    pub fn metrics_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["name"];
        header.extend(MetricsReport::COLUMNS);
        w.write_record(&header)?;
        for name in &self.order {
            if let Some(m) = self.metrics(name) {
                let mut rec = vec![name.clone()];
                rec.extend(m.values().iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses all cores. Results do not depend on it.
    pub jobs: Option<usize>,
}

pub fn run_experiment(config: &ExperimentConfig, options: RunOptions) -> Result<ReportBundle> {
    run_experiment_audited(config, options, &LeakageAudit::new())
}

pub fn run_experiment_audited(config: &ExperimentConfig, options: RunOptions, audit: &LeakageAudit) -> Result<ReportBundle> {
    config.validate()?;
    let data = load_csv(&config.dataset.path, &config.dataset.label_column)?;
    run_experiment_on(config, &data, options, audit)
}

/// Runs the grid on an already loaded dataset (`config.dataset.path` is ignored).
pub fn run_experiment_on(
    config: &ExperimentConfig,
    data: &Dataset,
    options: RunOptions,
    audit: &LeakageAudit,
) -> Result<ReportBundle> {
    config.validate()?;
    let split_seed = config.split.seed.unwrap_or(config.seed);
    let (train, test) = train_test_split(data, config.split.test_fraction, config.split.stratified, split_seed)?;
    let work = || -> Vec<std::result::Result<RunResult, String>> {
        config
            .grid
            .par_iter()
            .map(|run| {
                run_one(config, run, &train, &test, audit)
                    .map_err(|e| Error::Run { run: run.name.clone(), source: Box::new(e) }.to_string())
            })
            .collect()
    };
    let results = match options.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidHyperparameter(format!("cannot build thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let mut warnings = Vec::new();
    let mut runs = BTreeMap::new();
    for (spec, r) in config.grid.iter().zip(results) {
        if let Ok(run) = &r {
            warnings.extend(run.warnings.iter().map(|w| format!("[{}] {w}", spec.name)));
        }
        runs.insert(spec.name.clone(), r);
    }
    Ok(ReportBundle {
        order: config.grid.iter().map(|r| r.name.clone()).collect(),
        runs,
        environment: Environment {
            master_seed: config.seed,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: config.digest(),
        },
        warnings,
        test_row_ids: test.row_ids().to_vec(),
    })
}

/// Per-run seed: master seed xor FNV-1a of the run name.
pub fn run_seed(master: u64, name: &str) -> u64 {
    master ^ fnv1a(name.as_bytes())
}

fn member_specs(members: &[LearnerSpec], seed: u64) -> Vec<LearnerSpec> {
    members.iter().enumerate().map(|(i, s)| s.with_seed(derive_seed(seed, i as u64))).collect()
}

fn run_one(config: &ExperimentConfig, run: &RunSpec, train: &Dataset, test: &Dataset, audit: &LeakageAudit) -> Result<RunResult> {
    let seed = run_seed(config.seed, &run.name);
    let mut warnings = Warnings::new();
    let name = run.name.as_str();

    audit.record(name, Stage::FitScaler, train.row_ids());
    let scaler = fit_scaler(train, config.dataset.scaler, &mut warnings)?;
    let train_s = train.with_features(scaler.scale_matrix(train.features())?, train.feature_names().to_vec())?;
    let test_s = test.with_features(scaler.scale_matrix(test.features())?, test.feature_names().to_vec())?;
    let excursions = scaler.range_excursions(test_s.features());
    if excursions > 0 && config.dataset.scaler == ScalerKind::Minmax {
        warnings.push(format!("{excursions} test value(s) fall outside the training min-max range"));
    }

    let mut embedding = None;
    let (representation, train_r, test_r) = match run.representation {
        Representation::Raw => (FittedRepresentation::Raw, train_s, test_s),
        Representation::Vae => {
            let arch = run.vae.architecture(train.n_features());
            let cfg = run.vae.train_config(derive_seed(seed, SALT_VAE));
            let used: Vec<u64> = match cfg.train_on {
                TrainRows::Normal => train_s.class_rows(0).iter().map(|&i| train_s.row_ids()[i]).collect(),
                TrainRows::All => train_s.row_ids().to_vec(),
            };
            audit.record(name, Stage::TrainVae, &used);
            let vae = train_vae(&train_s, &arch, &cfg, &mut warnings)?;
            let names: Vec<String> = (1..=arch.latent_dim).map(|j| format!("z{j}")).collect();
            let tr = train_s.with_features(vae.latent_features(train_s.features())?, names.clone())?;
            let te = test_s.with_features(vae.latent_features(test_s.features())?, names)?;
            (FittedRepresentation::Vae(vae), tr, te)
        }
        Representation::Tsne => {
            let mut cfg = run.tsne.clone();
            cfg.seed = derive_seed(seed, SALT_TSNE);
            let all = train_s.features().vstack(test_s.features())?;
            let emb = fit_tsne(&all, &cfg, &mut warnings)?;
            let n = train_s.n_rows();
            let names: Vec<String> = (1..=cfg.dim).map(|j| format!("y{j}")).collect();
            let idx_train: Vec<usize> = (0..n).collect();
            let idx_test: Vec<usize> = (n..all.nrows()).collect();
            let tr = train_s.with_features(emb.y.select_rows(&idx_train), names.clone())?;
            let te = test_s.with_features(emb.y.select_rows(&idx_test), names)?;
            let ids = train_s.row_ids().iter().chain(test_s.row_ids()).copied().collect();
            embedding = Some((ids, emb));
            (FittedRepresentation::Raw, tr, te)
        }
    };

    let mut rspec = run.resample;
    rspec.seed = derive_seed(seed, SALT_RESAMPLE);
    audit.record(name, Stage::Resample, train_r.row_ids());
    let fit_data = resample(&train_r, &rspec, &mut warnings)?;

    let model_seed = derive_seed(seed, SALT_MODEL);
    let model = match run.model {
        ModelKind::VotingHard | ModelKind::VotingSoft => {
            audit.record(name, Stage::Fit, fit_data.row_ids());
            let mode = if run.model == ModelKind::VotingHard { VoteMode::Hard } else { VoteMode::Soft };
            let specs = member_specs(&run.ensemble.members, model_seed);
            FittedModel::Voting(VotingEnsemble::fit(&specs, mode, &fit_data, &mut warnings)?)
        }
        ModelKind::Stacking => {
            audit.record(name, Stage::FitStacking, fit_data.row_ids());
            let specs = member_specs(&run.ensemble.members, model_seed);
            let cfg = StackingConfig {
                k: config.cv.k,
                link: run.ensemble.link,
                allow_any_meta: run.ensemble.allow_any_meta,
            };
            let (stack, trace) = fit_stacking_with_trace(
                &specs,
                &run.ensemble.meta,
                &fit_data,
                &cfg,
                derive_seed(seed, SALT_FOLDS),
                &mut warnings,
            )?;
            if !trace.is_leak_free() {
                return Err(Error::InvalidDataset("out-of-fold meta-features overlap their training rows".into()));
            }
            FittedModel::Stacking(stack)
        }
        single => {
            audit.record(name, Stage::Fit, fit_data.row_ids());
            let spec = run.learner.or(single.default_spec()).expect("single-learner model").with_seed(model_seed);
            FittedModel::Single(Classifier::fit(&spec, &fit_data, &mut warnings)?)
        }
    };

    let scores = model.score(test_r.features(), run.threshold)?;
    let labels = model.labels(test_r.features(), run.threshold)?;
    let clipped: Vec<f64> = scores.iter().map(|s| s.clamp(0.0, 1.0)).collect();
    if clipped != scores {
        warnings.push("scores outside [0, 1] were clipped for the Brier score");
    }
    let metrics = evaluate(test.labels(), &labels, &clipped)?;
    for (k, _) in metrics.degenerate.iter().filter(|(_, &d)| d) {
        warnings.push(format!("{k} is degenerate (set to 0)"));
    }

    let pipeline = match (&run.representation, &embedding) {
        (Representation::Tsne, _) => None,
        _ => {
            let bg = Background::sample(
                train.features(),
                run.explain_options.background_rows,
                run.explain_options.reduction,
                derive_seed(seed, SALT_BACKGROUND),
            )?;
            Some(Pipeline {
                name: run.name.clone(),
                feature_names: train.feature_names().to_vec(),
                label_column: config.dataset.label_column.clone(),
                scaler,
                representation,
                model,
                threshold: run.threshold,
                background: bg.reference_rows,
                explain_options: run.explain_options,
            })
        }
    };

    let mut explanations = RunExplanations::default();
    let req = run.explain_request()?;
    if let Some(p) = &pipeline {
        let opts = &run.explain_options;
        if req.shap {
            let rows: Vec<usize> = (0..opts.rows.min(test.n_rows())).collect();
            let bg = p.default_background()?;
            let shap_seed = derive_seed(seed, SALT_SHAP);
            explanations.shap = Some(explain_shap(p, test, &rows, &bg, shap_seed)?);
            explanations.shap_aggregate = explain_shap_aggregate(p, test, &rows, &bg, shap_seed)?;
            if explanations.shap_aggregate.is_some() {
                warnings.push(format!("member SHAP aggregation weights: {:?}", opts.aggregation));
            }
        }
        if req.pip {
            explanations.pip = Some(explain_pip(p, test, derive_seed(seed, SALT_PIP))?);
        }
        if !req.ice.is_empty() {
            let rows: Vec<usize> = (0..opts.ice_rows.min(test.n_rows())).collect();
            let sub = test.subset(&rows);
            for feature in &req.ice {
                explanations.ice.push(explain_ice(p, &sub, feature)?);
            }
        }
    }

    Ok(RunResult {
        name: run.name.clone(),
        seed,
        metrics,
        warnings,
        pipeline,
        explanations,
        embedding,
        feature_names: train.feature_names().to_vec(),
    })
}

/// Lowercase alphanumeric directory name for a run.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    let trimmed = out.trim_matches('_');
    if trimmed.is_empty() {
        "run".to_string()
    } else {
        trimmed.to_string()
    }
}

/// Unique directory name per run, in grid order.
pub fn run_dirs(order: &[String]) -> Vec<(String, String)> {
    let mut seen: HashSet<String> = HashSet::new();
    order
        .iter()
        .map(|name| {
            let base = slug(name);
            let mut candidate = base.clone();
            let mut n = 2;
            while !seen.insert(candidate.clone()) {
                candidate = format!("{base}-{n}");
                n += 1;
            }
            (name.clone(), candidate)
        })
        .collect()
}

/// Writes `report.json`, `metrics.csv` and each run's artifacts into `dir`.
pub fn emit_report(bundle: &ReportBundle, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let report = dir.join("report.json");
    std::fs::write(&report, bundle.report_json_bytes())?;
    written.push(report);
    let metrics = dir.join("metrics.csv");
    std::fs::write(&metrics, bundle.metrics_csv_bytes()?)?;
    written.push(metrics);

    for (name, sub) in run_dirs(&bundle.order) {
        let Some(Ok(run)) = bundle.runs.get(&name) else { continue };
        let run_dir = dir.join(sub);
        std::fs::create_dir_all(&run_dir)?;
        if let Some(p) = &run.pipeline {
            let path = run_dir.join("model.svead");
            p.save(&path)?;
            written.push(path);
        }
        if let Some((ids, emb)) = &run.embedding {
            let path = run_dir.join("embedding.csv");
            write_embedding_csv(&path, ids, emb)?;
            written.push(path);
        }
        let ex = &run.explanations;
        if let Some(shap) = &ex.shap {
            let path = run_dir.join("shap.csv");
            write_shap_csv(&path, shap, &run.feature_names)?;
            written.push(path);
        }
        if let Some((agg, _)) = &ex.shap_aggregate {
            let path = run_dir.join("shap_members.csv");
            write_shap_csv(&path, agg, &run.feature_names)?;
            written.push(path);
        }
        if let Some(pip) = &ex.pip {
            let path = run_dir.join("pip.csv");
            write_pip_csv(&path, pip)?;
            written.push(path);
        }
        for ice in &ex.ice {
            let path = run_dir.join(ice_file_name(&ice.feature_name));
            write_ice_csv(&path, ice)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[dataset]
path = "data.csv"
[[grid]]
name = "logreg raw"
model = "logreg"
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL, Path::new("/tmp/x"), "cfg").unwrap();
        assert_eq!(c.dataset.path, PathBuf::from("/tmp/x/data.csv"));
        assert_eq!(c.dataset.label_column, "Class");
        assert_eq!(c.split.test_fraction, 0.3);
        assert_eq!(c.cv.k, 5);
        assert_eq!(c.grid[0].representation, Representation::Raw);
    }

    #[test]
    fn unknown_keys_are_config_errors_with_paths() {
        let bad = MINIMAL.replace("model = \"logreg\"", "model = \"logreg\"\ncolour = 1");
        match ExperimentConfig::from_toml_str(&bad, Path::new("."), "cfg") {
            Err(Error::Config { path, .. }) => assert!(path.starts_with("grid[0]"), "{path}"),
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace("[dataset]", "[dataset]\nscaler = \"robust\"");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&bad, Path::new("."), "cfg"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn nested_learner_tables() {
        let text = format!(
            "{MINIMAL}\n[[grid]]\nname = \"st\"\nmodel = \"stacking\"\nrepresentation = \"vae\"\nexplain = [\"shap\", \"ice:v1\"]\n\
             [grid.resample]\nmethod = \"smote_tomek\"\n[grid.vae]\nepochs = 3\n\
             [[grid.ensemble.members]]\nalgorithm = \"forest\"\nn_trees = 7\n\
             [[grid.ensemble.members]]\nalgorithm = \"knn\"\nk = 3\n"
        );
        let c = ExperimentConfig::from_toml_str(&text, Path::new("."), "cfg").unwrap();
        let st = &c.grid[1];
        assert_eq!(st.ensemble.members.len(), 2);
        assert!(matches!(st.ensemble.members[0], LearnerSpec::Forest(p) if p.n_trees == 7));
        assert_eq!(st.explain_request().unwrap(), ExplainRequest { shap: true, pip: false, ice: vec!["v1".into()] });
    }

    #[test]
    fn semantic_validation() {
        let dup = format!("{MINIMAL}\n[[grid]]\nname = \"logreg raw\"\nmodel = \"knn\"\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&dup, Path::new("."), "c"), Err(Error::Config { .. })));
        let bern = format!(
            "{MINIMAL}\n[[grid]]\nname = \"v\"\nmodel = \"logreg\"\nrepresentation = \"vae\"\n[grid.vae]\ndecoder_likelihood = \"bernoulli\"\n"
        );
        assert!(matches!(ExperimentConfig::from_toml_str(&bern, Path::new("."), "c"), Err(Error::Config { .. })));
        let mismatch = MINIMAL.replace("model = \"logreg\"", "model = \"logreg\"\nlearner = { algorithm = \"knn\" }");
        assert!(matches!(ExperimentConfig::from_toml_str(&mismatch, Path::new("."), "c"), Err(Error::Config { .. })));
        let empty = "[dataset]\npath = \"d.csv\"\ngrid = []\n";
        assert!(ExperimentConfig::from_toml_str(empty, Path::new("."), "c").is_err());
    }

    #[test]
    fn slugs_are_unique() {
        let dirs = run_dirs(&["SMOTETomek + VAE + stacking".into(), "smotetomek vae stacking".into()]);
        assert_eq!(dirs[0].1, "smotetomek_vae_stacking");
        assert_eq!(dirs[1].1, "smotetomek_vae_stacking-2");
    }

    #[test]
    fn run_seed_mixes_name() {
        assert_ne!(run_seed(1, "a"), run_seed(1, "b"));
        assert_eq!(run_seed(0, "a"), fnv1a(b"a"));
    }
}
