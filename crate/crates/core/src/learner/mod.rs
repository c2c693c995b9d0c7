//! M-step learners behind one interface. A learner turns completed counts
//! into occurrence scores `f_occ(x)` (log-intensity) and reporting scores
//! `f_rep(x) ∈ R^d` (softmax logits) for every record.

pub mod gbt;
pub mod glm;
pub mod mlp;
pub mod tree;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{CompletedDataset, Dataset, FeatureSchema, ModelTarget, ParameterEstimates};
use crate::error::{Error, Result};

use gbt::{BoostParams, BoostedEnsemble, BoostingData, ReportingPath};
use glm::{DesignLayout, MultinomialFit, PoissonFit, ETA_CLAMP};
use mlp::{Activation, FeatureMatrix, NetworkWeights, Standardizer, TrainParams, TrainingSet};
use tree::{BinnedFeatures, TreeParams, DEFAULT_MIN_CHILD_WEIGHT};

/// Learner counters reported per M-step (Newton steps, rounds, epochs).
pub type Counters = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlmParams {
    #[serde(default = "default_newton_steps")]
    pub max_newton_steps: usize,
}

fn default_newton_steps() -> usize {
    100
}

impl Default for GlmParams {
    fn default() -> Self {
        Self { max_newton_steps: default_newton_steps() }
    }
}

/// Boosting hyperparameters. `t_first_*` rounds are used in the first EM
/// iteration and `t_later_*` in every later one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtParams {
    pub eta_occ: f64,
    pub eta_rep: f64,
    pub t_first_occ: usize,
    pub t_first_rep: usize,
    pub t_later_occ: usize,
    pub t_later_rep: usize,
    pub tree_depth_occ: usize,
    pub tree_depth_rep: usize,
    pub xgb_patience_occ: usize,
    pub xgb_patience_rep: usize,
    pub min_child_weight: f64,
    pub reporting_path: ReportingPath,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            eta_occ: 0.05,
            eta_rep: 0.01,
            t_first_occ: 20,
            t_first_rep: 20,
            t_later_occ: 40,
            t_later_rep: 10,
            tree_depth_occ: 3,
            tree_depth_rep: 3,
            xgb_patience_occ: 15,
            xgb_patience_rep: 15,
            min_child_weight: DEFAULT_MIN_CHILD_WEIGHT,
            reporting_path: ReportingPath::Expanded,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpParams {
    pub q1_occ: usize,
    pub q2_occ: usize,
    pub q1_rep: usize,
    pub q2_rep: usize,
    pub lr_occ: f64,
    pub lr_rep: f64,
    pub batch_occ: usize,
    pub batch_rep: usize,
    pub nn_patience_occ: usize,
    pub nn_patience_rep: usize,
    pub n_epoch: usize,
    pub activation: Activation,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self {
            q1_occ: 5,
            q2_occ: 5,
            q1_rep: 15,
            q2_rep: 10,
            lr_occ: 0.005,
            lr_rep: 0.0001,
            batch_occ: 64,
            batch_rep: 32,
            nn_patience_occ: 15,
            nn_patience_rep: 5,
            n_epoch: 50,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LearnerConfig {
    Glm(GlmParams),
    Gbt(GbtParams),
    Mlp(MlpParams),
}

impl LearnerConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            LearnerConfig::Glm(_) => "glm",
            LearnerConfig::Gbt(_) => "gbt",
            LearnerConfig::Mlp(_) => "mlp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        match self {
            LearnerConfig::Glm(p) if p.max_newton_steps == 0 => bad("max_newton_steps must be positive"),
            LearnerConfig::Gbt(p) => {
                if !(p.eta_occ >= 0.0 && p.eta_rep >= 0.0 && p.eta_occ.is_finite() && p.eta_rep.is_finite()) {
                    return bad("learning rates must be finite and non-negative");
                }
                if p.tree_depth_occ == 0 || p.tree_depth_rep == 0 {
                    return bad("tree depths must be at least 1");
                }
                if !(p.min_child_weight >= 0.0) {
                    return bad("min_child_weight must be non-negative");
                }
                Ok(())
            }
            LearnerConfig::Mlp(p) => {
                if [p.q1_occ, p.q2_occ, p.q1_rep, p.q2_rep, p.batch_occ, p.batch_rep].contains(&0) {
                    return bad("layer widths and batch sizes must be positive");
                }
                if !(p.lr_occ > 0.0 && p.lr_rep > 0.0) {
                    return bad("learning rates must be positive");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Everything an M-step reads.
pub struct MStepInput<'a> {
    pub data: &'a Dataset,
    pub completed: &'a CompletedDataset,
    pub train: &'a [usize],
    pub val1: &'a [usize],
    /// 1-based EM iteration.
    pub iteration: usize,
    /// EM initializer; supplies base scores at the first iteration.
    pub initial: &'a ParameterEstimates,
    pub seed: u64,
}

/// Scores of every record of the dataset an EM run works on, plus
/// learner-specific caches built once per run.
pub struct Workspace {
    pub occurrence: Vec<f64>,
    pub reporting: Vec<f64>,
    cache: Cache,
}

enum Cache {
    Glm { occ: nalgebra::DMatrix<f64>, rep: nalgebra::DMatrix<f64>, occ_active: Vec<usize>, rep_active: Vec<usize> },
    Gbt { occ: BinnedFeatures, rep: BinnedFeatures },
    Mlp { occ: FeatureMatrix, rep: FeatureMatrix },
}

/// Learner state needed to roll back to an earlier EM iteration.
#[derive(Clone, Debug)]
pub struct Snapshot {
    model: SnapshotModel,
    occurrence: Vec<f64>,
    reporting: Vec<f64>,
}

#[derive(Clone, Debug)]
enum SnapshotModel {
    Full(Box<LearnerModel>),
    /// Appending never mutates earlier rounds, so counts suffice.
    RoundCounts { occurrence: usize, reporting: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmLearner {
    pub params: GlmParams,
    pub occurrence_layout: DesignLayout,
    pub reporting_layout: DesignLayout,
    pub occurrence: Option<PoissonFit>,
    pub reporting: Option<MultinomialFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtLearner {
    pub params: GbtParams,
    pub occurrence: Option<BoostedEnsemble>,
    pub reporting: Option<BoostedEnsemble>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpLearner {
    pub params: MlpParams,
    pub occurrence_standardizer: Option<Standardizer>,
    pub reporting_standardizer: Option<Standardizer>,
    pub occurrence: Option<NetworkWeights>,
    pub reporting: Option<NetworkWeights>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LearnerModel {
    Glm(GlmLearner),
    Gbt(GbtLearner),
    Mlp(MlpLearner),
}

/// A learner bound to a feature schema and number of delay classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerHandle {
    pub schema: FeatureSchema,
    pub d: usize,
    pub model: LearnerModel,
}

fn base_occurrence_score(completed: &CompletedDataset, train: &[usize]) -> f64 {
    let mean = train.iter().map(|&i| completed.total(i)).sum::<f64>() / train.len().max(1) as f64;
    mean.max(1e-8).ln()
}

fn base_reporting_scores(initial: &ParameterEstimates) -> Vec<f64> {
    initial.p_row(0).iter().map(|p| p.ln()).collect()
}

/// Seed stream per (run seed, iteration, sub-model).
fn derive_seed(seed: u64, iteration: usize, stream: u64) -> u64 {
    let mut z = seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl LearnerHandle {
    pub fn new(config: &LearnerConfig, schema: &FeatureSchema, d: usize) -> Result<Self> {
        config.validate()?;
        let model = match config {
            LearnerConfig::Glm(p) => LearnerModel::Glm(GlmLearner {
                params: p.clone(),
                occurrence_layout: DesignLayout::new(schema, ModelTarget::Occurrence),
                reporting_layout: DesignLayout::new(schema, ModelTarget::Reporting),
                occurrence: None,
                reporting: None,
            }),
            LearnerConfig::Gbt(p) => LearnerModel::Gbt(GbtLearner { params: p.clone(), occurrence: None, reporting: None }),
            LearnerConfig::Mlp(p) => LearnerModel::Mlp(MlpLearner {
                params: p.clone(),
                occurrence_standardizer: None,
                reporting_standardizer: None,
                occurrence: None,
                reporting: None,
            }),
        };
        Ok(Self { schema: schema.clone(), d, model })
    }

    pub fn kind(&self) -> &'static str {
        match self.model {
            LearnerModel::Glm(_) => "glm",
            LearnerModel::Gbt(_) => "gbt",
            LearnerModel::Mlp(_) => "mlp",
        }
    }

    pub fn is_fitted(&self) -> bool {
        match &self.model {
            LearnerModel::Glm(m) => m.occurrence.is_some() && m.reporting.is_some(),
            LearnerModel::Gbt(m) => m.occurrence.is_some() && m.reporting.is_some(),
            LearnerModel::Mlp(m) => m.occurrence.is_some() && m.reporting.is_some(),
        }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.schema().names() != self.schema.names() {
            return Err(Error::Contract("dataset feature names differ from the fitted schema".into()));
        }
        if data.d() != self.d {
            return Err(Error::Contract(format!("dataset has d = {}, model expects {}", data.d(), self.d)));
        }
        Ok(())
    }

    /// Build the per-run caches. `train` rows define binning and
    /// standardization statistics.
    pub fn workspace(&mut self, data: &Dataset, train: &[usize]) -> Result<Workspace> {
        self.check_data(data)?;
        if train.is_empty() {
            return Err(Error::Data("the training split is empty".into()));
        }
        let all: Vec<usize> = (0..data.len()).collect();
        let cache = match &mut self.model {
            LearnerModel::Glm(m) => {
                let occ = m.occurrence_layout.matrix(data, &all);
                let rep = m.reporting_layout.matrix(data, &all);
                let occ_active = match &m.occurrence {
                    Some(f) => f.active.clone(),
                    None => glm::independent_columns(&occ.select_rows(train)),
                };
                let rep_active = match &m.reporting {
                    Some(f) => f.active.clone(),
                    None => glm::independent_columns(&rep.select_rows(train)),
                };
                Cache::Glm { occ, rep, occ_active, rep_active }
            }
            LearnerModel::Gbt(_) => Cache::Gbt {
                occ: BinnedFeatures::from_dataset(data, train, &self.schema.columns_for(ModelTarget::Occurrence))?,
                rep: BinnedFeatures::from_dataset(data, train, &self.schema.columns_for(ModelTarget::Reporting))?,
            },
            LearnerModel::Mlp(m) => {
                let occ_std = m
                    .occurrence_standardizer
                    .get_or_insert_with(|| Standardizer::fit(data, train, &self.schema.columns_for(ModelTarget::Occurrence)));
                let occ = occ_std.transform(data)?;
                let rep_std = m
                    .reporting_standardizer
                    .get_or_insert_with(|| Standardizer::fit(data, train, &self.schema.columns_for(ModelTarget::Reporting)));
                let rep = rep_std.transform(data)?;
                Cache::Mlp { occ, rep }
            }
        };
        let (occurrence, reporting) = if self.is_fitted() {
            self.predict_scores(data)?
        } else {
            (vec![0.0; data.len()], vec![0.0; data.len() * self.d])
        };
        Ok(Workspace { occurrence, reporting, cache })
    }

    /// Refit (GLM), extend (GBT) or continue training (MLP) on completed counts,
    /// then refresh the workspace scores.
    pub fn m_step(&mut self, ws: &mut Workspace, input: &MStepInput) -> Result<Counters> {
        let d = self.d;
        let mut counters = Counters::new();
        let n = input.data.len();
        if input.completed.len() != n || input.completed.d() != d {
            return Err(Error::Contract("completed data does not cover the workspace dataset".into()));
        }
        match (&mut self.model, &ws.cache) {
            (LearnerModel::Glm(m), Cache::Glm { occ, rep, occ_active, rep_active }) => {
                let y: Vec<f64> = input.train.iter().map(|&i| input.completed.total(i)).collect();
                let x = occ.select_rows(input.train);
                let init = m.occurrence.as_ref().map(|f| f.coefficients.clone());
                let fit = glm::fit_poisson_on_columns(&x, &y, init.as_deref(), m.params.max_newton_steps, occ_active)
                    .map_err(|e| annotate(e, input.iteration, "occurrence"))?;
                counters.insert("occ_newton_steps".into(), fit.newton_steps as f64);
                m.occurrence = Some(fit);

                let x = rep.select_rows(input.train);
                let mut w = Vec::with_capacity(input.train.len() * d);
                for &i in input.train {
                    w.extend_from_slice(input.completed.row(i));
                }
                let init = m.reporting.as_ref().map(|f| f.coefficients.clone());
                let fit = glm::fit_multinomial_on_columns(&x, &w, d, init.as_deref(), m.params.max_newton_steps, rep_active)
                    .map_err(|e| annotate(e, input.iteration, "reporting"))?;
                counters.insert("rep_newton_steps".into(), fit.newton_steps as f64);
                m.reporting = Some(fit);
            }
            (LearnerModel::Gbt(m), Cache::Gbt { occ, rep }) => {
                let p = m.params.clone();
                let first = m.occurrence.is_none() || m.reporting.is_none();
                if first {
                    let b = base_occurrence_score(input.completed, input.train);
                    m.occurrence = Some(BoostedEnsemble::new(vec![b], p.eta_occ));
                    let base = base_reporting_scores(input.initial);
                    m.reporting = Some(BoostedEnsemble::new(base.clone(), p.eta_rep));
                    ws.occurrence = vec![b; n];
                    ws.reporting = base.iter().copied().cycle().take(n * d).collect();
                }
                let (t_occ, t_rep) = if input.iteration <= 1 || first {
                    (p.t_first_occ, p.t_first_rep)
                } else {
                    (p.t_later_occ, p.t_later_rep)
                };
                let occ_input = BoostingData {
                    data: input.data,
                    completed: input.completed,
                    train: input.train,
                    val1: input.val1,
                    features: occ,
                };
                let params = BoostParams {
                    rounds: t_occ,
                    eta: p.eta_occ,
                    tree: TreeParams { max_depth: p.tree_depth_occ, min_child_weight: p.min_child_weight },
                    patience: p.xgb_patience_occ,
                };
                let report = gbt::boost_occurrence(m.occurrence.as_mut().unwrap(), &occ_input, params, &mut ws.occurrence)
                    .map_err(|e| annotate(e, input.iteration, "occurrence"))?;
                counters.insert("occ_rounds".into(), report.rounds_appended as f64);

                let rep_input = BoostingData { features: rep, ..occ_input };
                let params = BoostParams {
                    rounds: t_rep,
                    eta: p.eta_rep,
                    tree: TreeParams { max_depth: p.tree_depth_rep, min_child_weight: p.min_child_weight },
                    patience: p.xgb_patience_rep,
                };
                let report = gbt::boost_reporting(
                    m.reporting.as_mut().unwrap(),
                    &rep_input,
                    params,
                    p.reporting_path,
                    &mut ws.reporting,
                )
                .map_err(|e| annotate(e, input.iteration, "reporting"))?;
                counters.insert("rep_rounds".into(), report.rounds_appended as f64);
                check_finite(&ws.occurrence, &ws.reporting, input.iteration)?;
                return Ok(counters);
            }
            (LearnerModel::Mlp(m), Cache::Mlp { occ, rep }) => {
                let p = m.params.clone();
                let subset = |fm: &FeatureMatrix, rows: &[usize], targets: &dyn Fn(usize) -> Vec<f64>, width: usize| {
                    let mut inputs = Vec::with_capacity(rows.len() * fm.width);
                    let mut t = Vec::with_capacity(rows.len() * width);
                    for &i in rows {
                        inputs.extend_from_slice(&fm.values[i * fm.width..(i + 1) * fm.width]);
                        t.extend(targets(i));
                    }
                    TrainingSet { inputs, input_dim: fm.width, targets: t, target_dim: width }
                };
                let totals = |i: usize| vec![input.completed.total(i)];
                let rows = |i: usize| input.completed.row(i).to_vec();

                let init = mlp::transfer_weights(
                    m.occurrence.as_ref(),
                    &[occ.width, p.q1_occ, p.q2_occ, 1],
                    p.activation,
                    &[base_occurrence_score(input.completed, input.train)],
                    derive_seed(input.seed, input.iteration, 1),
                );
                let out = mlp::train_network(
                    &init,
                    &subset(occ, input.train, &totals, 1),
                    &subset(occ, input.val1, &totals, 1),
                    ModelTarget::Occurrence,
                    TrainParams { epochs: p.n_epoch, batch_size: p.batch_occ, learning_rate: p.lr_occ, patience: p.nn_patience_occ },
                    derive_seed(input.seed, input.iteration, 2),
                )
                .map_err(|e| annotate(e, input.iteration, "occurrence"))?;
                counters.insert("occ_epochs".into(), out.epochs_run as f64);
                counters.insert("occ_best_epoch".into(), out.best_epoch as f64);
                m.occurrence = Some(out.weights);

                let init = mlp::transfer_weights(
                    m.reporting.as_ref(),
                    &[rep.width, p.q1_rep, p.q2_rep, d],
                    p.activation,
                    &base_reporting_scores(input.initial),
                    derive_seed(input.seed, input.iteration, 3),
                );
                let out = mlp::train_network(
                    &init,
                    &subset(rep, input.train, &rows, d),
                    &subset(rep, input.val1, &rows, d),
                    ModelTarget::Reporting,
                    TrainParams { epochs: p.n_epoch, batch_size: p.batch_rep, learning_rate: p.lr_rep, patience: p.nn_patience_rep },
                    derive_seed(input.seed, input.iteration, 4),
                )
                .map_err(|e| annotate(e, input.iteration, "reporting"))?;
                counters.insert("rep_epochs".into(), out.epochs_run as f64);
                counters.insert("rep_best_epoch".into(), out.best_epoch as f64);
                m.reporting = Some(out.weights);
            }
            _ => return Err(Error::Contract("workspace was built for a different learner".into())),
        }
        let (occ, rep) = self.scores_from_cache(ws)?;
        check_finite(&occ, &rep, input.iteration)?;
        ws.occurrence = occ;
        ws.reporting = rep;
        Ok(counters)
    }

    fn scores_from_cache(&self, ws: &Workspace) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.d;
        match (&self.model, &ws.cache) {
            (LearnerModel::Glm(m), Cache::Glm { occ, rep, .. }) => {
                let (Some(fo), Some(fr)) = (&m.occurrence, &m.reporting) else {
                    return Err(Error::Contract("GLM learner is not fitted".into()));
                };
                let n = occ.nrows();
                let mut o = Vec::with_capacity(n);
                let mut r = Vec::with_capacity(n * d);
                for i in 0..n {
                    o.push(glm_linear(occ.row(i).iter().copied(), &fo.coefficients));
                    for j in 0..d {
                        r.push(glm_linear(rep.row(i).iter().copied(), &fr.coefficients[j * fr.p..(j + 1) * fr.p]));
                    }
                }
                Ok((o, r))
            }
            (LearnerModel::Mlp(m), Cache::Mlp { occ, rep }) => {
                let (Some(no), Some(nr)) = (&m.occurrence, &m.reporting) else {
                    return Err(Error::Contract("network learner is not fitted".into()));
                };
                Ok((run_network(no, occ)?, run_network(nr, rep)?))
            }
            (LearnerModel::Gbt(_), Cache::Gbt { .. }) => Ok((ws.occurrence.clone(), ws.reporting.clone())),
            _ => Err(Error::Contract("workspace was built for a different learner".into())),
        }
    }

    /// Raw scores for every record of `data`, computed from the model alone.
    pub fn predict_scores(&self, data: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_data(data)?;
        let d = self.d;
        match &self.model {
            LearnerModel::Glm(m) => {
                let (Some(fo), Some(fr)) = (&m.occurrence, &m.reporting) else {
                    return Err(Error::Contract("GLM learner is not fitted".into()));
                };
                let mut o = Vec::with_capacity(data.len());
                let mut r = Vec::with_capacity(data.len() * d);
                for rec in data.records() {
                    let xo = m.occurrence_layout.row_from_covariates(&rec.covariates);
                    o.push(glm_linear(xo.into_iter(), &fo.coefficients));
                    let xr = m.reporting_layout.row_from_covariates(&rec.covariates);
                    for j in 0..d {
                        r.push(glm_linear(xr.iter().copied(), &fr.coefficients[j * fr.p..(j + 1) * fr.p]));
                    }
                }
                Ok((o, r))
            }
            LearnerModel::Gbt(m) => {
                let (Some(eo), Some(er)) = (&m.occurrence, &m.reporting) else {
                    return Err(Error::Contract("boosted learner is not fitted".into()));
                };
                Ok((eo.predict_dataset(data), er.predict_dataset(data)))
            }
            LearnerModel::Mlp(m) => {
                let (Some(no), Some(nr), Some(so), Some(sr)) =
                    (&m.occurrence, &m.reporting, &m.occurrence_standardizer, &m.reporting_standardizer)
                else {
                    return Err(Error::Contract("network learner is not fitted".into()));
                };
                Ok((run_network(no, &so.transform(data)?)?, run_network(nr, &sr.transform(data)?)?))
            }
        }
    }

    /// `λ = exp(f_occ)`, `p = softmax(f_rep)` for every record of `data`.
    pub fn predict(&self, data: &Dataset) -> Result<ParameterEstimates> {
        let (o, r) = self.predict_scores(data)?;
        estimates_from_scores(&o, &r, self.d)
    }

    pub fn snapshot(&self, ws: &Workspace) -> Snapshot {
        let model = match &self.model {
            LearnerModel::Gbt(m) => SnapshotModel::RoundCounts {
                occurrence: m.occurrence.as_ref().map_or(0, BoostedEnsemble::n_rounds),
                reporting: m.reporting.as_ref().map_or(0, BoostedEnsemble::n_rounds),
            },
            other => SnapshotModel::Full(Box::new(other.clone())),
        };
        Snapshot { model, occurrence: ws.occurrence.clone(), reporting: ws.reporting.clone() }
    }

    pub fn restore(&mut self, snapshot: Snapshot, ws: &mut Workspace) {
        match (snapshot.model, &mut self.model) {
            (SnapshotModel::Full(m), model) => *model = *m,
            (SnapshotModel::RoundCounts { occurrence, reporting }, LearnerModel::Gbt(m)) => {
                if let Some(e) = m.occurrence.as_mut() {
                    e.truncate(occurrence);
                }
                if let Some(e) = m.reporting.as_mut() {
                    e.truncate(reporting);
                }
            }
            (SnapshotModel::RoundCounts { .. }, _) => unreachable!("round counts are only taken from boosted learners"),
        }
        ws.occurrence = snapshot.occurrence;
        ws.reporting = snapshot.reporting;
    }

    /// Schema and structure checks for models read from disk.
    pub fn validate(&self) -> Result<()> {
        let names = self.schema.names();
        match &self.model {
            LearnerModel::Glm(m) => {
                if let Some(f) = &m.occurrence {
                    if f.coefficients.len() != m.occurrence_layout.width() {
                        return Err(Error::Data("occurrence coefficients do not match the design".into()));
                    }
                }
                if let Some(f) = &m.reporting {
                    if f.d != self.d || f.p != m.reporting_layout.width() || f.coefficients.len() != f.d * f.p {
                        return Err(Error::Data("reporting coefficients do not match the design".into()));
                    }
                }
            }
            LearnerModel::Gbt(m) => {
                if let Some(e) = &m.occurrence {
                    e.validate(names)?;
                }
                if let Some(e) = &m.reporting {
                    e.validate(names)?;
                    if e.width() != self.d {
                        return Err(Error::Data("reporting ensemble width differs from d".into()));
                    }
                }
            }
            LearnerModel::Mlp(m) => {
                for (net, out) in [(&m.occurrence, 1), (&m.reporting, self.d)] {
                    if let Some(w) = net {
                        if w.output_dim() != out {
                            return Err(Error::Data("network output width is inconsistent".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn glm_linear(x: impl Iterator<Item = f64>, beta: &[f64]) -> f64 {
    x.zip(beta).map(|(a, b)| a * b).sum::<f64>().clamp(-ETA_CLAMP, ETA_CLAMP)
}

fn run_network(net: &NetworkWeights, fm: &FeatureMatrix) -> Result<Vec<f64>> {
    let w = net.output_dim();
    let n = fm.values.len() / fm.width.max(1);
    let mut out = vec![0.0; n * w];
    for (i, o) in out.chunks_mut(w).enumerate() {
        net.forward(&fm.values[i * fm.width..(i + 1) * fm.width], o)?;
    }
    Ok(out)
}

fn annotate(e: Error, iteration: usize, sub_model: &str) -> Error {
    match e {
        Error::Numerical(msg) | Error::Domain(msg) => {
            Error::Numerical(format!("EM iteration {iteration}, {sub_model} model: {msg}"))
        }
        other => other,
    }
}

fn check_finite(occ: &[f64], rep: &[f64], iteration: usize) -> Result<()> {
    if occ.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("EM iteration {iteration}, occurrence model: non-finite scores")));
    }
    if rep.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("EM iteration {iteration}, reporting model: non-finite scores")));
    }
    Ok(())
}

/// Scores are clamped to `±ETA_CLAMP` so intensities and probabilities stay
/// strictly positive.
pub fn estimates_from_scores(occ: &[f64], rep: &[f64], d: usize) -> Result<ParameterEstimates> {
    let clamp = |v: &f64| v.clamp(-ETA_CLAMP, ETA_CLAMP);
    let o: Vec<f64> = occ.iter().map(clamp).collect();
    let r: Vec<f64> = rep.iter().map(clamp).collect();
    ParameterEstimates::from_scores(&o, &r, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_is_tagged_and_strict() {
        let c: LearnerConfig = serde_json::from_str(r#"{"kind":"gbt","eta_occ":0.1}"#).unwrap();
        match &c {
            LearnerConfig::Gbt(p) => {
                assert_eq!(p.eta_occ, 0.1);
                assert_eq!(p.tree_depth_rep, 3);
            }
            _ => panic!("wrong kind"),
        }
        assert!(serde_json::from_str::<LearnerConfig>(r#"{"kind":"gbt","eta":0.1}"#).is_err());
        assert!(serde_json::from_str::<LearnerConfig>(r#"{"kind":"forest"}"#).is_err());
        let back: LearnerConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let glm: LearnerConfig = serde_json::from_str(r#"{"kind":"glm"}"#).unwrap();
        assert_eq!(glm, LearnerConfig::Glm(GlmParams::default()));
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, 1, 1), derive_seed(1, 1, 2));
        assert_ne!(derive_seed(1, 1, 1), derive_seed(1, 2, 1));
        assert_eq!(derive_seed(7, 3, 1), derive_seed(7, 3, 1));
    }
}
