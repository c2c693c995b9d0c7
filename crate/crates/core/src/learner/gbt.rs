//! Additive gradient boosting with the Poisson (log link) and softmax
//! objectives. Trees accumulate across EM iterations: every M-step starts from
//! the previous iteration's ensemble and only appends.

use serde::{Deserialize, Serialize};

use super::tree::{fit_regression_tree, BinnedFeatures, RegressionTree, TreeParams};
use crate::data::{CompletedDataset, Dataset};
use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, softmax_into};

pub const ENSEMBLE_FORMAT: &str = "nowcast-gbt-ensemble";
pub const ENSEMBLE_VERSION: u32 = 1;

/// `g_i = exp(f_i) - N_i`, `h_i = exp(f_i)`.
pub fn occurrence_grad_hess(scores: &[f64], totals: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != totals.len() {
        return Err(Error::Contract("scores and totals differ in length".into()));
    }
    let mut g = Vec::with_capacity(scores.len());
    let mut h = Vec::with_capacity(scores.len());
    for (&f, &n) in scores.iter().zip(totals) {
        if !f.is_finite() {
            return Err(Error::Domain(format!("non-finite occurrence score {f}")));
        }
        let mu = f.exp();
        g.push(mu - n);
        h.push(mu);
    }
    Ok((g, h))
}

/// Weighted softmax gradients for rows of an `n x d` score matrix with class
/// labels `labels[i] ∈ 0..d`: `G_ij = w_i (s_ij - y_ij)`, `H_ij = w_i s_ij (1 - s_ij)`.
pub fn reporting_grad_hess(
    scores: &[f64],
    labels: &[usize],
    weights: &[f64],
    d: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = labels.len();
    if d == 0 || scores.len() != n * d || weights.len() != n {
        return Err(Error::Contract("reporting gradient inputs disagree in shape".into()));
    }
    let mut g = vec![0.0; n * d];
    let mut h = vec![0.0; n * d];
    let mut s = vec![0.0; d];
    for i in 0..n {
        let row = &scores[i * d..(i + 1) * d];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite reporting scores in row {i}")));
        }
        if labels[i] >= d {
            return Err(Error::Contract(format!("label {} outside 0..{d}", labels[i])));
        }
        softmax_into(row, &mut s);
        let w = weights[i];
        for j in 0..d {
            let y = if labels[i] == j { 1.0 } else { 0.0 };
            g[i * d + j] = w * (s[j] - y);
            h[i * d + j] = w * s[j] * (1.0 - s[j]);
        }
    }
    Ok((g, h))
}

/// One row per reported event: delay label, source row and weight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpandedRows {
    /// Position in the `rows` slice the expansion was built from.
    pub source: Vec<u32>,
    /// 0-based delay class.
    pub label: Vec<usize>,
    pub weight: Vec<f64>,
}

impl ExpandedRows {
    pub fn len(&self) -> usize {
        self.label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label.is_empty()
    }
}

/// Expand completed counts of `rows` into unit-weight rows plus one
/// fractional row per cell with a non-integer count.
pub fn expand_reporting_dataset(completed: &CompletedDataset, rows: &[usize]) -> Result<ExpandedRows> {
    let d = completed.d();
    let mut out = ExpandedRows::default();
    for (pos, &i) in rows.iter().enumerate() {
        for (j, &n) in completed.row(i).iter().enumerate() {
            if !(n.is_finite() && n >= 0.0) {
                return Err(Error::Contract(format!("record {i}, delay {}: count {n}", j + 1)));
            }
            let whole = n.floor();
            let frac = n - whole;
            let copies = whole as usize + usize::from(frac > 0.0);
            for c in 0..copies {
                out.source.push(pos as u32);
                out.label.push(j);
                out.weight.push(if c < whole as usize { 1.0 } else { frac });
            }
        }
    }
    debug_assert!(out.label.iter().all(|&j| j < d));
    Ok(out)
}

/// `Σ w ln p[source][label]` for a row-major probability matrix indexed by source.
pub fn expanded_log_likelihood(rows: &ExpandedRows, p: &[f64], d: usize) -> f64 {
    let terms: Vec<f64> = (0..rows.len())
        .map(|k| rows.weight[k] * p[rows.source[k] as usize * d + rows.label[k]].ln())
        .collect();
    pairwise_sum(&terms)
}

/// `f(x) = base + eta · Σ_rounds tree(x)` per output; `width` = 1 for the
/// occurrence model and `d` for the reporting model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    pub base_score: Vec<f64>,
    pub eta: f64,
    /// Each round holds one tree per output.
    pub rounds: Vec<Vec<RegressionTree>>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleDocument {
    format: String,
    version: u32,
    ensemble: BoostedEnsemble,
}

impl BoostedEnsemble {
    pub fn new(base_score: Vec<f64>, eta: f64) -> Self {
        Self { base_score, eta, rounds: Vec::new() }
    }

    pub fn width(&self) -> usize {
        self.base_score.len()
    }

    pub fn n_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Scores for one schema-aligned covariate row. The accumulation order
    /// (base, then rounds in order) is the same as incremental updates use.
    pub fn predict_into(&self, covariates: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.base_score);
        for round in &self.rounds {
            for (o, tree) in out.iter_mut().zip(round) {
                *o += self.eta * tree.predict(covariates);
            }
        }
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Vec<f64> {
        let w = self.width();
        let mut out = vec![0.0; data.len() * w];
        for (i, chunk) in out.chunks_mut(w).enumerate() {
            self.predict_into(&data.record(i).covariates, chunk);
        }
        out
    }

    /// Drop rounds beyond `n`.
    pub fn truncate(&mut self, n: usize) {
        self.rounds.truncate(n);
    }

    pub fn validate(&self, schema_names: &[String]) -> Result<()> {
        if self.base_score.is_empty() || self.base_score.iter().any(|b| !b.is_finite()) || !self.eta.is_finite() {
            return Err(Error::Data("ensemble base scores and eta must be finite".into()));
        }
        for round in &self.rounds {
            if round.len() != self.width() {
                return Err(Error::Data("ensemble round width differs from base score width".into()));
            }
            for t in round {
                t.validate(schema_names)?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&EnsembleDocument {
            format: ENSEMBLE_FORMAT.into(),
            version: ENSEMBLE_VERSION,
            ensemble: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: EnsembleDocument = serde_json::from_str(text)?;
        if doc.format != ENSEMBLE_FORMAT || doc.version != ENSEMBLE_VERSION {
            return Err(Error::Data(format!("unsupported ensemble document {} v{}", doc.format, doc.version)));
        }
        Ok(doc.ensemble)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoostParams {
    pub rounds: usize,
    pub eta: f64,
    pub tree: TreeParams,
    pub patience: usize,
}

/// Gradient source for the reporting trees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportingPath {
    /// One weighted row per reported event.
    #[default]
    Expanded,
    /// Per-record statistics `N_i p_ij - N_ij` and `N_i p_ij (1 - p_ij)`.
    Weighted,
}

/// Everything a boosting call reads. Units of `features` are `train` rows
/// in order; `scores` covers every record of `data` and is updated in place.
pub struct BoostingData<'a> {
    pub data: &'a Dataset,
    pub completed: &'a CompletedDataset,
    pub train: &'a [usize],
    pub val1: &'a [usize],
    pub features: &'a BinnedFeatures,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoostReport {
    pub rounds_appended: usize,
    pub stopped_early: bool,
    /// Validation criterion before the first and after every appended round.
    pub val1_trace: Vec<f64>,
}

fn apply_round(data: &Dataset, eta: f64, round: &[RegressionTree], scores: &mut [f64]) {
    let w = round.len();
    for (i, chunk) in scores.chunks_mut(w).enumerate() {
        let cov = &data.record(i).covariates;
        for (s, tree) in chunk.iter_mut().zip(round) {
            *s += eta * tree.predict(cov);
        }
    }
}

fn occurrence_criterion(scores: &[f64], completed: &CompletedDataset, rows: &[usize]) -> f64 {
    let terms: Vec<f64> = rows.iter().map(|&i| -scores[i].exp() + completed.total(i) * scores[i]).collect();
    pairwise_sum(&terms)
}

fn reporting_criterion(scores: &[f64], completed: &CompletedDataset, rows: &[usize]) -> f64 {
    let d = completed.d();
    let mut p = vec![0.0; d];
    let mut terms = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        softmax_into(&scores[i * d..(i + 1) * d], &mut p);
        for (&n, &q) in completed.row(i).iter().zip(&p) {
            if n != 0.0 {
                terms.push(n * q.ln());
            }
        }
    }
    pairwise_sum(&terms)
}

/// Shared round loop: `fit_round` builds one round from the current scores.
fn boost<F>(
    ensemble: &mut BoostedEnsemble,
    input: &BoostingData,
    params: BoostParams,
    scores: &mut [f64],
    criterion: impl Fn(&[f64]) -> f64,
    mut fit_round: F,
) -> Result<BoostReport>
where
    F: FnMut(&[f64]) -> Result<Vec<RegressionTree>>,
{
    let mut report = BoostReport::default();
    let use_val = !input.val1.is_empty();
    let mut best = if use_val { criterion(scores) } else { f64::NEG_INFINITY };
    report.val1_trace.push(best);
    let mut since_best = 0;
    for _ in 0..params.rounds {
        let round = fit_round(scores)?;
        apply_round(input.data, ensemble.eta, &round, scores);
        ensemble.rounds.push(round);
        report.rounds_appended += 1;
        if !use_val {
            continue;
        }
        let value = criterion(scores);
        if !value.is_finite() {
            return Err(Error::Numerical("validation criterion became non-finite".into()));
        }
        report.val1_trace.push(value);
        if value > best {
            best = value;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= params.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

/// Append at most `params.rounds` occurrence trees. `scores` holds the current
/// log-intensity of every record and is kept in sync with the ensemble.
pub fn boost_occurrence(
    ensemble: &mut BoostedEnsemble,
    input: &BoostingData,
    params: BoostParams,
    scores: &mut [f64],
) -> Result<BoostReport> {
    if ensemble.width() != 1 || scores.len() != input.data.len() {
        return Err(Error::Contract("occurrence ensemble and score vector must have width 1".into()));
    }
    let totals: Vec<f64> = input.train.iter().map(|&i| input.completed.total(i)).collect();
    let units: Vec<u32> = (0..input.train.len() as u32).collect();
    let train_scores = |scores: &[f64]| -> Vec<f64> { input.train.iter().map(|&i| scores[i]).collect() };
    boost(
        ensemble,
        input,
        params,
        scores,
        |s| occurrence_criterion(s, input.completed, input.val1),
        |s| {
            let (g, h) = occurrence_grad_hess(&train_scores(s), &totals)?;
            Ok(vec![fit_regression_tree(input.features, &units, &g, &h, params.tree)?])
        },
    )
}

/// Append at most `params.rounds` rounds of `d` reporting trees.
pub fn boost_reporting(
    ensemble: &mut BoostedEnsemble,
    input: &BoostingData,
    params: BoostParams,
    path: ReportingPath,
    scores: &mut [f64],
) -> Result<BoostReport> {
    let d = input.completed.d();
    if ensemble.width() != d || scores.len() != input.data.len() * d {
        return Err(Error::Contract("reporting ensemble width must equal d".into()));
    }
    let m = input.train.len();
    let expanded = match path {
        ReportingPath::Expanded => Some(expand_reporting_dataset(input.completed, input.train)?),
        ReportingPath::Weighted => None,
    };
    let units: Vec<u32> = (0..m as u32)
        .filter(|&u| input.completed.total(input.train[u as usize]) > 0.0)
        .collect();
    if units.is_empty() {
        return Ok(BoostReport::default());
    }
    boost(
        ensemble,
        input,
        params,
        scores,
        |s| reporting_criterion(s, input.completed, input.val1),
        |s| {
            let (g, h) = match &expanded {
                Some(rows) => expanded_unit_stats(rows, s, input.train, d, m)?,
                None => weighted_unit_stats(input.completed, s, input.train, d)?,
            };
            let mut round = Vec::with_capacity(d);
            let mut gj = vec![0.0; m];
            let mut hj = vec![0.0; m];
            for j in 0..d {
                for u in 0..m {
                    gj[u] = g[u * d + j];
                    hj[u] = h[u * d + j];
                }
                round.push(fit_regression_tree(input.features, &units, &gj, &hj, params.tree)?);
            }
            Ok(round)
        },
    )
}

/// Per-sample gradients of the expanded rows, summed over samples sharing a
/// source row (consecutive by construction).
fn expanded_unit_stats(
    rows: &ExpandedRows,
    scores: &[f64],
    train: &[usize],
    d: usize,
    m: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sample_scores = Vec::with_capacity(rows.len() * d);
    for &src in &rows.source {
        let i = train[src as usize];
        sample_scores.extend_from_slice(&scores[i * d..(i + 1) * d]);
    }
    let (gs, hs) = reporting_grad_hess(&sample_scores, &rows.label, &rows.weight, d)?;
    let mut g = vec![0.0; m * d];
    let mut h = vec![0.0; m * d];
    for (k, &src) in rows.source.iter().enumerate() {
        let u = src as usize;
        for j in 0..d {
            g[u * d + j] += gs[k * d + j];
            h[u * d + j] += hs[k * d + j];
        }
    }
    Ok((g, h))
}

fn weighted_unit_stats(
    completed: &CompletedDataset,
    scores: &[f64],
    train: &[usize],
    d: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = vec![0.0; train.len() * d];
    let mut h = vec![0.0; train.len() * d];
    let mut p = vec![0.0; d];
    for (u, &i) in train.iter().enumerate() {
        let row = &scores[i * d..(i + 1) * d];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite reporting scores for record {i}")));
        }
        softmax_into(row, &mut p);
        let counts = completed.row(i);
        let total: f64 = counts.iter().sum();
        for j in 0..d {
            g[u * d + j] = total * p[j] - counts[j];
            h[u * d + j] = total * p[j] * (1.0 - p[j]);
        }
    }
    Ok((g, h))
}
