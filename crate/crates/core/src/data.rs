//! Domain types: covariates, observation records, datasets, completed data and
//! parameter estimates.
//!
//! Feature names carry structure by convention:
//!
//! * `ps<j>_<name>` is a period covariate describing reporting day
//!   `occ + j - 1` (delay class `j`, 1-based);
//! * `<group>=<level>` is one indicator of a one-hot encoded categorical
//!   variable. Every level of a group is present; learners needing a
//!   reference class drop the first one themselves.
//!
//! Everything else is an entity covariate used as-is.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::softmax_into;

/// Number of observable delay classes: `min(d, tau - occ + 1)`.
pub fn compute_tau(occ_period: i64, tau: i64, d: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::InvalidRecord("d must be at least 1".into()));
    }
    if occ_period > tau {
        return Err(Error::InvalidRecord(format!(
            "occurrence period {occ_period} lies after the present time {tau}"
        )));
    }
    let horizon = (tau - occ_period + 1) as u64;
    Ok(horizon.min(d as u64) as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTarget {
    Occurrence,
    Reporting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureRole {
    Entity,
    /// Covariate of reporting day `occ + delay - 1`.
    Period { delay: usize },
}

/// Ordered, unique feature names plus the structure parsed from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct FeatureSchema {
    names: Vec<String>,
    roles: Vec<FeatureRole>,
    groups: Vec<Option<String>>,
    lookup: HashMap<String, usize>,
}

fn parse_period_prefix(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("ps")?;
    let (digits, tail) = rest.split_once('_')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let delay: usize = digits.parse().ok()?;
    (delay >= 1 && !tail.is_empty()).then_some((delay, tail))
}

impl FeatureSchema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut lookup = HashMap::with_capacity(names.len());
        let mut roles = Vec::with_capacity(names.len());
        let mut groups = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Schema("empty feature name".into()));
            }
            if lookup.insert(name.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate feature name `{name}`")));
            }
            roles.push(match parse_period_prefix(name) {
                Some((delay, _)) => FeatureRole::Period { delay },
                None => FeatureRole::Entity,
            });
            groups.push(name.split_once('=').map(|(g, _)| g.to_string()));
        }
        Ok(Self { names, roles, groups, lookup })
    }

    pub fn empty() -> Self {
        Self::new(Vec::<String>::new()).expect("empty schema is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn role(&self, i: usize) -> FeatureRole {
        self.roles[i]
    }

    /// Categorical group of column `i`, if it is a one-hot indicator.
    pub fn group(&self, i: usize) -> Option<&str> {
        self.groups[i].as_deref()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    /// Columns visible to a model: the occurrence model sees entity covariates
    /// and the occurrence-day block (`ps1_*`); the reporting model sees all.
    pub fn columns_for(&self, target: ModelTarget) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| match (target, self.roles[i]) {
                (ModelTarget::Reporting, _) => true,
                (ModelTarget::Occurrence, FeatureRole::Entity) => true,
                (ModelTarget::Occurrence, FeatureRole::Period { delay }) => delay == 1,
            })
            .collect()
    }
}

impl TryFrom<Vec<String>> for FeatureSchema {
    type Error = Error;
    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<FeatureSchema> for Vec<String> {
    fn from(schema: FeatureSchema) -> Self {
        schema.names
    }
}

/// Named covariate values of one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    entries: Vec<(String, f64)>,
}

impl FeatureVector {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name `{name}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(_, v)| *v)
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::new(self.names().map(str::to_string))
    }
}

/// One entity x occurrence-period cell. Covariate values are stored aligned
/// with the owning dataset's [`FeatureSchema`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub entity_id: String,
    pub occ_period: i64,
    pub covariates: Vec<f64>,
    /// Reported counts for delay classes `1..=tau_i`.
    pub observed_counts: Vec<u64>,
}

impl ObservationRecord {
    pub fn tau_i(&self) -> usize {
        self.observed_counts.len()
    }

    pub fn observed_total(&self) -> u64 {
        self.observed_counts.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val1,
    Val2,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: FeatureSchema,
    records: Vec<ObservationRecord>,
    d: usize,
    tau: i64,
    split: Option<Vec<Split>>,
}

impl Dataset {
    pub fn new(
        schema: FeatureSchema,
        records: Vec<ObservationRecord>,
        d: usize,
        tau: i64,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Data("d must be at least 1".into()));
        }
        if (d as i64) > tau {
            return Err(Error::Data(format!(
                "maximum delay classes d = {d} exceed the observation window tau = {tau}"
            )));
        }
        for (i, r) in records.iter().enumerate() {
            let expected = compute_tau(r.occ_period, tau, d).map_err(|e| match e {
                Error::InvalidRecord(msg) => Error::InvalidRecord(format!("record {i}: {msg}")),
                other => other,
            })?;
            if r.observed_counts.len() != expected {
                return Err(Error::InvalidRecord(format!(
                    "record {i}: {} observed counts but tau_i = {expected}",
                    r.observed_counts.len()
                )));
            }
            if r.covariates.len() != schema.len() {
                return Err(Error::InvalidRecord(format!(
                    "record {i}: {} covariates for a schema of {}",
                    r.covariates.len(),
                    schema.len()
                )));
            }
            if let Some(j) = r.covariates.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidRecord(format!(
                    "record {i}: covariate `{}` is not finite",
                    schema.name(j)
                )));
            }
        }
        Ok(Self { schema, records, d, tau, split: None })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn records(&self) -> &[ObservationRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &ObservationRecord {
        &self.records[i]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn tau(&self) -> i64 {
        self.tau
    }

    pub fn split(&self) -> Option<&[Split]> {
        self.split.as_deref()
    }

    pub fn feature_vector(&self, i: usize) -> FeatureVector {
        FeatureVector {
            entries: self
                .schema
                .names()
                .iter()
                .cloned()
                .zip(self.records[i].covariates.iter().copied())
                .collect(),
        }
    }

    /// Attach explicit split labels, one per record.
    pub fn with_split_labels(mut self, labels: Vec<Split>) -> Result<Self> {
        if labels.len() != self.records.len() {
            return Err(Error::Contract(format!(
                "{} split labels for {} records",
                labels.len(),
                self.records.len()
            )));
        }
        self.split = Some(labels);
        Ok(self)
    }

    /// Indices of records carrying `label`. Empty when no split is attached.
    pub fn rows_in(&self, label: Split) -> Vec<usize> {
        match &self.split {
            Some(s) => (0..s.len()).filter(|&i| s[i] == label).collect(),
            None => Vec::new(),
        }
    }

    /// Randomly label every non-test record as train / val1 / val2 with the
    /// given fractions. Records already labelled `Test` keep their label.
    pub fn assign_splits(self, fractions: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (a, b, c) = fractions;
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(Error::Config(format!("split fractions must be positive, got {fractions:?}")));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {}, not 1", a + b + c)));
        }
        let mut labels = self
            .split
            .clone()
            .unwrap_or_else(|| vec![Split::Train; self.records.len()]);
        let mut pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != Split::Test).collect();
        let m = pool.len();
        let n_train = ((a * m as f64).round() as usize).min(m);
        let n_val1 = ((b * m as f64).round() as usize).min(m - n_train);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pool.shuffle(&mut rng);
        for (k, &i) in pool.iter().enumerate() {
            labels[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val1 {
                Split::Val1
            } else {
                Split::Val2
            };
        }
        self.with_split_labels(labels)
    }

    /// Column-major copy of the given schema columns for the given rows.
    pub fn column_matrix(&self, rows: &[usize], columns: &[usize]) -> Vec<Vec<f64>> {
        columns
            .iter()
            .map(|&c| rows.iter().map(|&r| self.records[r].covariates[c]).collect())
            .collect()
    }
}

/// E-step output: `d` counts per record, observed cells exact and censored
/// cells replaced by expectations. Rows are aligned with the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletedDataset {
    d: usize,
    counts: Vec<f64>,
}

impl CompletedDataset {
    pub fn new(d: usize, counts: Vec<f64>) -> Result<Self> {
        if d == 0 || counts.len() % d != 0 {
            return Err(Error::Contract(format!(
                "completed counts of length {} are not a multiple of d = {d}",
                counts.len()
            )));
        }
        if let Some(v) = counts.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Contract(format!("completed count {v} is negative or not finite")));
        }
        Ok(Self { d, counts })
    }

    /// The uncensored counts of a fully observed dataset.
    pub fn from_complete_dataset(data: &Dataset) -> Result<Self> {
        let d = data.d();
        let mut counts = Vec::with_capacity(data.len() * d);
        for (i, r) in data.records().iter().enumerate() {
            if r.tau_i() != d {
                return Err(Error::Data(format!(
                    "record {i} is censored (tau_i = {} < d = {d})",
                    r.tau_i()
                )));
            }
            counts.extend(r.observed_counts.iter().map(|&n| n as f64));
        }
        Self::new(d, counts)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.counts.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.counts[i * self.d..(i + 1) * self.d]
    }

    pub fn total(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut counts = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            counts.extend_from_slice(self.row(r));
        }
        Self { d: self.d, counts }
    }
}

/// Per-record occurrence intensity and reporting probability vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimates {
    d: usize,
    lambda: Vec<f64>,
    /// Row-major `n x d`.
    p: Vec<f64>,
}

pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

impl ParameterEstimates {
    pub fn new(lambda: Vec<f64>, p: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 || p.len() != lambda.len() * d {
            return Err(Error::Contract(format!(
                "{} probabilities for {} intensities and d = {d}",
                p.len(),
                lambda.len()
            )));
        }
        for (i, &l) in lambda.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Domain(format!("record {i}: intensity {l} is not positive")));
            }
        }
        for (i, row) in p.chunks(d).enumerate() {
            if row.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
                return Err(Error::Domain(format!("record {i}: probabilities {row:?} leave (0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::Domain(format!("record {i}: probabilities sum to {s}")));
            }
        }
        Ok(Self { d, lambda, p })
    }

    /// No validation; for tests that need boundary values.
    #[cfg(test)]
    pub(crate) fn unchecked(lambda: Vec<f64>, p: Vec<f64>, d: usize) -> Self {
        Self { d, lambda, p }
    }

    /// Build from raw scores: `lambda = exp(occ_score)`, `p = softmax(rep_scores)`.
    pub fn from_scores(occurrence: &[f64], reporting: &[f64], d: usize) -> Result<Self> {
        if reporting.len() != occurrence.len() * d {
            return Err(Error::Contract("score dimensions disagree".into()));
        }
        let lambda = occurrence.iter().map(|s| s.exp()).collect();
        let mut p = vec![0.0; reporting.len()];
        for (src, dst) in reporting.chunks(d).zip(p.chunks_mut(d)) {
            softmax_into(src, dst);
        }
        Self::new(lambda, p, d)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn p_row(&self, i: usize) -> &[f64] {
        &self.p[i * self.d..(i + 1) * self.d]
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let lambda = rows.iter().map(|&r| self.lambda[r]).collect();
        let mut p = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            p.extend_from_slice(self.p_row(r));
        }
        Self { d: self.d, lambda, p }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n: usize) -> Dataset {
        let schema = FeatureSchema::new(["x"]).unwrap();
        let records = (0..n)
            .map(|i| ObservationRecord {
                entity_id: format!("e{i}"),
                occ_period: 1,
                covariates: vec![i as f64],
                observed_counts: vec![1, 0],
            })
            .collect();
        Dataset::new(schema, records, 2, 5).unwrap()
    }

    #[test]
    fn tau_examples() {
        assert_eq!(compute_tau(21, 21, 11).unwrap(), 1);
        assert_eq!(compute_tau(1, 21, 11).unwrap(), 11);
        assert_eq!(compute_tau(15, 21, 11).unwrap(), 7);
        assert!(matches!(compute_tau(22, 21, 11), Err(Error::InvalidRecord(_))));
    }

    #[test]
    fn schema_parses_roles_and_groups() {
        let s = FeatureSchema::new(["x1=1", "x1=2", "x2", "ps1_weekend", "ps11_holiday", "ps_x", "psa_b"]).unwrap();
        assert_eq!(s.group(0), Some("x1"));
        assert_eq!(s.group(2), None);
        assert_eq!(s.role(3), FeatureRole::Period { delay: 1 });
        assert_eq!(s.role(4), FeatureRole::Period { delay: 11 });
        assert_eq!(s.role(5), FeatureRole::Entity);
        assert_eq!(s.role(6), FeatureRole::Entity);
        assert_eq!(s.columns_for(ModelTarget::Occurrence), vec![0, 1, 2, 3, 5, 6]);
        assert_eq!(s.columns_for(ModelTarget::Reporting).len(), 7);
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(matches!(FeatureSchema::new(["a", "a"]), Err(Error::Schema(_))));
        assert!(FeatureVector::new(vec![("a".into(), 1.0), ("a".into(), 2.0)]).is_err());
    }

    #[test]
    fn dataset_rejects_wrong_horizon() {
        let schema = FeatureSchema::new(["x"]).unwrap();
        let bad = ObservationRecord {
            entity_id: "a".into(),
            occ_period: 5,
            covariates: vec![0.0],
            observed_counts: vec![1, 2],
        };
        assert!(matches!(Dataset::new(schema.clone(), vec![bad], 2, 5), Err(Error::InvalidRecord(_))));
        assert!(Dataset::new(schema, vec![], 6, 5).is_err());
    }

    #[test]
    fn split_counts_match_targets() {
        let ds = toy_dataset(100).assign_splits((0.64, 0.16, 0.20), 1).unwrap();
        assert_eq!(ds.rows_in(Split::Train).len(), 64);
        assert_eq!(ds.rows_in(Split::Val1).len(), 16);
        assert_eq!(ds.rows_in(Split::Val2).len(), 20);

        let small = toy_dataset(5).assign_splits((0.64, 0.16, 0.20), 1).unwrap();
        let counts = (
            small.rows_in(Split::Train).len(),
            small.rows_in(Split::Val1).len(),
            small.rows_in(Split::Val2).len(),
        );
        assert!(counts == (4, 1, 0) || counts == (3, 1, 1), "{counts:?}");
    }

    #[test]
    fn split_is_deterministic_and_respects_test_labels() {
        let a = toy_dataset(50).assign_splits((0.64, 0.16, 0.20), 9).unwrap();
        let b = toy_dataset(50).assign_splits((0.64, 0.16, 0.20), 9).unwrap();
        assert_eq!(a.split(), b.split());

        let mut labels = vec![Split::Train; 10];
        labels[3] = Split::Test;
        let ds = toy_dataset(10).with_split_labels(labels).unwrap();
        let ds = ds.assign_splits((0.5, 0.25, 0.25), 3).unwrap();
        assert_eq!(ds.split().unwrap()[3], Split::Test);
        assert_eq!(ds.rows_in(Split::Test), vec![3]);
    }

    #[test]
    fn split_fraction_errors() {
        assert!(matches!(toy_dataset(3).assign_splits((0.5, 0.5, 0.5), 1), Err(Error::Config(_))));
        assert!(matches!(toy_dataset(3).assign_splits((1.0, 0.0, 0.0), 1), Err(Error::Config(_))));
    }

    #[test]
    fn estimates_validate_simplex() {
        assert!(ParameterEstimates::new(vec![1.0], vec![0.5, 0.5], 2).is_ok());
        assert!(ParameterEstimates::new(vec![0.0], vec![0.5, 0.5], 2).is_err());
        assert!(ParameterEstimates::new(vec![1.0], vec![0.6, 0.5], 2).is_err());
        assert!(ParameterEstimates::new(vec![1.0], vec![1.0, 0.0], 2).is_err());
        let e = ParameterEstimates::from_scores(&[0.0], &[0.0; 11], 11).unwrap();
        assert!((e.p_row(0)[0] - 1.0 / 11.0).abs() < 1e-15);
    }
}
