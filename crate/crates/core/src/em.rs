//! The EM loop: initialization, E-step, learner M-steps, validation-based
//! early stopping with best-iteration restore, and nowcast extraction.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{CompletedDataset, Dataset, ParameterEstimates, Split};
use crate::error::{Error, Result};
use crate::learner::{Counters, LearnerConfig, LearnerHandle, MStepInput};
use crate::likelihood::{observed_ll, observed_ll_rows};

/// Floor applied to zero initial intensities and empty initial delay shares.
pub const INIT_FLOOR: f64 = 1e-8;

/// `λ⁰_i` = observed total of record `i` (floored); `p⁰` = pooled share of
/// observed counts per delay class, identical for every record.
pub fn initialize_estimates(data: &Dataset) -> Result<ParameterEstimates> {
    let d = data.d();
    let mut by_delay = vec![0u64; d];
    let mut lambda = Vec::with_capacity(data.len());
    for r in data.records() {
        for (j, &n) in r.observed_counts.iter().enumerate() {
            by_delay[j] += n;
        }
        lambda.push((r.observed_total() as f64).max(INIT_FLOOR));
    }
    let total: u64 = by_delay.iter().sum();
    if total == 0 {
        return Err(Error::CannotInitialize("no observed events".into()));
    }
    let mut p0: Vec<f64> = by_delay.iter().map(|&n| (n as f64 / total as f64).max(INIT_FLOOR)).collect();
    let s: f64 = p0.iter().sum();
    if s != 1.0 {
        p0.iter_mut().for_each(|p| *p /= s);
    }
    let p = p0.iter().copied().cycle().take(data.len() * d).collect();
    ParameterEstimates::new(lambda, p, d)
}

/// Observed cells are copied; censored cells become `λ̂_i p̂_ij`.
pub fn expectation_step(data: &Dataset, est: &ParameterEstimates) -> Result<CompletedDataset> {
    if est.len() != data.len() || est.d() != data.d() {
        return Err(Error::Contract("estimates do not cover the dataset".into()));
    }
    let d = data.d();
    let mut counts = Vec::with_capacity(data.len() * d);
    for (i, r) in data.records().iter().enumerate() {
        counts.extend(r.observed_counts.iter().map(|&n| n as f64));
        let lambda = est.lambda()[i];
        counts.extend(est.p_row(i)[r.tau_i()..].iter().map(|p| lambda * p));
    }
    CompletedDataset::new(d, counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Maximum number of EM iterations.
    pub k: usize,
    pub em_patience: usize,
    pub seed: u64,
    #[serde(default = "default_fractions")]
    pub split_fractions: (f64, f64, f64),
}

fn default_fractions() -> (f64, f64, f64) {
    (0.64, 0.16, 0.20)
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { k: 100, em_patience: 10, seed: 0, split_fractions: default_fractions() }
    }
}

/// One line of the iteration trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based; 0 marks the final entry written after the restore.
    pub iteration: usize,
    pub train_ll: f64,
    pub val2_ll: f64,
    pub counters: Counters,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_full_ll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_iteration: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub learner: LearnerHandle,
    /// Estimates for the non-test records, in dataset order.
    pub estimates: ParameterEstimates,
    /// Dataset indices of the non-test records covered by `estimates`.
    pub fit_rows: Vec<usize>,
    pub split: Vec<Split>,
    /// Observed LL on val2 after each iteration.
    pub ll_trace: Vec<f64>,
    pub train_ll_trace: Vec<f64>,
    /// 1-based index into `ll_trace`.
    pub best_iteration: usize,
    /// Observed LL of the restored model on every record of the input.
    pub final_ll: f64,
    pub config_echo: serde_json::Value,
}

fn sub_dataset(data: &Dataset, rows: &[usize], labels: &[Split]) -> Result<Dataset> {
    let records = rows.iter().map(|&i| data.record(i).clone()).collect();
    Dataset::new(data.schema().clone(), records, data.d(), data.tau())?
        .with_split_labels(rows.iter().map(|&i| labels[i]).collect())
}

/// Run EM. Uses the dataset's split labels when present, otherwise assigns
/// train/val1/val2 from `config.split_fractions` and `config.seed`. Test
/// records are excluded from fitting. When `trace` is given, one JSON line
/// is written per iteration plus a final line.
pub fn run_em(
    data: &Dataset,
    learner_config: &LearnerConfig,
    config: &EmConfig,
    mut trace: Option<&mut dyn Write>,
) -> Result<FitResult> {
    if config.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let labelled = match data.split() {
        Some(_) => data.clone(),
        None => data.clone().assign_splits(config.split_fractions, config.seed)?,
    };
    let labels = labelled.split().expect("labels assigned").to_vec();
    let fit_rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != Split::Test).collect();
    let fit_data = sub_dataset(&labelled, &fit_rows, &labels)?;
    let train = fit_data.rows_in(Split::Train);
    let val1 = fit_data.rows_in(Split::Val1);
    let val2 = fit_data.rows_in(Split::Val2);
    if train.is_empty() {
        return Err(Error::Data("no training records".into()));
    }

    let initial = initialize_estimates(&fit_data)?;
    let mut learner = LearnerHandle::new(learner_config, fit_data.schema(), fit_data.d())?;
    let mut ws = learner.workspace(&fit_data, &train)?;
    let mut est = initial.clone();

    let mut ll_trace = Vec::new();
    let mut train_ll_trace = Vec::new();
    let mut best: Option<(usize, f64, crate::learner::Snapshot)> = None;
    for k in 1..=config.k {
        let started = Instant::now();
        let completed = expectation_step(&fit_data, &est)?;
        let input = MStepInput {
            data: &fit_data,
            completed: &completed,
            train: &train,
            val1: &val1,
            iteration: k,
            initial: &initial,
            seed: config.seed,
        };
        let counters = learner.m_step(&mut ws, &input)?;
        est = crate::learner::estimates_from_scores(&ws.occurrence, &ws.reporting, fit_data.d())
            .map_err(|e| Error::Numerical(format!("EM iteration {k}: {e}")))?;
        let train_ll = observed_ll_rows(&est, &fit_data, &train)?.value;
        let val2_ll = if val2.is_empty() { f64::NAN } else { observed_ll_rows(&est, &fit_data, &val2)?.value };
        ll_trace.push(val2_ll);
        train_ll_trace.push(train_ll);
        if let Some(w) = trace.as_deref_mut() {
            let rec = TraceRecord {
                iteration: k,
                train_ll,
                val2_ll,
                counters,
                seconds: started.elapsed().as_secs_f64(),
                final_full_ll: None,
                best_iteration: None,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        // Without val2 every iteration counts as an improvement.
        let improved = match &best {
            None => true,
            Some((_, b, _)) => val2.is_empty() || val2_ll > *b,
        };
        if improved {
            best = Some((k, val2_ll, learner.snapshot(&ws)));
        } else if k - best.as_ref().unwrap().0 >= config.em_patience {
            break;
        }
    }
    let (best_iteration, _, snapshot) = best.expect("at least one iteration ran");
    learner.restore(snapshot, &mut ws);
    let estimates = crate::learner::estimates_from_scores(&ws.occurrence, &ws.reporting, fit_data.d())?;

    let final_ll = observed_ll(&learner.predict(data)?, data)?.value;
    if let Some(w) = trace.as_deref_mut() {
        let rec = TraceRecord {
            iteration: 0,
            train_ll: train_ll_trace[best_iteration - 1],
            val2_ll: ll_trace[best_iteration - 1],
            counters: Counters::new(),
            seconds: 0.0,
            final_full_ll: Some(final_ll),
            best_iteration: Some(best_iteration),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(FitResult {
        learner,
        estimates,
        fit_rows,
        split: labels,
        ll_trace,
        train_ll_trace,
        best_iteration,
        final_ll,
        config_echo: serde_json::json!({ "learner": learner_config, "em": config }),
    })
}

/// One predicted censored cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NowcastCell {
    pub record: usize,
    /// 1-based delay class.
    pub delay: usize,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NowcastTotal {
    pub record: usize,
    pub unreported: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Nowcast {
    pub cells: Vec<NowcastCell>,
    /// One entry per record, including fully observed ones (total 0).
    pub totals: Vec<NowcastTotal>,
}

/// Expected counts `λ̂_i p̂_ij` for every censored cell `j > τ_i`.
pub fn nowcast_from_estimates(est: &ParameterEstimates, data: &Dataset) -> Result<Nowcast> {
    if est.len() != data.len() || est.d() != data.d() {
        return Err(Error::Contract("estimates do not cover the dataset".into()));
    }
    let mut out = Nowcast::default();
    for (i, r) in data.records().iter().enumerate() {
        let lambda = est.lambda()[i];
        let mut total = 0.0;
        for (j, p) in est.p_row(i).iter().enumerate().skip(r.tau_i()) {
            let v = lambda * p;
            total += v;
            out.cells.push(NowcastCell { record: i, delay: j + 1, predicted: v });
        }
        out.totals.push(NowcastTotal { record: i, unreported: total });
    }
    Ok(out)
}

/// Nowcast every record of `data` with a fitted learner.
pub fn nowcast(learner: &LearnerHandle, data: &Dataset) -> Result<Nowcast> {
    nowcast_from_estimates(&learner.predict(data)?, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSchema, ObservationRecord};

    fn rec(occ: i64, counts: Vec<u64>) -> ObservationRecord {
        ObservationRecord { entity_id: "e".into(), occ_period: occ, covariates: vec![], observed_counts: counts }
    }

    #[test]
    fn initializer_examples() {
        let data = Dataset::new(FeatureSchema::empty(), vec![rec(1, vec![3, 1])], 2, 2).unwrap();
        let est = initialize_estimates(&data).unwrap();
        assert_eq!(est.lambda(), &[4.0]);
        assert_eq!(est.p_row(0), &[0.75, 0.25]);

        let data = Dataset::new(FeatureSchema::empty(), vec![rec(1, vec![1, 1]), rec(2, vec![2])], 2, 2).unwrap();
        let est = initialize_estimates(&data).unwrap();
        assert_eq!(est.p_row(1), &[0.75, 0.25]);

        let data = Dataset::new(FeatureSchema::empty(), vec![rec(1, vec![0, 0]), rec(1, vec![1, 0])], 2, 2).unwrap();
        let est = initialize_estimates(&data).unwrap();
        assert_eq!(est.lambda()[0], 1e-8);
        assert!(est.p_row(0)[1] > 0.0);

        let empty = Dataset::new(FeatureSchema::empty(), vec![rec(1, vec![0, 0])], 2, 2).unwrap();
        assert!(matches!(initialize_estimates(&empty), Err(Error::CannotInitialize(_))));
    }

    #[test]
    fn expectation_step_examples() {
        let d = 11;
        let data = Dataset::new(FeatureSchema::empty(), vec![rec(2, vec![1; 10])], d, 11).unwrap();
        let est = ParameterEstimates::new(vec![10.0], vec![0.1; 11].iter().map(|_| 1.0 / 11.0).collect(), d).unwrap();
        let c = expectation_step(&data, &est).unwrap();
        assert_eq!(&c.row(0)[..10], &[1.0; 10]);
        assert!((c.row(0)[10] - 10.0 / 11.0).abs() < 1e-15);

        let full = Dataset::new(FeatureSchema::empty(), vec![rec(1, vec![2, 0])], 2, 2).unwrap();
        let est = ParameterEstimates::new(vec![3.0], vec![0.5, 0.5], 2).unwrap();
        assert_eq!(expectation_step(&full, &est).unwrap().row(0), &[2.0, 0.0]);
    }

    #[test]
    fn nowcast_examples() {
        let d = 11;
        let data = Dataset::new(FeatureSchema::empty(), vec![rec(2, vec![0; 10]), rec(1, vec![0; 11])], d, 11).unwrap();
        let est = ParameterEstimates::new(vec![5.0, 5.0], vec![1.0 / 11.0; 22], d).unwrap();
        let nc = nowcast_from_estimates(&est, &data).unwrap();
        assert_eq!(nc.cells.len(), 1);
        assert_eq!(nc.cells[0].delay, 11);
        assert!((nc.cells[0].predicted - 5.0 / 11.0).abs() < 1e-15);
        assert_eq!(nc.totals[1].unreported, 0.0);
    }
}
