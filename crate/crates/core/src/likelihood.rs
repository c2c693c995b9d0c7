//! Observed and complete log-likelihoods, the decoupled EM criteria
//! `Q_occ` / `Q_rep`, and average squared errors against known truth.
//!
//! Each record's terms are added in delay order and record totals are then
//! combined by pairwise summation. `ln N!` is evaluated as `ln Γ(N + 1)`
//! for integer and fractional counts alike, and constant terms are kept so
//! observed and complete values are on the same scale.

use serde::{Deserialize, Serialize};

use crate::data::{CompletedDataset, Dataset, ParameterEstimates};
use crate::error::{Error, Result};
use crate::numeric::{ln_factorial, pairwise_sum};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodValue {
    pub value: f64,
    pub n_terms: usize,
}

fn xlogy(x: f64, y: f64, what: &str) -> Result<f64> {
    if x == 0.0 {
        Ok(0.0)
    } else if y > 0.0 {
        Ok(x * y.ln())
    } else {
        Err(Error::Domain(format!("{what} = {y} with positive count {x}")))
    }
}

fn all_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Log-likelihood of the reported cells of `data`.
pub fn observed_ll(est: &ParameterEstimates, data: &Dataset) -> Result<LikelihoodValue> {
    observed_ll_rows(est, data, &all_rows(data.len()))
}

/// [`observed_ll`] restricted to `rows` (indices into both `est` and `data`).
pub fn observed_ll_rows(
    est: &ParameterEstimates,
    data: &Dataset,
    rows: &[usize],
) -> Result<LikelihoodValue> {
    if est.len() != data.len() || est.d() != data.d() {
        return Err(Error::Contract(format!(
            "estimates cover {} records (d = {}), data has {} (d = {})",
            est.len(),
            est.d(),
            data.len(),
            data.d()
        )));
    }
    let mut per_record = Vec::with_capacity(rows.len());
    let mut n_terms = 0;
    for &i in rows {
        let lambda = est.lambda()[i];
        let p = est.p_row(i);
        let mut s = 0.0;
        for (j, &n) in data.record(i).observed_counts.iter().enumerate() {
            let n = n as f64;
            s += -lambda * p[j] + xlogy(n, lambda, "lambda")? + xlogy(n, p[j], "p")? - ln_factorial(n);
            n_terms += 1;
        }
        per_record.push(s);
    }
    Ok(LikelihoodValue { value: pairwise_sum(&per_record), n_terms })
}

/// Complete-data log-likelihood over all `d` cells.
pub fn complete_ll(est: &ParameterEstimates, completed: &CompletedDataset) -> Result<LikelihoodValue> {
    if est.len() != completed.len() || est.d() != completed.d() {
        return Err(Error::Contract("estimates and completed data disagree in shape".into()));
    }
    let d = completed.d();
    let mut per_record = Vec::with_capacity(est.len());
    for i in 0..est.len() {
        let lambda = est.lambda()[i];
        let row = completed.row(i);
        let total: f64 = row.iter().sum();
        let mut s = -lambda + xlogy(total, lambda, "lambda")?;
        let p = est.p_row(i);
        for j in 0..d {
            s += xlogy(row[j], p[j], "p")? - ln_factorial(row[j]);
        }
        per_record.push(s);
    }
    Ok(LikelihoodValue { value: pairwise_sum(&per_record), n_terms: est.len() * (d + 1) })
}

/// `Σ_i [-λ_i + N_i ln λ_i]` with `N_i` the completed row totals.
pub fn q_occ(lambda: &[f64], completed: &CompletedDataset) -> Result<f64> {
    q_occ_rows(lambda, completed, &all_rows(completed.len()))
}

/// [`q_occ`] over `rows`; `lambda` is indexed like `completed`.
pub fn q_occ_rows(lambda: &[f64], completed: &CompletedDataset, rows: &[usize]) -> Result<f64> {
    if lambda.len() != completed.len() {
        return Err(Error::Contract(format!(
            "{} intensities for {} completed records",
            lambda.len(),
            completed.len()
        )));
    }
    let mut terms = Vec::with_capacity(rows.len());
    for &i in rows {
        let l = lambda[i];
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::Domain(format!("record {i}: intensity {l} is not positive")));
        }
        terms.push(-l + completed.total(i) * l.ln());
    }
    Ok(pairwise_sum(&terms))
}

/// `Σ_i Σ_j N_ij ln p_ij` for a row-major `n x d` probability matrix.
pub fn q_rep(p: &[f64], completed: &CompletedDataset) -> Result<f64> {
    q_rep_rows(p, completed, &all_rows(completed.len()))
}

pub fn q_rep_rows(p: &[f64], completed: &CompletedDataset, rows: &[usize]) -> Result<f64> {
    let d = completed.d();
    if p.len() != completed.len() * d {
        return Err(Error::Contract("probability matrix and completed data disagree in shape".into()));
    }
    let mut terms = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        let prow = &p[i * d..(i + 1) * d];
        let s: f64 = prow.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("record {i}: probabilities sum to {s}")));
        }
        for (&n, &q) in completed.row(i).iter().zip(prow) {
            terms.push(xlogy(n, q, "p")?);
        }
    }
    Ok(pairwise_sum(&terms))
}

/// `(1/n) Σ_i (λ_i - λ̂_i)²`.
pub fn ase_lambda(est: &ParameterEstimates, truth: &ParameterEstimates) -> Result<f64> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::Contract(format!(
            "ASE needs equally sized non-empty sets, got {} and {}",
            est.len(),
            truth.len()
        )));
    }
    let sq: Vec<f64> = est
        .lambda()
        .iter()
        .zip(truth.lambda())
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Ok(pairwise_sum(&sq) / est.len() as f64)
}

/// `(1/n) Σ_i Σ_j (p_ij - p̂_ij)²`.
pub fn ase_p(est: &ParameterEstimates, truth: &ParameterEstimates) -> Result<f64> {
    if est.len() != truth.len() || est.d() != truth.d() || est.is_empty() {
        return Err(Error::Contract("ASE needs equally shaped non-empty sets".into()));
    }
    let sq: Vec<f64> = est.p().iter().zip(truth.p()).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(pairwise_sum(&sq) / est.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSchema, ObservationRecord};

    fn single(tau_i: usize, d: usize, counts: Vec<u64>) -> Dataset {
        let tau = 30;
        let rec = ObservationRecord {
            entity_id: "a".into(),
            occ_period: tau - tau_i as i64 + 1,
            covariates: vec![],
            observed_counts: counts,
        };
        Dataset::new(FeatureSchema::empty(), vec![rec], d, tau).unwrap()
    }

    #[test]
    fn observed_ll_examples() {
        let est = ParameterEstimates::new(vec![1.0], vec![1.0], 1).unwrap();
        let v = observed_ll(&est, &single(1, 1, vec![0])).unwrap();
        assert_eq!(v.value, -1.0);
        assert_eq!(v.n_terms, 1);

        let est = ParameterEstimates::new(vec![2.0], vec![1.0], 1).unwrap();
        let v = observed_ll(&est, &single(1, 1, vec![2])).unwrap().value;
        // ln 2 - 2, evaluated independently.
        assert!((v - (-1.3068528194400546)).abs() < 1e-14);
    }

    #[test]
    fn observed_ll_is_additive() {
        let rec = ObservationRecord {
            entity_id: "a".into(),
            occ_period: 29,
            covariates: vec![],
            observed_counts: vec![3, 1],
        };
        let one = Dataset::new(FeatureSchema::empty(), vec![rec.clone()], 3, 30).unwrap();
        let two = Dataset::new(FeatureSchema::empty(), vec![rec.clone(), rec], 3, 30).unwrap();
        let p = vec![0.5, 0.3, 0.2];
        let e1 = ParameterEstimates::new(vec![4.0], p.clone(), 3).unwrap();
        let e2 = ParameterEstimates::new(vec![4.0, 4.0], [p.clone(), p].concat(), 3).unwrap();
        let a = observed_ll(&e1, &one).unwrap().value;
        let b = observed_ll(&e2, &two).unwrap().value;
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn q_functions_small_cases() {
        let zero = CompletedDataset::new(1, vec![0.0]).unwrap();
        assert_eq!(q_occ(&[1.0], &zero).unwrap(), -1.0);
        let one = CompletedDataset::new(1, vec![1.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((q_occ(&[e], &one).unwrap() - (1.0 - e)).abs() < 1e-15);
        assert!(matches!(q_occ(&[0.0], &one), Err(Error::Domain(_))));

        let mut cells = vec![0.0; 11];
        cells[4] = 1.0;
        let c = CompletedDataset::new(11, cells).unwrap();
        let p = vec![1.0 / 11.0; 11];
        assert!((q_rep(&p, &c).unwrap() - (1.0f64 / 11.0).ln()).abs() < 1e-14);
        let zeros = CompletedDataset::new(11, vec![0.0; 11]).unwrap();
        assert_eq!(q_rep(&p, &zeros).unwrap(), 0.0);
        assert!(matches!(q_rep(&vec![0.2; 11], &c), Err(Error::Contract(_))));
    }

    #[test]
    fn complete_ll_trivial() {
        let est = ParameterEstimates::new(vec![1.0], vec![0.5, 0.5], 2).unwrap();
        let c = CompletedDataset::new(2, vec![0.0, 0.0]).unwrap();
        assert_eq!(complete_ll(&est, &c).unwrap().value, -1.0);
    }

    #[test]
    fn domain_error_on_zero_probability_with_counts() {
        let data = single(1, 1, vec![2]);
        let est = ParameterEstimates::unchecked(vec![1.0], vec![0.0], 1);
        assert!(matches!(observed_ll(&est, &data), Err(Error::Domain(_))));
    }

    #[test]
    fn ase_examples() {
        let t = ParameterEstimates::new(vec![2.0, 3.0], vec![0.5, 0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(ase_lambda(&t, &t).unwrap(), 0.0);
        assert_eq!(ase_p(&t, &t).unwrap(), 0.0);
        let e = ParameterEstimates::new(vec![3.0, 2.0], vec![0.5, 0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(ase_lambda(&e, &t).unwrap(), 1.0);
        let scaled = ParameterEstimates::new(vec![4.0, 1.0], vec![0.5, 0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(ase_lambda(&scaled, &t).unwrap(), 4.0);

        let one_hot = ParameterEstimates::unchecked(vec![1.0], vec![1.0, 0.0], 2);
        let uniform = ParameterEstimates::new(vec![1.0], vec![0.5, 0.5], 2).unwrap();
        assert_eq!(ase_p(&uniform, &one_hot).unwrap(), 0.5);
        assert!(ase_lambda(&uniform, &t).is_err());
    }
}
