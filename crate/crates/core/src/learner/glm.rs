//! Exact GLM M-step: Poisson regression with log link for the occurrence
//! intensities and multinomial logistic regression (reference class `d`) for
//! the reporting probabilities, both fitted by damped Newton iterations on
//! fractional E-step counts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSchema, FeatureVector, ModelTarget};
use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;

/// Linear predictors are clamped to this range before exponentiation.
pub const ETA_CLAMP: f64 = 30.0;
const SCORE_TOL: f64 = 1e-8;
const REL_LL_TOL: f64 = 1e-10;
const ALIAS_TOL: f64 = 1e-9;
pub const INTERCEPT: &str = "(intercept)";

/// Which schema columns enter a GLM design, in order, after the intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub target: ModelTarget,
    columns: Vec<usize>,
    names: Vec<String>,
}

impl DesignLayout {
    /// Entity block plus the period blocks visible to `target`; the first
    /// indicator of every categorical group is dropped as reference level.
    pub fn new(schema: &FeatureSchema, target: ModelTarget) -> Self {
        let mut seen_groups = std::collections::HashSet::new();
        let mut columns = Vec::new();
        let mut names = vec![INTERCEPT.to_string()];
        for c in schema.columns_for(target) {
            if let Some(g) = schema.group(c) {
                if seen_groups.insert(g.to_string()) {
                    continue;
                }
            }
            columns.push(c);
            names.push(schema.name(c).to_string());
        }
        Self { target, columns, names }
    }

    /// Design width including the intercept.
    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row_from_covariates(&self, covariates: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.width());
        row.push(1.0);
        row.extend(self.columns.iter().map(|&c| covariates[c]));
        row
    }

    /// Design row for a named feature vector. Every layout column must be
    /// present.
    pub fn row(&self, fv: &FeatureVector) -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(self.width());
        row.push(1.0);
        for name in &self.names[1..] {
            let v = fv
                .get(name)
                .ok_or_else(|| Error::Schema(format!("feature `{name}` missing from covariates")))?;
            row.push(v);
        }
        Ok(row)
    }

    pub fn matrix(&self, data: &Dataset, rows: &[usize]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows.len(), self.width());
        for (r, &i) in rows.iter().enumerate() {
            let cov = &data.record(i).covariates;
            m[(r, 0)] = 1.0;
            for (k, &c) in self.columns.iter().enumerate() {
                m[(r, k + 1)] = cov[c];
            }
        }
        m
    }
}

/// Design row of `fv` for `target`, with the schema taken from `fv` itself.
pub fn build_design(fv: &FeatureVector, target: ModelTarget) -> Result<Vec<f64>> {
    DesignLayout::new(&fv.schema()?, target).row(fv)
}

/// Indices of a maximal linearly independent prefix-greedy column subset:
/// a column is kept unless it lies (numerically) in the span of the columns
/// kept before it.
pub fn independent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let gram = x.transpose() * x;
    let p = gram.ncols();
    let mut kept: Vec<usize> = Vec::new();
    // Cholesky factor rows of the kept columns, built incrementally.
    let mut l: Vec<Vec<f64>> = Vec::new();
    for c in 0..p {
        let diag = gram[(c, c)];
        if diag <= 0.0 {
            continue;
        }
        let mut row = Vec::with_capacity(kept.len());
        for (k, &kc) in kept.iter().enumerate() {
            let mut s = gram[(c, kc)];
            for m in 0..k {
                s -= row[m] * l[k][m];
            }
            row.push(s / l[k][k]);
        }
        let resid = diag - row.iter().map(|v| v * v).sum::<f64>();
        if resid > ALIAS_TOL * diag {
            row.push(resid.sqrt());
            l.push(row);
            kept.push(c);
        }
    }
    kept
}

fn solve_spd(h: DMatrix<f64>, g: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = h.nrows();
    let chol = match h.clone().cholesky() {
        Some(c) => c,
        None => {
            let jitter = 1e-10 * (h.trace() / n as f64).max(1e-300);
            (h + DMatrix::identity(n, n) * jitter)
                .cholesky()
                .ok_or_else(|| Error::Numerical("Newton system is not positive definite".into()))?
        }
    };
    Ok((chol.solve(g), chol.inverse()))
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn is_intercept_column(x: &DMatrix<f64>, c: usize) -> bool {
    x.nrows() > 0 && x.column(c).iter().all(|&v| v == 1.0)
}

/// Result of a Poisson GLM fit. Pruned columns carry coefficient 0 and
/// standard error NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonFit {
    pub coefficients: Vec<f64>,
    #[serde(with = "crate::numeric::nan_as_null")]
    pub std_errors: Vec<f64>,
    pub active: Vec<usize>,
    pub newton_steps: usize,
    pub log_likelihood: f64,
    pub warnings: Vec<String>,
}

fn poisson_objective(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> (f64, DVector<f64>) {
    let eta = x * beta;
    let mu: DVector<f64> = eta.map(|e| e.clamp(-ETA_CLAMP, ETA_CLAMP).exp());
    let terms: Vec<f64> = (0..y.len()).map(|i| -mu[i] + y[i] * eta[i].clamp(-ETA_CLAMP, ETA_CLAMP)).collect();
    (pairwise_sum(&terms), mu)
}

fn weighted_gram(xt: &DMatrix<f64>, x: &DMatrix<f64>, w: &[f64], scratch: &mut DMatrix<f64>) -> DMatrix<f64> {
    scratch.copy_from(x);
    for (r, &wr) in w.iter().enumerate() {
        scratch.row_mut(r).scale_mut(wr);
    }
    xt * &*scratch
}

/// Maximise `Σ_i [-exp(x_i'β) + y_i x_i'β]` over `β` by Newton iterations.
pub fn fit_poisson_glm(
    design: &DMatrix<f64>,
    responses: &[f64],
    init: Option<&[f64]>,
    max_steps: usize,
) -> Result<PoissonFit> {
    let active = independent_columns(design);
    fit_poisson_on_columns(design, responses, init, max_steps, &active)
}

pub(crate) fn fit_poisson_on_columns(
    design: &DMatrix<f64>,
    responses: &[f64],
    init: Option<&[f64]>,
    max_steps: usize,
    active: &[usize],
) -> Result<PoissonFit> {
    let p_full = design.ncols();
    if responses.len() != design.nrows() {
        return Err(Error::Contract("design rows and responses disagree".into()));
    }
    if responses.iter().any(|y| !(y.is_finite() && *y >= 0.0)) {
        return Err(Error::Domain("Poisson responses must be finite and non-negative".into()));
    }
    let mut warnings = Vec::new();
    if active.len() < p_full {
        warnings.push(format!("pruned {} aliased design column(s)", p_full - active.len()));
    }
    let x = design.select_columns(active);
    let xt = x.transpose();
    let mut beta = DVector::zeros(active.len());
    match init {
        Some(b) => {
            for (k, &c) in active.iter().enumerate() {
                beta[k] = b[c];
            }
        }
        None => {
            if let Some(k) = (0..active.len()).find(|&k| is_intercept_column(&x, k)) {
                let mean = responses.iter().sum::<f64>() / responses.len().max(1) as f64;
                beta[k] = mean.max(1e-8).ln();
            }
        }
    }
    let mut scratch = x.clone();
    let (mut ll, mut mu) = poisson_objective(&x, responses, &beta);
    let mut steps = 0;
    let mut converged = false;
    while steps < max_steps {
        let resid = DVector::from_iterator(responses.len(), (0..responses.len()).map(|i| responses[i] - mu[i]));
        let score = &xt * resid;
        if max_abs(&score) < SCORE_TOL {
            converged = true;
            break;
        }
        let info = weighted_gram(&xt, &x, mu.as_slice(), &mut scratch);
        let (delta, _) = solve_spd(info, &score)?;
        let mut t = 1.0;
        let (mut cand_ll, mut cand_mu, mut cand_beta);
        loop {
            cand_beta = &beta + &delta * t;
            (cand_ll, cand_mu) = poisson_objective(&x, responses, &cand_beta);
            if cand_ll >= ll - 1e-12 * ll.abs() || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        steps += 1;
        let rel = (cand_ll - ll).abs() / ll.abs().max(1.0);
        beta = cand_beta;
        ll = cand_ll;
        mu = cand_mu;
        if rel < REL_LL_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!("Poisson GLM did not converge in {max_steps} Newton steps")));
    }
    if !ll.is_finite() || beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numerical("Poisson GLM produced non-finite coefficients".into()));
    }
    let info = weighted_gram(&xt, &x, mu.as_slice(), &mut scratch);
    let (_, cov) = solve_spd(info, &DVector::zeros(active.len()))?;
    let mut coefficients = vec![0.0; p_full];
    let mut std_errors = vec![f64::NAN; p_full];
    for (k, &c) in active.iter().enumerate() {
        coefficients[c] = beta[k];
        std_errors[c] = cov[(k, k)].sqrt();
    }
    Ok(PoissonFit {
        coefficients,
        std_errors,
        active: active.to_vec(),
        newton_steps: steps,
        log_likelihood: ll,
        warnings,
    })
}

/// Multinomial fit: `d x p` coefficients with row `d` identically zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultinomialFit {
    pub d: usize,
    pub p: usize,
    /// Row-major `d x p`.
    pub coefficients: Vec<f64>,
    #[serde(with = "crate::numeric::nan_as_null")]
    pub std_errors: Vec<f64>,
    pub active: Vec<usize>,
    pub newton_steps: usize,
    pub log_likelihood: f64,
    pub warnings: Vec<String>,
}

impl MultinomialFit {
    pub fn coefficient(&self, class: usize, column: usize) -> f64 {
        self.coefficients[class * self.p + column]
    }

    pub fn std_error(&self, class: usize, column: usize) -> f64 {
        self.std_errors[class * self.p + column]
    }
}

struct MultinomialState {
    ll: f64,
    /// Row-major `n x d` probabilities.
    probs: Vec<f64>,
}

fn multinomial_objective(x: &DMatrix<f64>, w: &[f64], d: usize, theta: &DVector<f64>) -> MultinomialState {
    let n = x.nrows();
    let q = x.ncols();
    let free = d - 1;
    // eta = X B' for the free classes.
    let b = DMatrix::from_fn(q, free, |a, c| theta[c * q + a]);
    let eta = x * b;
    let mut probs = vec![0.0; n * d];
    let mut terms = Vec::with_capacity(n);
    let mut row = vec![0.0; d];
    for i in 0..n {
        for c in 0..free {
            row[c] = eta[(i, c)].clamp(-ETA_CLAMP, ETA_CLAMP);
        }
        row[free] = 0.0;
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let wi = &w[i * d..(i + 1) * d];
        let mut t = 0.0;
        for j in 0..d {
            let lp = row[j] - lse;
            probs[i * d + j] = lp.exp();
            if wi[j] != 0.0 {
                t += wi[j] * lp;
            }
        }
        terms.push(t);
    }
    MultinomialState { ll: pairwise_sum(&terms), probs }
}

fn multinomial_derivatives(
    x: &DMatrix<f64>,
    xt: &DMatrix<f64>,
    w: &[f64],
    totals: &[f64],
    d: usize,
    probs: &[f64],
    scratch: &mut DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let q = x.ncols();
    let free = d - 1;
    let mut score = DVector::zeros(free * q);
    let mut resid = DVector::zeros(n);
    for c in 0..free {
        for i in 0..n {
            resid[i] = w[i * d + c] - totals[i] * probs[i * d + c];
        }
        let s = xt * &resid;
        score.rows_mut(c * q, q).copy_from(&s);
    }
    let mut hess = DMatrix::zeros(free * q, free * q);
    let mut cw = vec![0.0; n];
    for c in 0..free {
        for e in c..free {
            for i in 0..n {
                let pc = probs[i * d + c];
                let pe = probs[i * d + e];
                cw[i] = totals[i] * (if c == e { pc - pc * pe } else { -pc * pe });
            }
            let block = weighted_gram(xt, x, &cw, scratch);
            hess.view_mut((c * q, e * q), (q, q)).copy_from(&block);
            if c != e {
                hess.view_mut((e * q, c * q), (q, q)).copy_from(&block.transpose());
            }
        }
    }
    (score, hess)
}

/// Maximise `Σ_i Σ_j w_ij ln softmax_j(x_i'B)` with the last row of `B`
/// fixed at zero. `weights` is row-major `n x d`; `init` is row-major `d x p`.
pub fn fit_multinomial_glm(
    design: &DMatrix<f64>,
    weights: &[f64],
    d: usize,
    init: Option<&[f64]>,
    max_steps: usize,
) -> Result<MultinomialFit> {
    let active = independent_columns(design);
    fit_multinomial_on_columns(design, weights, d, init, max_steps, &active)
}

pub(crate) fn fit_multinomial_on_columns(
    design: &DMatrix<f64>,
    weights: &[f64],
    d: usize,
    init: Option<&[f64]>,
    max_steps: usize,
    active: &[usize],
) -> Result<MultinomialFit> {
    let n = design.nrows();
    let p_full = design.ncols();
    if d == 0 || weights.len() != n * d {
        return Err(Error::Contract("weight matrix must be n x d".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Domain("multinomial weights must be finite and non-negative".into()));
    }
    let totals: Vec<f64> = weights.chunks(d).map(|r| r.iter().sum()).collect();
    if !totals.iter().any(|&t| t > 0.0) {
        return Err(Error::Domain("multinomial weights are all zero".into()));
    }
    let mut warnings = Vec::new();
    if active.len() < p_full {
        warnings.push(format!("pruned {} aliased design column(s)", p_full - active.len()));
    }
    let free = d - 1;
    let q = active.len();
    let x = design.select_columns(active);
    let xt = x.transpose();
    let mut theta = DVector::zeros(free * q);
    if let Some(b) = init {
        for c in 0..free {
            for (k, &col) in active.iter().enumerate() {
                theta[c * q + k] = b[c * p_full + col];
            }
        }
    }
    let mut scratch = x.clone();
    let mut state = multinomial_objective(&x, weights, d, &theta);
    let mut steps = 0;
    let mut converged = free == 0;
    while !converged && steps < max_steps {
        let (score, hess) = multinomial_derivatives(&x, &xt, weights, &totals, d, &state.probs, &mut scratch);
        if max_abs(&score) < SCORE_TOL {
            converged = true;
            break;
        }
        let (delta, _) = solve_spd(hess, &score)?;
        let mut t = 1.0;
        let (mut cand_theta, mut cand);
        loop {
            cand_theta = &theta + &delta * t;
            cand = multinomial_objective(&x, weights, d, &cand_theta);
            if cand.ll >= state.ll - 1e-12 * state.ll.abs() || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        steps += 1;
        let rel = (cand.ll - state.ll).abs() / state.ll.abs().max(1.0);
        theta = cand_theta;
        state = cand;
        if rel < REL_LL_TOL {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!("multinomial GLM did not converge in {max_steps} Newton steps")));
    }
    if !state.ll.is_finite() || theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("multinomial GLM produced non-finite coefficients".into()));
    }
    let mut coefficients = vec![0.0; d * p_full];
    let mut std_errors = vec![f64::NAN; d * p_full];
    if free > 0 {
        let (_, hess) = multinomial_derivatives(&x, &xt, weights, &totals, d, &state.probs, &mut scratch);
        let (_, cov) = solve_spd(hess, &DVector::zeros(free * q))?;
        for c in 0..free {
            for (k, &col) in active.iter().enumerate() {
                coefficients[c * p_full + col] = theta[c * q + k];
                std_errors[c * p_full + col] = cov[(c * q + k, c * q + k)].sqrt();
            }
        }
    }
    Ok(MultinomialFit {
        d,
        p: p_full,
        coefficients,
        std_errors,
        active: active.to_vec(),
        newton_steps: steps,
        log_likelihood: state.ll,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::softmax;

    fn intercept_only(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn poisson_intercept_is_log_mean() {
        let fit = fit_poisson_glm(&intercept_only(3), &[1.0, 2.0, 3.0], None, 100).unwrap();
        assert!((fit.coefficients[0] - 2f64.ln()).abs() < 1e-10);
        assert!(fit.std_errors[0] > 0.0);
    }

    #[test]
    fn poisson_all_zero_responses_stay_finite() {
        let fit = fit_poisson_glm(&intercept_only(3), &[0.0, 0.0, 0.0], None, 100).unwrap();
        let b = fit.coefficients[0];
        assert!(b.is_finite());
        assert!(b <= -18.0 && b >= -ETA_CLAMP - 1e-9, "{b}");
    }

    #[test]
    fn poisson_score_equation_holds() {
        let n = 200;
        let x = DMatrix::from_fn(n, 3, |i, c| match c {
            0 => 1.0,
            1 => (i % 7) as f64 / 7.0,
            _ => ((i * 13) % 5) as f64,
        });
        let y: Vec<f64> = (0..n).map(|i| ((i * 31) % 9) as f64 * 0.5).collect();
        let fit = fit_poisson_glm(&x, &y, None, 100).unwrap();
        let fitted: f64 = (0..n)
            .map(|i| (0..3).map(|c| x[(i, c)] * fit.coefficients[c]).sum::<f64>().exp())
            .sum();
        let observed: f64 = y.iter().sum();
        assert!(((fitted - observed) / observed).abs() < 1e-6);

        let refit = fit_poisson_glm(&x, &y, Some(&fit.coefficients), 100).unwrap();
        assert!(refit.newton_steps <= 2, "{}", refit.newton_steps);
    }

    #[test]
    fn aliased_columns_are_pruned() {
        let x = DMatrix::from_fn(20, 4, |i, c| match c {
            0 => 1.0,
            1 => (i % 3) as f64,
            2 => 2.0 * (i % 3) as f64,
            _ => (i % 2) as f64,
        });
        assert_eq!(independent_columns(&x), vec![0, 1, 3]);
        let y: Vec<f64> = (0..20).map(|i| (i % 4) as f64).collect();
        let fit = fit_poisson_glm(&x, &y, None, 100).unwrap();
        assert_eq!(fit.coefficients[2], 0.0);
        assert!(fit.std_errors[2].is_nan());
        assert_eq!(fit.warnings.len(), 1);
    }

    #[test]
    fn multinomial_empirical_shares() {
        let x = intercept_only(1);
        let fit = fit_multinomial_glm(&x, &[30.0, 10.0], 2, None, 100).unwrap();
        assert!((fit.coefficient(0, 0) - 3f64.ln()).abs() < 1e-9);
        assert_eq!(fit.coefficient(1, 0), 0.0);
        let p = softmax(&[fit.coefficient(0, 0), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-9);
    }

    #[test]
    fn multinomial_uniform_weights_give_zero_rows() {
        let x = DMatrix::from_fn(6, 2, |i, c| if c == 0 { 1.0 } else { i as f64 });
        let w = vec![1.0; 6 * 3];
        let fit = fit_multinomial_glm(&x, &w, 3, None, 100).unwrap();
        assert!(fit.coefficients.iter().all(|b| b.abs() < 1e-9));
    }

    #[test]
    fn multinomial_degenerate_single_class() {
        let fit = fit_multinomial_glm(&intercept_only(2), &[1.0, 2.0], 1, None, 100).unwrap();
        assert_eq!(fit.coefficients, vec![0.0]);
        assert_eq!(fit.newton_steps, 0);
    }

    #[test]
    fn multinomial_warm_start_is_fast() {
        let n = 60;
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { (i % 5) as f64 });
        let w: Vec<f64> = (0..n * 3).map(|k| ((k * 7) % 4) as f64 + 0.25).collect();
        let fit = fit_multinomial_glm(&x, &w, 3, None, 100).unwrap();
        let again = fit_multinomial_glm(&x, &w, 3, Some(&fit.coefficients), 100).unwrap();
        assert!(again.newton_steps <= 2);
    }

    #[test]
    fn design_layout_drops_reference_levels() {
        let schema = FeatureSchema::new(["g=a", "g=b", "g=c", "z", "ps1_w", "ps2_w"]).unwrap();
        let occ = DesignLayout::new(&schema, ModelTarget::Occurrence);
        assert_eq!(occ.names(), &["(intercept)", "g=b", "g=c", "z", "ps1_w"]);
        let rep = DesignLayout::new(&schema, ModelTarget::Reporting);
        assert_eq!(rep.width(), 6);
        let fv = FeatureVector::new(schema.names().iter().map(|n| (n.clone(), 0.0)).collect()).unwrap();
        assert_eq!(build_design(&fv, ModelTarget::Occurrence).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let partial = FeatureVector::new(vec![("g=b".into(), 1.0)]).unwrap();
        assert!(matches!(occ.row(&partial), Err(Error::Schema(_))));
    }
}
