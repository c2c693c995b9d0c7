//! Synthetic reporting-delay data: a 31-day calendar, four entity covariates,
//! log-linear occurrence intensities, softmax reporting probabilities, and
//! Poisson-then-multinomial count draws.

use std::collections::HashMap;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSchema, FeatureVector, ObservationRecord, ParameterEstimates};
use crate::error::{Error, Result};
use crate::numeric::softmax_into;

pub const SPRING_DAYS: usize = 31;
pub const SPRING_D: usize = 11;
pub const SPRING_TAU: i64 = 21;
pub const PERIOD_FLAGS: [&str; 3] = ["weekend", "holiday", "monthedge"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarDay {
    pub day: usize,
    pub weekend: bool,
    pub holiday: bool,
    pub monthedge: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalendarPreset {
    /// 11 April to 11 May 2022; day 1 is a Monday.
    Spring2022,
}

const SPRING_WEEKENDS: [usize; 8] = [6, 7, 13, 14, 20, 21, 27, 28];
/// 15, 17 and 18 April, 27 April 2022.
const SPRING_HOLIDAYS: [usize; 4] = [5, 7, 8, 17];
/// 30 April and 1 May 2022.
const SPRING_MONTH_EDGES: [usize; 2] = [20, 21];

pub fn build_calendar(preset: CalendarPreset) -> Vec<CalendarDay> {
    match preset {
        CalendarPreset::Spring2022 => (1..=SPRING_DAYS)
            .map(|day| CalendarDay {
                day,
                weekend: SPRING_WEEKENDS.contains(&day),
                holiday: SPRING_HOLIDAYS.contains(&day),
                monthedge: SPRING_MONTH_EDGES.contains(&day),
            })
            .collect(),
    }
}

/// One simulated entity x occurrence-day cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    /// 1-based class in {1, 2}.
    pub x1: usize,
    /// Integer in 18..=90.
    pub x2: u32,
    /// 1-based class in {1, 2, 3}.
    pub x3: usize,
    pub x4: usize,
    pub occ_day: usize,
}

/// Entity covariates and occurrence days, all independent uniforms.
pub fn simulate_entities(n: usize, occurrence_days: usize, seed: u64) -> Vec<Entity> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_entities_with(n, occurrence_days, &mut rng)
}

fn simulate_entities_with(n: usize, occurrence_days: usize, rng: &mut ChaCha8Rng) -> Vec<Entity> {
    let two = Uniform::new_inclusive(1usize, 2).unwrap();
    let three = Uniform::new_inclusive(1usize, 3).unwrap();
    let age = Uniform::new_inclusive(18u32, 90).unwrap();
    let day = Uniform::new_inclusive(1usize, occurrence_days.max(1)).unwrap();
    (0..n)
        .map(|_| Entity {
            x1: two.sample(rng),
            x2: age.sample(rng),
            x3: three.sample(rng),
            x4: three.sample(rng),
            occ_day: day.sample(rng),
        })
        .collect()
}

/// Feature names of simulated data: one-hot entity classes, `x2`, then the
/// three calendar flags for each reporting day `j = 1..d`.
pub fn simulation_schema(d: usize) -> FeatureSchema {
    let mut names: Vec<String> = ["x1=1", "x1=2", "x2", "x3=1", "x3=2", "x3=3", "x4=1", "x4=2", "x4=3"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for j in 1..=d {
        for flag in PERIOD_FLAGS {
            names.push(format!("ps{j}_{flag}"));
        }
    }
    FeatureSchema::new(names).expect("simulation schema names are unique")
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl Entity {
    /// Covariates aligned with [`simulation_schema`].
    pub fn covariates(&self, calendar: &[CalendarDay], d: usize) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(9 + 3 * d);
        v.extend([indicator(self.x1 == 1), indicator(self.x1 == 2), self.x2 as f64]);
        v.extend((1..=3).map(|c| indicator(self.x3 == c)));
        v.extend((1..=3).map(|c| indicator(self.x4 == c)));
        for j in 1..=d {
            let day = self.occ_day + j - 1;
            let cal = calendar
                .iter()
                .find(|c| c.day == day)
                .ok_or_else(|| Error::Config(format!("calendar does not cover day {day}")))?;
            v.extend([indicator(cal.weekend), indicator(cal.holiday), indicator(cal.monthedge)]);
        }
        Ok(v)
    }

    pub fn feature_vector(&self, calendar: &[CalendarDay], d: usize) -> Result<FeatureVector> {
        let schema = simulation_schema(d);
        FeatureVector::new(schema.names().iter().cloned().zip(self.covariates(calendar, d)?).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    Gt,
    Lt,
}

/// A regressor built from named covariates. `Period` terms read the calendar
/// flag of the reporting day belonging to the coefficient's block:
/// `ps1_<flag>` for the intensity and `ps<j>_<flag>` for `p_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Feature { name: String },
    LogPlusOne { name: String },
    Indicator { name: String, op: Comparison, threshold: f64 },
    Period { flag: String },
    Product { factors: Vec<Term> },
}

impl Term {
    fn feature(name: &str) -> Self {
        Term::Feature { name: name.into() }
    }

    fn period(flag: &str) -> Self {
        Term::Period { flag: flag.into() }
    }

    fn eval(&self, lookup: &dyn Fn(&str) -> Option<f64>, block: usize) -> Result<f64> {
        let get = |name: &str| lookup(name).ok_or_else(|| Error::Schema(format!("unresolved covariate `{name}`")));
        Ok(match self {
            Term::Intercept => 1.0,
            Term::Feature { name } => get(name)?,
            Term::LogPlusOne { name } => (get(name)? + 1.0).ln(),
            Term::Indicator { name, op, threshold } => {
                let v = get(name)?;
                indicator(match op {
                    Comparison::Gt => v > *threshold,
                    Comparison::Lt => v < *threshold,
                })
            }
            Term::Period { flag } => get(&format!("ps{block}_{flag}"))?,
            Term::Product { factors } => {
                let mut p = 1.0;
                for f in factors {
                    p *= f.eval(lookup, block)?;
                }
                p
            }
        })
    }
}

/// Coefficient of one term on `log λ` and on each reporting logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub term: Term,
    pub lambda: f64,
    pub p: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub name: String,
    pub d: usize,
    pub tau: i64,
    pub occurrence_days: usize,
    pub calendar: Vec<CalendarDay>,
    pub coefficients: Vec<Coefficient>,
}

fn linear_coefficients(x2_term: Term) -> Vec<Coefficient> {
    let d = SPRING_D;
    let row = |term: Term, lambda: f64, p: &dyn Fn(usize) -> f64| Coefficient {
        term,
        lambda,
        p: (1..=d).map(p).collect(),
    };
    vec![
        row(Term::Intercept, 0.0, &|j| 2.0 - 0.2 * (j - 1) as f64),
        row(Term::feature("x1=2"), 0.5, &|_| 0.0),
        row(x2_term, 0.01, &|j| 0.001 * j as f64),
        row(Term::feature("x3=2"), 0.2, &|j| -0.02 - 0.005 * (j - 1) as f64),
        row(Term::feature("x3=3"), 0.4, &|j| -0.05 - 0.005 * (j - 1) as f64),
        row(Term::feature("x4=1"), 0.3, &|j| if j <= 5 { -0.1 } else { 0.0 }),
        row(Term::feature("x4=3"), -0.3, &|j| if j <= 5 { 0.2 } else { 0.0 }),
        row(Term::period("weekend"), 0.75, &|_| -0.2),
        row(Term::period("holiday"), 0.4, &|_| -0.3),
        row(Term::period("monthedge"), 0.0, &|_| 0.05),
    ]
}

impl SimulationSpec {
    fn builtin(name: &str, coefficients: Vec<Coefficient>) -> Self {
        Self {
            name: name.into(),
            d: SPRING_D,
            tau: SPRING_TAU,
            occurrence_days: SPRING_TAU as usize,
            calendar: build_calendar(CalendarPreset::Spring2022),
            coefficients,
        }
    }

    /// Linear effects only.
    pub fn linear() -> Self {
        Self::builtin("linear", linear_coefficients(Term::feature("x2")))
    }

    /// Linear effects with `ln(x2 + 1)`, threshold effects and interactions.
    pub fn nonlinear() -> Self {
        let d = SPRING_D;
        let mut c = linear_coefficients(Term::LogPlusOne { name: "x2".into() });
        let product = |a: Term, b: Term| Term::Product { factors: vec![a, b] };
        let extra = |term: Term, lambda: f64, p: &dyn Fn(usize) -> f64| Coefficient {
            term,
            lambda,
            p: (1..=d).map(p).collect(),
        };
        let over80 = Term::Indicator { name: "x2".into(), op: Comparison::Gt, threshold: 80.0 };
        let under40 = Term::Indicator { name: "x2".into(), op: Comparison::Lt, threshold: 40.0 };
        c.push(extra(over80, 0.5, &|_| 0.0));
        c.push(extra(product(under40, Term::feature("x1=1")), -0.25, &|_| 0.0));
        c.push(extra(product(Term::feature("x3=1"), Term::feature("x4=3")), -0.5, &|_| 0.0));
        c.push(extra(product(Term::feature("x3=3"), Term::feature("x4=1")), 0.5, &|_| 0.0));
        c.push(extra(
            product(Term::feature("x1=1"), Term::feature("x4=3")),
            -0.3,
            &|j| if j <= 3 { 0.03 } else { 0.0 },
        ));
        c.push(extra(
            product(Term::period("weekend"), Term::period("holiday")),
            0.0,
            &|j| if j <= 5 { 0.06 } else { 0.0 },
        ));
        Self::builtin("nonlinear", c)
    }

    pub fn schema(&self) -> FeatureSchema {
        simulation_schema(self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || (self.d as i64) > self.tau {
            return Err(Error::Config(format!("need 1 <= d <= tau, got d = {} and tau = {}", self.d, self.tau)));
        }
        if self.occurrence_days == 0 || self.occurrence_days as i64 > self.tau {
            return Err(Error::Config("occurrence days must lie in 1..=tau".into()));
        }
        let needed = self.occurrence_days + self.d - 1;
        for day in 1..=needed {
            if !self.calendar.iter().any(|c| c.day == day) {
                return Err(Error::Config(format!("calendar does not cover day {day}")));
            }
        }
        for c in &self.coefficients {
            if c.p.len() != self.d {
                return Err(Error::Config(format!("coefficient row {:?} has {} reporting entries", c.term, c.p.len())));
            }
            if !c.lambda.is_finite() || c.p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("coefficients must be finite".into()));
            }
        }
        // Resolve every term once against a zero covariate row.
        let schema = self.schema();
        let zero = |name: &str| schema.index_of(name).map(|_| 0.0);
        for c in &self.coefficients {
            for block in 1..=self.d {
                c.term.eval(&zero, block)?;
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// True `λ(x)` and `p(x)` for named covariates.
pub fn true_parameters(x: &FeatureVector, spec: &SimulationSpec) -> Result<(f64, Vec<f64>)> {
    let map: HashMap<&str, f64> = x.entries().iter().map(|(n, v)| (n.as_str(), *v)).collect();
    parameters_with(&|name| map.get(name).copied(), spec)
}

fn parameters_with(lookup: &dyn Fn(&str) -> Option<f64>, spec: &SimulationSpec) -> Result<(f64, Vec<f64>)> {
    let d = spec.d;
    let mut eta_lambda = 0.0;
    let mut eta_p = vec![0.0; d];
    for c in &spec.coefficients {
        if c.lambda != 0.0 {
            eta_lambda += c.lambda * c.term.eval(lookup, 1)?;
        }
        for j in 0..d {
            if c.p[j] != 0.0 {
                eta_p[j] += c.p[j] * c.term.eval(lookup, j + 1)?;
            }
        }
    }
    let mut p = vec![0.0; d];
    softmax_into(&eta_p, &mut p);
    Ok((eta_lambda.exp(), p))
}

/// Complete counts, their censored view at `tau`, and the true parameters,
/// aligned record by record.
#[derive(Clone, Debug)]
pub struct SimulatedData {
    /// Every record fully observed (`tau + d - 1` as present time).
    pub complete: Dataset,
    pub censored: Dataset,
    pub truth: ParameterEstimates,
    pub entities: Vec<Entity>,
}

/// Draw `N ~ Poisson(λ)` and split it multinomially over the delay classes.
pub fn draw_counts<R: rand::Rng>(lambda: f64, p: &[f64], rng: &mut R) -> Result<Vec<u64>> {
    let total = Poisson::new(lambda)
        .map_err(|e| Error::Domain(format!("Poisson intensity {lambda}: {e}")))?
        .sample(rng) as u64;
    let mut counts = vec![0u64; p.len()];
    let mut left = total;
    let mut mass = 1.0;
    for (j, &pj) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if j + 1 == p.len() {
            counts[j] = left;
            break;
        }
        let q = (pj / mass).clamp(0.0, 1.0);
        let k = Binomial::new(left, q).map_err(|e| Error::Domain(format!("binomial draw: {e}")))?.sample(rng);
        counts[j] = k;
        left -= k;
        mass -= pj;
    }
    Ok(counts)
}

pub fn simulate_dataset(n: usize, spec: &SimulationSpec, seed: u64) -> Result<SimulatedData> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let d = spec.d;
    let schema = spec.schema();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = simulate_entities_with(n, spec.occurrence_days, &mut rng);
    let mut complete = Vec::with_capacity(n);
    let mut censored = Vec::with_capacity(n);
    let mut lambda = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n * d);
    for (i, e) in entities.iter().enumerate() {
        let cov = e.covariates(&spec.calendar, d)?;
        let (l, p) = parameters_with(&|name| schema.index_of(name).map(|k| cov[k]), spec)?;
        let counts = draw_counts(l, &p, &mut rng)?;
        let occ = e.occ_day as i64;
        let tau_i = crate::data::compute_tau(occ, spec.tau, d)?;
        let entity_id = format!("r{i}");
        censored.push(ObservationRecord {
            entity_id: entity_id.clone(),
            occ_period: occ,
            covariates: cov.clone(),
            observed_counts: counts[..tau_i].to_vec(),
        });
        complete.push(ObservationRecord { entity_id, occ_period: occ, covariates: cov, observed_counts: counts });
        lambda.push(l);
        probs.extend(p);
    }
    Ok(SimulatedData {
        complete: Dataset::new(schema.clone(), complete, d, spec.tau + d as i64 - 1)?,
        censored: Dataset::new(schema, censored, d, spec.tau)?,
        truth: ParameterEstimates::new(lambda, probs, d)?,
        entities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spring_2022_calendar() {
        let cal = build_calendar(CalendarPreset::Spring2022);
        assert_eq!(cal.len(), 31);
        assert!(cal[12].weekend && cal[13].weekend);
        assert!(cal[16].holiday);
        assert_eq!(cal.iter().filter(|c| c.weekend).count(), 8);
        assert!(cal[19].monthedge && cal[20].monthedge);
    }

    #[test]
    fn entity_ranges_and_determinism() {
        let a = simulate_entities(2000, 21, 4);
        assert!(a.iter().all(|e| (18..=90).contains(&e.x2) && (1..=21).contains(&e.occ_day)));
        assert!(a.iter().all(|e| (1..=2).contains(&e.x1) && (1..=3).contains(&e.x3) && (1..=3).contains(&e.x4)));
        assert_eq!(a, simulate_entities(2000, 21, 4));
    }

    #[test]
    fn zero_covariates_give_intercept_probabilities() {
        let spec = SimulationSpec::linear();
        let schema = spec.schema();
        let x = FeatureVector::new(schema.names().iter().map(|n| (n.clone(), 0.0)).collect()).unwrap();
        let (l, p) = true_parameters(&x, &spec).unwrap();
        assert_eq!(l, 1.0);
        // Softmax of 2, 1.8, ..., 0 evaluated independently.
        assert!((p[0] - 0.20385727707733198).abs() < 1e-12, "{}", p[0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unresolved_names_are_rejected() {
        let mut spec = SimulationSpec::linear();
        spec.coefficients.push(Coefficient { term: Term::feature("x9"), lambda: 1.0, p: vec![0.0; 11] });
        assert!(matches!(spec.validate(), Err(Error::Schema(_))));
        let x = FeatureVector::new(vec![("x2".into(), 1.0)]).unwrap();
        assert!(true_parameters(&x, &SimulationSpec::linear()).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = SimulationSpec::nonlinear();
        let back = SimulationSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn simulated_outputs_are_consistent() {
        let sim = simulate_dataset(500, &SimulationSpec::nonlinear(), 3).unwrap();
        for (c, r) in sim.complete.records().iter().zip(sim.censored.records()) {
            assert_eq!(&c.observed_counts[..r.tau_i()], &r.observed_counts[..]);
            assert_eq!(c.observed_counts.len(), 11);
        }
        let again = simulate_dataset(500, &SimulationSpec::nonlinear(), 3).unwrap();
        assert_eq!(again.censored, sim.censored);
    }
}
