//! Small numeric helpers shared by the likelihood code and the learners.

const PAIRWISE_BLOCK: usize = 64;

/// Pairwise (cascade) summation. Error grows with `log n` instead of `n`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Softmax of `scores` written into `out`, evaluated with the log-sum-exp shift.
pub fn softmax_into(scores: &[f64], out: &mut [f64]) {
    debug_assert_eq!(scores.len(), out.len());
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, &mut out);
    out
}

/// `ln Γ(x + 1)`, i.e. `ln x!` extended to non-negative reals.
pub fn ln_factorial(x: f64) -> f64 {
    if x == 0.0 || x == 1.0 {
        0.0
    } else {
        statrs::function::gamma::ln_gamma(x + 1.0)
    }
}

/// Serde adapter for `Vec<f64>` that stores NaN as `null`, which JSON
/// cannot represent directly.
pub mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = values.iter().map(|v| (!v.is_nan()).then_some(*v)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opt = Vec::<Option<f64>>::deserialize(d)?;
        Ok(opt.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[1001.0, 1002.0, 1003.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ln_factorial_small_values() {
        assert_eq!(ln_factorial(0.0), 0.0);
        assert!((ln_factorial(2.0) - 2f64.ln()).abs() < 1e-14);
        assert!((ln_factorial(5.0) - 120f64.ln()).abs() < 1e-12);
    }
}
