use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nowcast_core::learner::estimates_from_scores;
use nowcast_core::learner::tree::{fit_regression_tree, BinnedFeatures, TreeParams};
use nowcast_core::{
    expectation_step, observed_ll, q_occ, q_rep, CompletedDataset, Dataset, FeatureSchema, ObservationRecord,
    ParameterEstimates,
};

fn dataset(seed: u64, n: usize, d: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = 30;
    let records = (0..n)
        .map(|i| {
            let occ = rng.random_range(tau - d as i64..=tau);
            let tau_i = (tau - occ + 1).min(d as i64) as usize;
            ObservationRecord {
                entity_id: format!("r{i}"),
                occ_period: occ,
                covariates: vec![rng.random_range(-2.0..2.0)],
                observed_counts: (0..tau_i).map(|_| rng.random_range(0..9)).collect(),
            }
        })
        .collect();
    Dataset::new(FeatureSchema::new(["x"]).unwrap(), records, d, tau).unwrap()
}

fn estimates(seed: u64, n: usize, d: usize) -> ParameterEstimates {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let occ: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..3.0)).collect();
    let rep: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    estimates_from_scores(&occ, &rep, d).unwrap()
}

proptest! {
    #[test]
    fn observed_ll_ignores_record_order(seed in any::<u64>(), n in 1usize..30, d in 1usize..7) {
        let data = dataset(seed, n, d);
        let est = estimates(seed, n, d);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        let records: Vec<ObservationRecord> = order.iter().map(|&i| data.record(i).clone()).collect();
        let shuffled = Dataset::new(data.schema().clone(), records, d, data.tau()).unwrap();
        let a = observed_ll(&est, &data).unwrap().value;
        let b = observed_ll(&est.subset(&order), &shuffled).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn e_step_never_lowers_totals(seed in any::<u64>(), n in 1usize..30, d in 1usize..7) {
        let data = dataset(seed, n, d);
        let completed = expectation_step(&data, &estimates(seed, n, d)).unwrap();
        for (i, r) in data.records().iter().enumerate() {
            prop_assert!(completed.total(i) >= r.observed_total() as f64);
        }
    }

    // Both criteria are concave in the log parameters: the chord lies below.
    #[test]
    fn criteria_are_concave_along_chords(seed in any::<u64>(), n in 1usize..15, d in 1usize..6, t in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let completed =
            CompletedDataset::new(d, (0..n * d).map(|_| rng.random_range(0.0..5.0)).collect()).unwrap();
        let a = estimates(seed, n, d);
        let b = estimates(seed.wrapping_add(1), n, d);
        let mix_occ: Vec<f64> = (0..n).map(|i| t * a.lambda()[i].ln() + (1.0 - t) * b.lambda()[i].ln()).collect();
        let mix_rep: Vec<f64> = (0..n * d).map(|k| t * a.p()[k].ln() + (1.0 - t) * b.p()[k].ln()).collect();
        let mid = estimates_from_scores(&mix_occ, &mix_rep, d).unwrap();
        let tol = 1e-9 * (1.0 + n as f64 * d as f64);
        let occ = |e: &ParameterEstimates| q_occ(e.lambda(), &completed).unwrap();
        let rep = |e: &ParameterEstimates| q_rep(e.p(), &completed).unwrap();
        prop_assert!(occ(&mid) >= t * occ(&a) + (1.0 - t) * occ(&b) - tol);
        prop_assert!(rep(&mid) >= t * rep(&a) + (1.0 - t) * rep(&b) - tol);
    }

    #[test]
    fn softmax_ignores_row_shifts(seed in any::<u64>(), n in 1usize..10, d in 1usize..8, shift in -20.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let occ: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let rep: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let moved: Vec<f64> = rep.iter().map(|s| s + shift).collect();
        let a = estimates_from_scores(&occ, &rep, d).unwrap();
        let b = estimates_from_scores(&occ, &moved, d).unwrap();
        for (x, y) in a.p().iter().zip(b.p()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn tree_splits_ignore_unit_order(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = vec![(0..n).map(|_| rng.random_range(0..6) as f64).collect::<Vec<f64>>()];
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-16..=16) as f64 / 4.0).collect();
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(1..=4) as f64 / 2.0).collect();
        let features = BinnedFeatures::new(vec![0], vec!["x".into()], &x).unwrap();
        let forward: Vec<u32> = (0..n as u32).collect();
        let backward: Vec<u32> = forward.iter().rev().copied().collect();
        let a = fit_regression_tree(&features, &forward, &g, &h, TreeParams::new(3)).unwrap();
        let b = fit_regression_tree(&features, &backward, &g, &h, TreeParams::new(3)).unwrap();
        for v in 0..6 {
            prop_assert_eq!(a.predict(&[v as f64]), b.predict(&[v as f64]));
        }
    }
}
