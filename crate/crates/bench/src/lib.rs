//! Fixtures shared by the benchmarks.

use nowcast_core::simulate::{simulate_dataset, SimulatedData, SimulationSpec};
use nowcast_core::{expectation_step, initialize_estimates, CompletedDataset, Dataset};

/// Censored nonlinear-setting dataset of `n` records.
pub fn dataset(n: usize, seed: u64) -> SimulatedData {
    simulate_dataset(n, &SimulationSpec::nonlinear(), seed).expect("preset simulation succeeds")
}

/// First E-step completion of `data`.
pub fn first_completion(data: &Dataset) -> CompletedDataset {
    let init = initialize_estimates(data).expect("simulated data has events");
    expectation_step(data, &init).expect("E-step succeeds")
}
