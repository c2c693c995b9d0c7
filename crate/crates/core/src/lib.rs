//! Nowcasting of reporting-delayed event counts.
//!
//! Counts `N_ij` of events that occurred in cell `i` and were reported with
//! delay class `j` follow `Poisson(λ_i p_ij)`. Cells with `j > τ_i` are not
//! yet observed. [`em::run_em`] alternates an E-step that fills censored
//! cells with their expectations and an M-step that fits the occurrence
//! model `λ(x)` and the reporting model `p(x)` with one of the learners in
//! [`learner`].

pub mod data;
pub mod em;
pub mod error;
pub mod io;
pub mod learner;
pub mod likelihood;
pub mod numeric;
pub mod simulate;
pub mod tuning;

pub use data::{
    compute_tau, CompletedDataset, Dataset, FeatureRole, FeatureSchema, FeatureVector, ModelTarget,
    ObservationRecord, ParameterEstimates, Split,
};
pub use em::{expectation_step, initialize_estimates, nowcast, run_em, EmConfig, FitResult, Nowcast};
pub use error::{Error, Result};
pub use learner::{LearnerConfig, LearnerHandle};
pub use likelihood::{ase_lambda, ase_p, complete_ll, observed_ll, q_occ, q_rep, LikelihoodValue};
pub use io::{ModelFile, RunConfig};
pub use tuning::{random_grid_search, Grid, GridSpec, TuningResult};
