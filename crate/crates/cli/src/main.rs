//! `nowcast` command-line pipeline.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 for data errors
//! and 4 for numerical failures. Diagnostics go to standard error; summaries
//! are printed to standard output as JSON.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use serde_json::json;

use nowcast_core::io::{self, AggregateOptions, ModelFile, RunConfig};
use nowcast_core::simulate::{simulate_dataset, SimulationSpec};
use nowcast_core::tuning::{self, presets, GridSpec};
use nowcast_core::{
    ase_lambda, ase_p, complete_ll, nowcast, observed_ll, run_em, CompletedDataset, Error, Result,
};

#[derive(Parser)]
#[command(name = "nowcast", version, about = "Nowcast reporting-delayed event counts with EM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from a coefficient specification.
    Simulate {
        /// `linear`, `nonlinear` or a path to a specification JSON file.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Censored dataset CSV.
        #[arg(long)]
        out: PathBuf,
        /// Fully observed dataset CSV.
        #[arg(long)]
        complete: Option<PathBuf>,
        /// True parameters CSV.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Random grid search scored by val2 log-likelihood.
    Tune {
        #[arg(long)]
        config: PathBuf,
        /// `gbt`, `mlp` or a path to a grid JSON file.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sampling seed; defaults to the EM seed of the run configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Score table CSV.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Run configuration with the winning learner settings.
        #[arg(long)]
        out_config: Option<PathBuf>,
        #[arg(long)]
        tau: Option<i64>,
    },
    /// Fit a learner with EM.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_model: Option<PathBuf>,
        /// Line-delimited JSON iteration trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        tau: Option<i64>,
    },
    /// Predict the censored cells of a dataset.
    Nowcast {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Expected unreported events per record.
        #[arg(long)]
        totals: Option<PathBuf>,
        #[arg(long)]
        tau: Option<i64>,
    },
    /// Score a fitted model on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// True parameters CSV; adds average squared errors.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Fully observed counterpart of `--data`; adds the complete LL.
        #[arg(long)]
        complete: Option<PathBuf>,
        /// Export GLM coefficients to this CSV.
        #[arg(long)]
        coefficients: Option<PathBuf>,
        #[arg(long)]
        tau: Option<i64>,
    },
    /// Aggregate a case-level line list into a dataset.
    Ingest {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long, default_value = "onset")]
        onset: String,
        #[arg(long, default_value = "report")]
        report: String,
        /// Date of period 1 (YYYY-MM-DD).
        #[arg(long)]
        epoch: NaiveDate,
        #[arg(long)]
        d: usize,
        /// Present period, as a date or a day index.
        #[arg(long)]
        tau: String,
        /// Grouping column; repeat for several. Without keys every case is
        /// its own record.
        #[arg(long = "key")]
        keys: Vec<String>,
        /// Day-level flags (first column the date).
        #[arg(long)]
        calendar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_json(&read_text(path)?)
}

fn required(flag: Option<PathBuf>, fallback: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.cloned())
        .ok_or_else(|| Error::Config(format!("no {what} path given on the command line or in the run config")))
}

fn print_json(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("JSON values serialize"));
}

fn simulate(spec: &str, n: usize, seed: u64, out: &Path, complete: Option<&Path>, truth: Option<&Path>) -> Result<()> {
    let spec = match spec {
        "linear" => SimulationSpec::linear(),
        "nonlinear" => SimulationSpec::nonlinear(),
        path => SimulationSpec::from_json(&read_text(Path::new(path))?)?,
    };
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let sim = simulate_dataset(n, &spec, seed)?;
    io::write_dataset(out, &sim.censored)?;
    if let Some(path) = complete {
        io::write_dataset(path, &sim.complete)?;
    }
    if let Some(path) = truth {
        let ids: Vec<String> = sim.censored.records().iter().map(|r| r.entity_id.clone()).collect();
        io::write_truth(path, &sim.truth, &ids)?;
    }
    print_json(json!({ "spec": spec.name, "records": n, "seed": seed, "d": sim.censored.d(), "tau": sim.censored.tau() }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn tune(
    config: &Path,
    grid: &str,
    budget: usize,
    data: Option<PathBuf>,
    seed: Option<u64>,
    scores: Option<PathBuf>,
    out_config: Option<PathBuf>,
    tau: Option<i64>,
) -> Result<()> {
    let run = load_run_config(config)?;
    let spec = match grid {
        "gbt" | "mlp" => presets::grid(grid)?,
        path => GridSpec::from_json(&read_text(Path::new(path))?)?,
    };
    if spec.kind != run.learner.kind() {
        return Err(Error::Config(format!(
            "grid is for `{}` but the run config uses `{}`",
            spec.kind,
            run.learner.kind()
        )));
    }
    let data = io::read_dataset(&required(data, run.paths.data.as_ref(), "data")?, tau)?;
    let seed = seed.unwrap_or(run.em.seed);
    let result = tuning::random_grid_search(&data, &run.learner, &spec.grid, budget, seed, &run.em)?;

    if let Some(path) = scores.or_else(|| run.paths.scores.clone()) {
        let mut buf = Vec::new();
        io::write_scores_csv(&result.table, &mut buf)?;
        io::write_atomic(&path, &buf)?;
    }
    if let Some(path) = out_config {
        let mut best = run.clone();
        best.learner = result.best.clone();
        best.paths = Default::default();
        io::write_atomic(&path, best.to_json()?.as_bytes())?;
    }
    print_json(json!({
        "evaluated": result.table.len(),
        "best_sample": result.best_sample,
        "best_val2_ll": result.table[result.best_sample].val2_ll,
        "best": result.best,
    }));
    Ok(())
}

fn fit(config: &Path, data: Option<PathBuf>, out_model: Option<PathBuf>, trace: Option<PathBuf>, tau: Option<i64>) -> Result<()> {
    let run = load_run_config(config)?;
    let data = io::read_dataset(&required(data, run.paths.data.as_ref(), "data")?, tau)?;
    let out_model = required(out_model, run.paths.model.as_ref(), "model")?;
    let trace = trace.or_else(|| run.paths.trace.clone());
    let mut trace_buf = Vec::new();
    let result = run_em(&data, &run.learner, &run.em, trace.as_ref().map(|_| &mut trace_buf as &mut dyn std::io::Write))?;
    if let Some(path) = &trace {
        io::write_atomic(path, &trace_buf)?;
    }
    let model = ModelFile::new(result.learner, result.best_iteration, serde_json::to_value(&run)?);
    io::write_model(&out_model, &model)?;
    print_json(json!({
        "learner": run.learner.kind(),
        "iterations": result.ll_trace.len(),
        "best_iteration": result.best_iteration,
        "final_ll": result.final_ll,
    }));
    Ok(())
}

fn nowcast_cmd(model: &Path, data: &Path, out: &Path, totals: Option<&Path>, tau: Option<i64>) -> Result<()> {
    let model = io::read_model(model)?;
    let data = io::read_dataset(data, tau)?;
    let nc = nowcast(&model.learner, &data)?;
    let mut buf = Vec::new();
    io::write_nowcast_csv(&nc, &data, &mut buf)?;
    io::write_atomic(out, &buf)?;
    if let Some(path) = totals {
        let mut buf = Vec::new();
        io::write_totals_csv(&nc, &data, &mut buf)?;
        io::write_atomic(path, &buf)?;
    }
    let unreported: f64 = nc.totals.iter().map(|t| t.unreported).sum();
    print_json(json!({ "cells": nc.cells.len(), "records": data.len(), "unreported": unreported }));
    Ok(())
}

fn evaluate(
    model: &Path,
    data: &Path,
    truth: Option<&Path>,
    complete: Option<&Path>,
    coefficients: Option<&Path>,
    tau: Option<i64>,
) -> Result<()> {
    let model = io::read_model(model)?;
    let data = io::read_dataset(data, tau)?;
    let est = model.learner.predict(&data)?;
    let mut report = serde_json::Map::new();
    report.insert("records".into(), json!(data.len()));
    report.insert("observed_ll".into(), json!(observed_ll(&est, &data)?.value));
    if let Some(path) = complete {
        let full = io::read_dataset(path, None)?;
        if full.len() != data.len() {
            return Err(Error::Data(format!("complete data has {} records, data has {}", full.len(), data.len())));
        }
        let completed = CompletedDataset::from_complete_dataset(&full)?;
        report.insert("complete_ll".into(), json!(complete_ll(&model.learner.predict(&full)?, &completed)?.value));
    }
    if let Some(path) = truth {
        let (ids, truth) = io::read_truth(path)?;
        let aligned = ids.len() == data.len() && ids.iter().zip(data.records()).all(|(id, r)| *id == r.entity_id);
        if !aligned {
            return Err(Error::Data("truth record ids do not match the dataset".into()));
        }
        report.insert("ase_lambda".into(), json!(ase_lambda(&est, &truth)?));
        report.insert("ase_p".into(), json!(ase_p(&est, &truth)?));
    }
    if let Some(path) = coefficients {
        let mut buf = Vec::new();
        io::write_glm_coefficients_csv(&model.learner, &mut buf)?;
        io::write_atomic(path, &buf)?;
    }
    print_json(serde_json::Value::Object(report));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ingest(
    cases: &Path,
    onset: &str,
    report: &str,
    epoch: NaiveDate,
    d: usize,
    tau: &str,
    keys: Vec<String>,
    calendar: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let tau = io::parse_day(tau, epoch).ok_or_else(|| Error::Config(format!("--tau `{tau}` is not a date")))?;
    let table = io::read_cases_csv(fs::File::open(cases)?, onset, report, epoch)?;
    let calendar = match calendar {
        Some(path) => Some(io::read_calendar_csv(fs::File::open(path)?, epoch)?),
        None => None,
    };
    let (data, summary) = io::aggregate_cases(&table, &AggregateOptions { d, tau, entity_keys: keys, calendar })?;
    io::write_dataset(out, &data)?;
    print_json(serde_json::to_value(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { spec, n, seed, out, complete, truth } => {
            simulate(&spec, n, seed, &out, complete.as_deref(), truth.as_deref())
        }
        Command::Tune { config, grid, budget, data, seed, scores, out_config, tau } => {
            tune(&config, &grid, budget, data, seed, scores, out_config, tau)
        }
        Command::Fit { config, data, out_model, trace, tau } => fit(&config, data, out_model, trace, tau),
        Command::Nowcast { model, data, out, totals, tau } => nowcast_cmd(&model, &data, &out, totals.as_deref(), tau),
        Command::Evaluate { model, data, truth, complete, coefficients, tau } => {
            evaluate(&model, &data, truth.as_deref(), complete.as_deref(), coefficients.as_deref(), tau)
        }
        Command::Ingest { cases, onset, report, epoch, d, tau, keys, calendar, out } => {
            ingest(&cases, &onset, &report, epoch, d, &tau, keys, calendar.as_deref(), &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nowcast: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
