use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nowcast_core::simulate::SimulationSpec;
use serde_json::Value;

fn nowcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = nowcast(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn simulate(dir: &Path, n: &str, seed: &str) {
    ok(
        dir,
        &["simulate", "--spec", "linear", "--n", n, "--seed", seed, "--out", "data.csv", "--truth", "truth.csv"],
    );
}

fn glm_config(dir: &Path, k: usize) {
    let text = format!(r#"{{"schema_version":1,"learner":{{"kind":"glm"}},"em":{{"k":{k},"em_patience":10,"seed":5}}}}"#);
    fs::write(dir.join("run.json"), text).unwrap();
}

#[test]
fn simulate_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let files = ["a.csv", "a_full.csv", "a_truth.csv"];
    let run = |names: [&str; 3]| {
        ok(
            dir.path(),
            &[
                "simulate", "--spec", "linear", "--n", "100", "--seed", "7", "--out", names[0], "--complete", names[1],
                "--truth", names[2],
            ],
        )
    };
    run(files);
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    run(["b.csv", "b_full.csv", "b_truth.csv"]);
    for (f, bytes) in ["b.csv", "b_full.csv", "b_truth.csv"].iter().zip(&first) {
        assert_eq!(&fs::read(dir.path().join(f)).unwrap(), bytes, "{f} differs");
    }
    ok(dir.path(), &["simulate", "--spec", "linear", "--n", "100", "--seed", "8", "--out", "c.csv"]);
    assert_ne!(fs::read(dir.path().join("c.csv")).unwrap(), first[0]);
}

#[test]
fn evaluate_reproduces_the_final_trace_entry() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "400", "3");
    glm_config(dir.path(), 4);
    ok(
        dir.path(),
        &["fit", "--config", "run.json", "--data", "data.csv", "--out-model", "model.json", "--trace", "trace.jsonl"],
    );
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let last: Value = serde_json::from_str(trace.lines().last().unwrap()).unwrap();
    assert_eq!(last["iteration"], 0);
    let report = ok(dir.path(), &["evaluate", "--model", "model.json", "--data", "data.csv", "--truth", "truth.csv"]);
    let traced = last["final_full_ll"].as_f64().unwrap();
    let evaluated = report["observed_ll"].as_f64().unwrap();
    assert_eq!(traced.to_bits(), evaluated.to_bits());
    assert!(report["ase_lambda"].as_f64().unwrap() >= 0.0);
    assert!(report["ase_p"].as_f64().unwrap() >= 0.0);
}

#[test]
fn nowcast_emits_one_row_per_censored_cell() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "300", "4");
    glm_config(dir.path(), 2);
    ok(dir.path(), &["fit", "--config", "run.json", "--data", "data.csv", "--out-model", "model.json"]);
    ok(
        dir.path(),
        &["nowcast", "--model", "model.json", "--data", "data.csv", "--out", "cells.csv", "--totals", "totals.csv"],
    );
    let data = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    let header: Vec<&str> = data.lines().next().unwrap().split(',').collect();
    let d = header.iter().filter(|h| h.starts_with("n_")).count();
    let expected: usize =
        data.lines().skip(1).map(|l| d - l.split(',').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    let cells = fs::read_to_string(dir.path().join("cells.csv")).unwrap();
    assert_eq!(cells.lines().count() - 1, expected);
    let totals = fs::read_to_string(dir.path().join("totals.csv")).unwrap();
    assert_eq!(totals.lines().count() - 1, data.lines().count() - 1);
}

#[test]
fn glm_coefficients_export_lists_every_class() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "300", "6");
    glm_config(dir.path(), 2);
    ok(dir.path(), &["fit", "--config", "run.json", "--data", "data.csv", "--out-model", "model.json"]);
    ok(dir.path(), &["evaluate", "--model", "model.json", "--data", "data.csv", "--coefficients", "coef.csv"]);
    let text = fs::read_to_string(dir.path().join("coef.csv")).unwrap();
    assert!(text.starts_with("model,column,class,value,std_error\n"));
    assert!(text.contains("\nreporting,(intercept),11,0,"));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();

    let missing = nowcast(p, &["fit", "--config", "absent.json", "--data", "x.csv", "--out-model", "m.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());

    fs::write(p.join("typo.json"), r#"{"schema_version":1,"learner":{"kind":"glm"},"em":{"kk":3}}"#).unwrap();
    let typo = nowcast(p, &["fit", "--config", "typo.json", "--data", "x.csv", "--out-model", "m.json"]);
    assert_eq!(typo.status.code(), Some(2));

    glm_config(p, 2);
    fs::write(p.join("bad.csv"), "entity_id,occ_period,tau_i,n_1,n_2\na,1,2,3,x\n").unwrap();
    let bad = nowcast(p, &["fit", "--config", "run.json", "--data", "bad.csv", "--out-model", "m.json"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));

    let mut spec = serde_json::to_value(SimulationSpec::linear()).unwrap();
    spec["coefficients"][0]["lambda"] = Value::from(800.0);
    fs::write(p.join("spec.json"), spec.to_string()).unwrap();
    let overflow = nowcast(p, &["simulate", "--spec", "spec.json", "--n", "5", "--out", "o.csv"]);
    assert_eq!(overflow.status.code(), Some(4), "{}", String::from_utf8_lossy(&overflow.stderr));
}

#[test]
fn ingest_aggregates_a_line_list() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("cases.csv"),
        "onset,report,region,age\n\
         2021-03-01,2021-03-03,north,30\n\
         2021-03-01,2021-03-01,north,30\n\
         2021-03-02,2021-03-30,south,40\n\
         2021-03-09,2021-03-12,south,40\n",
    )
    .unwrap();
    let summary = ok(
        p,
        &[
            "ingest", "--cases", "cases.csv", "--epoch", "2021-03-01", "--d", "5", "--tau", "2021-03-10", "--key",
            "region", "--key", "age", "--out", "data.csv",
        ],
    );
    assert_eq!(summary["input_rows"], 4);
    assert_eq!(summary["dropped_delay"], 1);
    assert_eq!(summary["censored"], 1);
    assert_eq!(summary["records"], 2);
    let data = fs::read_to_string(p.join("data.csv")).unwrap();
    let lines: Vec<&str> = data.lines().collect();
    assert_eq!(lines[0], "entity_id,occ_period,tau_i,n_1,n_2,n_3,n_4,n_5,region=north,region=south,age");
    assert_eq!(lines[1], "north|30,1,5,1,0,1,0,0,1,0,30");
    assert_eq!(lines[2], "south|40,9,2,0,0,,,,0,1,40");
}

#[test]
fn tune_scores_every_sampled_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    simulate(p, "300", "9");
    fs::write(
        p.join("run.json"),
        r#"{"schema_version":1,"learner":{"kind":"gbt","t_later_occ":5,"t_later_rep":5},"em":{"k":2,"seed":1}}"#,
    )
    .unwrap();
    fs::write(p.join("grid.json"), r#"{"kind":"gbt","grid":{"eta_occ":[0.01,0.1],"tree_depth_occ":[2,3]}}"#).unwrap();
    let summary = ok(
        p,
        &[
            "tune", "--config", "run.json", "--grid", "grid.json", "--budget", "3", "--data", "data.csv", "--scores",
            "scores.csv", "--out-config", "best.json",
        ],
    );
    assert_eq!(summary["evaluated"], 3);
    let scores = fs::read_to_string(p.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 4);
    let best = fs::read_to_string(p.join("best.json")).unwrap();
    assert!(best.contains("\"schema_version\": 1"));
}
