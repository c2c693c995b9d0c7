//! File formats: dataset, truth, nowcast and coefficient CSVs, run
//! configuration and model JSON, and aggregation of case-level line lists.
//!
//! CSVs are UTF-8 with LF line endings. Floats are written with Rust's
//! shortest round-trip formatting, so reading a file back yields identical
//! values. Every writer to a path goes through a temporary file in the same
//! directory followed by a rename.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{compute_tau, Dataset, FeatureSchema, ObservationRecord, ParameterEstimates};
use crate::em::{EmConfig, Nowcast, NowcastCell, NowcastTotal};
use crate::error::{Error, Result};
use crate::learner::{LearnerConfig, LearnerHandle, LearnerModel};
use crate::tuning::TuningRow;

pub const RUN_CONFIG_VERSION: u32 = 1;
pub const MODEL_FORMAT: &str = "nowcast-model";
pub const MODEL_VERSION: u32 = 1;

/// Write `contents` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(r)
}

/// Shortest round-trip text; exponent form outside `[1e-5, 1e16)`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn parse_f64(cell: &str, line: u64, column: &str) -> Result<f64> {
    cell.trim()
        .parse()
        .map_err(|_| Error::InvalidRecord(format!("line {line}: column `{column}`: `{cell}` is not a number")))
}

fn parse_int<T: std::str::FromStr>(cell: &str, line: u64, column: &str) -> Result<T> {
    cell.trim()
        .parse()
        .map_err(|_| Error::InvalidRecord(format!("line {line}: column `{column}`: `{cell}` is not an integer")))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn expect_header(header: &csv::StringRecord, expected: &[String], what: &str) -> Result<()> {
    let got: Vec<&str> = header.iter().collect();
    if got.len() != expected.len() || got.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::Schema(format!("{what} header must be `{}`, found `{}`", expected.join(","), got.join(","))));
    }
    Ok(())
}

// ---------------------------------------------------------------- datasets

/// `entity_id,occ_period,tau_i,n_1..n_d,<features>`; cells with `j > τ_i`
/// are left empty.
pub fn write_dataset_csv<W: Write>(data: &Dataset, w: W) -> Result<()> {
    let mut out = csv_writer(w);
    let mut header = vec!["entity_id".to_string(), "occ_period".into(), "tau_i".into()];
    header.extend((1..=data.d()).map(|j| format!("n_{j}")));
    header.extend(data.schema().names().iter().cloned());
    out.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for r in data.records() {
        row.clear();
        row.push(r.entity_id.clone());
        row.push(r.occ_period.to_string());
        row.push(r.tau_i().to_string());
        for j in 0..data.d() {
            row.push(r.observed_counts.get(j).map_or(String::new(), |n| n.to_string()));
        }
        row.extend(r.covariates.iter().map(|&v| fmt_f64(v)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset CSV. Without `tau`, the present period is inferred as
/// `max_i(occ_i + τ_i - 1)`; every record's `τ_i` must agree with it.
pub fn read_dataset_csv<R: Read>(r: R, tau: Option<i64>) -> Result<Dataset> {
    let mut rdr = csv_reader(r);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols[0] != "entity_id" || cols[1] != "occ_period" || cols[2] != "tau_i" {
        return Err(Error::Schema("dataset header must start with `entity_id,occ_period,tau_i,n_1`".into()));
    }
    let mut d = 0;
    while 3 + d < cols.len() && cols[3 + d] == format!("n_{}", d + 1) {
        d += 1;
    }
    if d == 0 {
        return Err(Error::Schema("dataset header has no `n_1` column".into()));
    }
    let schema = FeatureSchema::new(cols[3 + d..].iter().map(|s| s.to_string()))?;

    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let occ_period: i64 = parse_int(&rec[1], line, "occ_period")?;
        let tau_i: usize = parse_int(&rec[2], line, "tau_i")?;
        if tau_i == 0 || tau_i > d {
            return Err(Error::InvalidRecord(format!("line {line}: tau_i {tau_i} outside 1..={d}")));
        }
        let mut counts = Vec::with_capacity(tau_i);
        for j in 0..d {
            let cell = rec[3 + j].trim();
            match (j < tau_i, cell.is_empty()) {
                (true, false) => counts.push(parse_int::<u64>(cell, line, &cols[3 + j])?),
                (false, true) => {}
                (true, true) => {
                    return Err(Error::InvalidRecord(format!("line {line}: `{}` is empty but observable", cols[3 + j])))
                }
                (false, false) => {
                    return Err(Error::InvalidRecord(format!(
                        "line {line}: `{}` is filled beyond tau_i = {tau_i}",
                        cols[3 + j]
                    )))
                }
            }
        }
        let covariates =
            (3 + d..cols.len()).map(|c| parse_f64(&rec[c], line, cols[c])).collect::<Result<Vec<f64>>>()?;
        records.push(ObservationRecord {
            entity_id: rec[0].to_string(),
            occ_period,
            covariates,
            observed_counts: counts,
        });
    }
    let tau = match tau {
        Some(t) => t,
        None => records
            .iter()
            .map(|r| r.occ_period + r.tau_i() as i64 - 1)
            .max()
            .ok_or_else(|| Error::Data("dataset has no records".into()))?,
    };
    Dataset::new(schema, records, d, tau)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset_csv(data, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn read_dataset(path: &Path, tau: Option<i64>) -> Result<Dataset> {
    read_dataset_csv(fs::File::open(path)?, tau)
}

// ------------------------------------------------------------------- truth

/// `record_id,lambda,p_1..p_d`, one row per record of `data`.
pub fn write_truth_csv<W: Write>(truth: &ParameterEstimates, ids: &[String], w: W) -> Result<()> {
    if ids.len() != truth.len() {
        return Err(Error::Contract(format!("{} ids for {} truth rows", ids.len(), truth.len())));
    }
    let mut out = csv_writer(w);
    let mut header = vec!["record_id".to_string(), "lambda".into()];
    header.extend((1..=truth.d()).map(|j| format!("p_{j}")));
    out.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone(), fmt_f64(truth.lambda()[i])];
        row.extend(truth.p_row(i).iter().map(|&p| fmt_f64(p)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Record ids and parameters from a truth CSV.
pub fn read_truth_csv<R: Read>(r: R) -> Result<(Vec<String>, ParameterEstimates)> {
    let mut rdr = csv_reader(r);
    let header = rdr.headers()?.clone();
    let d = header.len().saturating_sub(2);
    let mut expected = vec!["record_id".to_string(), "lambda".into()];
    expected.extend((1..=d).map(|j| format!("p_{j}")));
    if d == 0 {
        return Err(Error::Schema("truth header needs `record_id,lambda,p_1`".into()));
    }
    expect_header(&header, &expected, "truth")?;
    let (mut ids, mut lambda, mut p) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        ids.push(rec[0].to_string());
        lambda.push(parse_f64(&rec[1], line, "lambda")?);
        for j in 0..d {
            p.push(parse_f64(&rec[2 + j], line, &expected[2 + j])?);
        }
    }
    Ok((ids, ParameterEstimates::new(lambda, p, d)?))
}

pub fn write_truth(path: &Path, truth: &ParameterEstimates, ids: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    write_truth_csv(truth, ids, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn read_truth(path: &Path) -> Result<(Vec<String>, ParameterEstimates)> {
    read_truth_csv(fs::File::open(path)?)
}

// ---------------------------------------------------------------- nowcasts

const NOWCAST_HEADER: [&str; 5] = ["record", "entity_id", "occ_period", "delay", "predicted"];
const TOTALS_HEADER: [&str; 4] = ["record", "entity_id", "occ_period", "unreported"];

/// One row per censored cell: `record,entity_id,occ_period,delay,predicted`.
pub fn write_nowcast_csv<W: Write>(nowcast: &Nowcast, data: &Dataset, w: W) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(NOWCAST_HEADER)?;
    for c in &nowcast.cells {
        let r = data.record(c.record);
        out.write_record([
            c.record.to_string(),
            r.entity_id.clone(),
            r.occ_period.to_string(),
            c.delay.to_string(),
            fmt_f64(c.predicted),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Expected unreported events per record.
pub fn write_totals_csv<W: Write>(nowcast: &Nowcast, data: &Dataset, w: W) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(TOTALS_HEADER)?;
    for t in &nowcast.totals {
        let r = data.record(t.record);
        out.write_record([t.record.to_string(), r.entity_id.clone(), r.occ_period.to_string(), fmt_f64(t.unreported)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_nowcast_csv<R: Read>(r: R) -> Result<Vec<NowcastCell>> {
    let mut rdr = csv_reader(r);
    let expected: Vec<String> = NOWCAST_HEADER.iter().map(|s| s.to_string()).collect();
    expect_header(&rdr.headers()?.clone(), &expected, "nowcast")?;
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        cells.push(NowcastCell {
            record: parse_int(&rec[0], line, "record")?,
            delay: parse_int(&rec[3], line, "delay")?,
            predicted: parse_f64(&rec[4], line, "predicted")?,
        });
    }
    Ok(cells)
}

pub fn read_totals_csv<R: Read>(r: R) -> Result<Vec<NowcastTotal>> {
    let mut rdr = csv_reader(r);
    let expected: Vec<String> = TOTALS_HEADER.iter().map(|s| s.to_string()).collect();
    expect_header(&rdr.headers()?.clone(), &expected, "totals")?;
    let mut totals = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        totals.push(NowcastTotal {
            record: parse_int(&rec[0], line, "record")?,
            unreported: parse_f64(&rec[3], line, "unreported")?,
        });
    }
    Ok(totals)
}

// ------------------------------------------------------- GLM coefficients

/// `model,column,class,value,std_error`. Occurrence rows leave `class`
/// empty; reporting rows use 1-based classes and include the zero
/// reference class `d`.
pub fn write_glm_coefficients_csv<W: Write>(handle: &LearnerHandle, w: W) -> Result<()> {
    let LearnerModel::Glm(glm) = &handle.model else {
        return Err(Error::Contract(format!("coefficient export needs a GLM, found {}", handle.kind())));
    };
    let (Some(occ), Some(rep)) = (&glm.occurrence, &glm.reporting) else {
        return Err(Error::Contract("GLM has not been fitted".into()));
    };
    let mut out = csv_writer(w);
    out.write_record(["model", "column", "class", "value", "std_error"])?;
    for (c, name) in glm.occurrence_layout.names().iter().enumerate() {
        out.write_record([
            "occurrence",
            name,
            "",
            &fmt_f64(occ.coefficients[c]),
            &fmt_f64(occ.std_errors[c]),
        ])?;
    }
    for class in 0..rep.d {
        for (c, name) in glm.reporting_layout.names().iter().enumerate() {
            out.write_record([
                "reporting",
                name,
                &(class + 1).to_string(),
                &fmt_f64(rep.coefficient(class, c)),
                &fmt_f64(rep.std_error(class, c)),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Tuning score table: `sample,grid_index,config,val2_ll,seconds` with the
/// configuration as a JSON string.
pub fn write_scores_csv<W: Write>(table: &[TuningRow], w: W) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["sample", "grid_index", "config", "val2_ll", "seconds"])?;
    for row in table {
        out.write_record([
            row.sample.to_string(),
            row.grid_index.to_string(),
            serde_json::to_string(&row.config)?,
            fmt_f64(row.val2_ll),
            fmt_f64(row.seconds),
        ])?;
    }
    out.flush()?;
    Ok(())
}

// ------------------------------------------------------------ run configs

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub nowcast: Option<PathBuf>,
    pub totals: Option<PathBuf>,
    pub scores: Option<PathBuf>,
}

impl RunPaths {
    fn all(&self) -> Vec<(&'static str, &PathBuf)> {
        [
            ("data", &self.data),
            ("model", &self.model),
            ("trace", &self.trace),
            ("nowcast", &self.nowcast),
            ("totals", &self.totals),
            ("scores", &self.scores),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|p| (k, p)))
        .collect()
    }
}

/// A run: learner, EM settings and optional file locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub learner: LearnerConfig,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub paths: RunPaths,
}

impl RunConfig {
    pub fn new(learner: LearnerConfig, em: EmConfig) -> Self {
        Self { schema_version: RUN_CONFIG_VERSION, learner, em, paths: RunPaths::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {RUN_CONFIG_VERSION})",
                self.schema_version
            )));
        }
        if self.em.k == 0 {
            return Err(Error::Config("em.k must be at least 1".into()));
        }
        let (a, b, c) = self.em.split_fractions;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be in [0, 1] and sum to 1".into()));
        }
        self.learner.validate()?;
        let paths = self.paths.all();
        for (i, (ka, pa)) in paths.iter().enumerate() {
            if let Some((kb, _)) = paths[i + 1..].iter().find(|(_, pb)| pb == pa) {
                return Err(Error::Config(format!("paths `{ka}` and `{kb}` both point to {}", pa.display())));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

// ------------------------------------------------------------------ models

/// A fitted learner with the configuration that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub best_iteration: usize,
    pub config: Value,
    pub learner: LearnerHandle,
}

impl ModelFile {
    pub fn new(learner: LearnerHandle, best_iteration: usize, config: Value) -> Self {
        Self { format: MODEL_FORMAT.into(), version: MODEL_VERSION, best_iteration, config, learner }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ModelFile = serde_json::from_str(text)?;
        if model.format != MODEL_FORMAT || model.version != MODEL_VERSION {
            return Err(Error::Data(format!("unsupported model file {} v{}", model.format, model.version)));
        }
        model.learner.validate()?;
        Ok(model)
    }
}

pub fn write_model(path: &Path, model: &ModelFile) -> Result<()> {
    write_atomic(path, model.to_json()?.as_bytes())
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    ModelFile::from_json(&fs::read_to_string(path)?)
}

// ------------------------------------------------------ case aggregation

/// Day index of a date: the epoch is period 1. Plain integers are taken as
/// day indices directly.
pub fn parse_day(cell: &str, epoch: NaiveDate) -> Option<i64> {
    let cell = cell.trim();
    if let Ok(day) = cell.parse::<i64>() {
        return Some(day);
    }
    let date = NaiveDate::parse_from_str(cell, "%Y-%m-%d").ok()?;
    Some((date - epoch).num_days() + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRow {
    /// 1-based line in the source file (header is line 1).
    pub line: u64,
    pub onset: i64,
    pub report: i64,
    /// Raw covariate cells, aligned with [`CaseTable::columns`].
    pub fields: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseTable {
    pub columns: Vec<String>,
    pub rows: Vec<CaseRow>,
}

/// Read a line list. All columns other than the two date columns are
/// covariates.
pub fn read_cases_csv<R: Read>(r: R, onset_col: &str, report_col: &str, epoch: NaiveDate) -> Result<CaseTable> {
    let mut rdr = csv_reader(r);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("case file has no `{name}` column")))
    };
    let (onset_at, report_at) = (find(onset_col)?, find(report_col)?);
    let cov_at: Vec<usize> = (0..header.len()).filter(|&c| c != onset_at && c != report_at).collect();
    let columns = cov_at.iter().map(|&c| header[c].to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let day = |c: usize, name: &str| {
            parse_day(&rec[c], epoch)
                .ok_or_else(|| Error::InvalidRecord(format!("line {line}: `{name}` value `{}` is not a date", &rec[c])))
        };
        rows.push(CaseRow {
            line,
            onset: day(onset_at, onset_col)?,
            report: day(report_at, report_col)?,
            fields: cov_at.iter().map(|&c| rec[c].to_string()).collect(),
        });
    }
    Ok(CaseTable { columns, rows })
}

/// Day-level flags used to build `ps{j}_<flag>` features.
#[derive(Clone, Debug, PartialEq)]
pub struct Calendar {
    pub flags: Vec<String>,
    pub days: BTreeMap<i64, Vec<f64>>,
}

/// First column holds the date, remaining columns numeric flags.
pub fn read_calendar_csv<R: Read>(r: R, epoch: NaiveDate) -> Result<Calendar> {
    let mut rdr = csv_reader(r);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Schema("calendar needs a date column and at least one flag".into()));
    }
    let flags: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut days = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let day = parse_day(&rec[0], epoch)
            .ok_or_else(|| Error::InvalidRecord(format!("line {line}: `{}` is not a date", &rec[0])))?;
        let values = flags.iter().enumerate().map(|(k, f)| parse_f64(&rec[k + 1], line, f)).collect::<Result<_>>()?;
        if days.insert(day, values).is_some() {
            return Err(Error::InvalidRecord(format!("line {line}: day {day} listed twice")));
        }
    }
    Ok(Calendar { flags, days })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateOptions {
    pub d: usize,
    /// Present period.
    pub tau: i64,
    /// Grouping columns; empty means one record per case.
    pub entity_keys: Vec<String>,
    pub calendar: Option<Calendar>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AggregateSummary {
    pub input_rows: usize,
    /// Cases reported more than `d - 1` periods after onset.
    pub dropped_delay: usize,
    /// Cases with onset after the present period.
    pub dropped_after_tau: usize,
    /// Cases kept but reported after the present period.
    pub censored: usize,
    pub observed: u64,
    pub records: usize,
}

impl AggregateSummary {
    pub fn dropped(&self) -> usize {
        self.dropped_delay + self.dropped_after_tau
    }
}

/// Covariate column encoding: numeric columns pass through, any column with
/// a non-numeric cell becomes one indicator per level.
enum Encoding {
    Numeric,
    Levels(Vec<String>),
}

fn encode_columns(table: &CaseTable) -> (Vec<Encoding>, Vec<String>) {
    let mut encodings = Vec::with_capacity(table.columns.len());
    let mut names = Vec::new();
    for (c, name) in table.columns.iter().enumerate() {
        let numeric = table.rows.iter().all(|r| r.fields[c].trim().parse::<f64>().is_ok());
        if numeric {
            names.push(name.clone());
            encodings.push(Encoding::Numeric);
        } else {
            let levels: BTreeSet<&str> = table.rows.iter().map(|r| r.fields[c].as_str()).collect();
            let levels: Vec<String> = levels.into_iter().map(str::to_string).collect();
            names.extend(levels.iter().map(|l| format!("{name}={l}")));
            encodings.push(Encoding::Levels(levels));
        }
    }
    (encodings, names)
}

fn encode_row(encodings: &[Encoding], fields: &[String], out: &mut Vec<f64>) {
    for (enc, cell) in encodings.iter().zip(fields) {
        match enc {
            Encoding::Numeric => out.push(cell.trim().parse().expect("checked numeric")),
            Encoding::Levels(levels) => out.extend(levels.iter().map(|l| if l == cell { 1.0 } else { 0.0 })),
        }
    }
}

/// Turn a line list into a dataset. Delay class `j = report - onset + 1`.
pub fn aggregate_cases(table: &CaseTable, opts: &AggregateOptions) -> Result<(Dataset, AggregateSummary)> {
    let d = opts.d;
    if d == 0 {
        return Err(Error::Config("d must be at least 1".into()));
    }
    let key_at: Vec<usize> = opts
        .entity_keys
        .iter()
        .map(|k| {
            table
                .columns
                .iter()
                .position(|c| c == k)
                .ok_or_else(|| Error::Schema(format!("entity key `{k}` is not a column")))
        })
        .collect::<Result<_>>()?;
    let (encodings, mut names) = encode_columns(table);
    let n_entity = names.len();
    if let Some(cal) = &opts.calendar {
        for j in 1..=d {
            names.extend(cal.flags.iter().map(|f| format!("ps{j}_{f}")));
        }
    }
    let schema = FeatureSchema::new(names)?;

    let mut summary = AggregateSummary { input_rows: table.rows.len(), ..Default::default() };
    // Record key -> (record, line that created it, raw covariates).
    let mut index: HashMap<(Vec<String>, i64), usize> = HashMap::new();
    let mut records: Vec<(ObservationRecord, u64, Vec<String>)> = Vec::new();
    for row in &table.rows {
        if row.report < row.onset {
            return Err(Error::InvalidRecord(format!(
                "line {}: report day {} precedes onset day {}",
                row.line, row.report, row.onset
            )));
        }
        let j = (row.report - row.onset + 1) as usize;
        if j > d {
            summary.dropped_delay += 1;
            continue;
        }
        if row.onset > opts.tau {
            summary.dropped_after_tau += 1;
            continue;
        }
        let slot = if key_at.is_empty() {
            None
        } else {
            let key: Vec<String> = key_at.iter().map(|&c| row.fields[c].clone()).collect();
            index.get(&(key, row.onset)).copied()
        };
        let at = match slot {
            Some(at) => {
                let (_, first_line, fields) = &records[at];
                if fields != &row.fields {
                    return Err(Error::InvalidRecord(format!(
                        "line {}: covariates differ from line {first_line} in the same group",
                        row.line
                    )));
                }
                at
            }
            None => {
                let tau_i = compute_tau(row.onset, opts.tau, d)?;
                let mut covariates = Vec::with_capacity(schema.len());
                encode_row(&encodings, &row.fields, &mut covariates);
                debug_assert_eq!(covariates.len(), n_entity);
                if let Some(cal) = &opts.calendar {
                    for k in 0..d {
                        let day = row.onset + k as i64;
                        let flags = cal.days.get(&day).ok_or_else(|| {
                            Error::Data(format!("line {}: calendar has no entry for day {day}", row.line))
                        })?;
                        covariates.extend_from_slice(flags);
                    }
                }
                let entity_id = if key_at.is_empty() {
                    format!("case{}", row.line)
                } else {
                    key_at.iter().map(|&c| row.fields[c].as_str()).collect::<Vec<_>>().join("|")
                };
                let record = ObservationRecord {
                    entity_id,
                    occ_period: row.onset,
                    covariates,
                    observed_counts: vec![0; tau_i],
                };
                if !key_at.is_empty() {
                    let key: Vec<String> = key_at.iter().map(|&c| row.fields[c].clone()).collect();
                    index.insert((key, row.onset), records.len());
                }
                records.push((record, row.line, row.fields.clone()));
                records.len() - 1
            }
        };
        if row.report > opts.tau {
            summary.censored += 1;
        } else {
            records[at].0.observed_counts[j - 1] += 1;
            summary.observed += 1;
        }
    }
    if records.is_empty() {
        return Err(Error::Data("no cases left after dropping".into()));
    }
    summary.records = records.len();
    let records = records.into_iter().map(|(r, _, _)| r).collect();
    Ok((Dataset::new(schema, records, d, opts.tau)?, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn epoch() -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 5, 1).unwrap()
    }

    fn table(rows: &[(i64, i64, &str)]) -> CaseTable {
        CaseTable {
            columns: vec!["region".into()],
            rows: rows
                .iter()
                .enumerate()
                .map(|(k, &(onset, report, region))| CaseRow {
                    line: k as u64 + 2,
                    onset,
                    report,
                    fields: vec![region.into()],
                })
                .collect(),
        }
    }

    fn opts(d: usize, tau: i64, keys: &[&str]) -> AggregateOptions {
        AggregateOptions { d, tau, entity_keys: keys.iter().map(|s| s.to_string()).collect(), calendar: None }
    }

    #[test]
    fn single_case_lands_in_its_delay_class() {
        let (data, summary) = aggregate_cases(&table(&[(5, 7, "a")]), &opts(22, 30, &[])).unwrap();
        assert_eq!(data.len(), 1);
        let mut expected = vec![0; 22];
        expected[2] = 1;
        assert_eq!(data.record(0).observed_counts, expected);
        assert_eq!(summary.observed, 1);
    }

    #[test]
    fn long_delays_are_dropped_and_counted() {
        let (data, summary) = aggregate_cases(&table(&[(1, 25, "a"), (1, 2, "a")]), &opts(22, 30, &[])).unwrap();
        assert_eq!(summary.dropped_delay, 1);
        assert_eq!(data.len(), 1);
    }

    #[test]
    fn late_reports_are_censored() {
        let (data, summary) = aggregate_cases(&table(&[(28, 32, "a")]), &opts(22, 30, &[])).unwrap();
        assert_eq!(summary.censored, 1);
        assert_eq!(data.record(0).tau_i(), 3);
        assert_eq!(data.record(0).observed_total(), 0);
    }

    #[test]
    fn report_before_onset_names_the_line() {
        let err = aggregate_cases(&table(&[(1, 2, "a"), (5, 4, "a")]), &opts(22, 30, &[])).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn grouped_mode_counts_per_key_and_onset() {
        let t = table(&[(1, 1, "a"), (1, 2, "a"), (1, 2, "b"), (2, 2, "a"), (1, 2, "a")]);
        let (data, summary) = aggregate_cases(&t, &opts(3, 10, &["region"])).unwrap();
        assert_eq!(summary.records, 3);
        assert_eq!(data.record(0).entity_id, "a");
        assert_eq!(data.record(0).observed_counts, vec![1, 2, 0]);
        assert_eq!(data.record(1).observed_counts, vec![0, 1, 0]);
        assert_eq!(data.schema().names(), ["region=a", "region=b"]);
        let total: u64 = data.records().iter().map(|r| r.observed_total()).sum();
        assert_eq!(total as usize + summary.censored, summary.input_rows - summary.dropped());
    }

    #[test]
    fn calendar_adds_period_features() {
        let cal = Calendar { flags: vec!["weekend".into()], days: (1..=10).map(|t| (t, vec![(t % 7 == 6) as u8 as f64])).collect() };
        let mut o = opts(3, 10, &[]);
        o.calendar = Some(cal);
        let (data, _) = aggregate_cases(&table(&[(5, 5, "a")]), &o).unwrap();
        assert_eq!(data.schema().index_of("ps2_weekend"), Some(2));
        assert_eq!(&data.record(0).covariates[1..], &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn dates_are_relative_to_the_epoch() {
        assert_eq!(parse_day("2020-05-01", epoch()), Some(1));
        assert_eq!(parse_day("2020-06-01", epoch()), Some(32));
        assert_eq!(parse_day("7", epoch()), Some(7));
        assert_eq!(parse_day("01/05/2020", epoch()), None);
    }

    #[test]
    fn run_config_rejects_unknown_keys_and_shared_paths() {
        let ok = r#"{"schema_version":1,"learner":{"kind":"glm"},"em":{"k":5}}"#;
        assert_eq!(RunConfig::from_json(ok).unwrap().em.k, 5);
        let typo = r#"{"schema_version":1,"learner":{"kind":"glm"},"emm":{}}"#;
        assert!(matches!(RunConfig::from_json(typo), Err(Error::Config(_))));
        let shared = r#"{"schema_version":1,"learner":{"kind":"glm"},"paths":{"model":"a","trace":"a"}}"#;
        assert!(matches!(RunConfig::from_json(shared), Err(Error::Config(_))));
        let version = r#"{"schema_version":2,"learner":{"kind":"glm"}}"#;
        assert!(matches!(RunConfig::from_json(version), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_csv_leaves_censored_cells_empty() {
        let schema = FeatureSchema::new(["x"]).unwrap();
        let recs = vec![
            ObservationRecord { entity_id: "a".into(), occ_period: 1, covariates: vec![0.5], observed_counts: vec![1, 2, 3] },
            ObservationRecord { entity_id: "b".into(), occ_period: 3, covariates: vec![-1e-300], observed_counts: vec![4] },
        ];
        let data = Dataset::new(schema, recs, 3, 3).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "b,3,1,4,,,-1e-300");
        assert!(!text.contains('\r'));
        let back = read_dataset_csv(buf.as_slice(), None).unwrap();
        assert_eq!(back.tau(), 3);
        assert_eq!(back.records(), data.records());
    }
}
