//! Check records, CSV tables and the JSON-lines encoding of a run.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ConfigError;

/// One verification outcome. Diagnostic checks are reported but do not
/// decide the exit status.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub pass: bool,
    pub diagnostic: bool,
    pub excluded: usize,
    pub detail: Value,
}

impl CheckRecord {
    pub fn new(name: impl Into<String>, pass: bool, excluded: usize, detail: impl Serialize) -> Self {
        let detail = serde_json::to_value(detail).expect("report serializes");
        Self { name: name.into(), pass, diagnostic: false, excluded, detail }
    }

    pub fn diagnostic(mut self) -> Self {
        self.diagnostic = true;
        self
    }
}

/// A plot-ready table written under `--csv-out`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(name: impl Into<String>, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", self.name)))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()
    }
}

/// Shortest round-trip decimal form, so tables are byte-stable.
pub fn num(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Default)]
pub struct ExperimentOutput {
    pub checks: Vec<CheckRecord>,
    pub tables: Vec<CsvTable>,
}

impl ExperimentOutput {
    pub fn pass(&self) -> bool {
        self.checks.iter().filter(|c| !c.diagnostic).all(|c| c.pass)
    }

    pub fn failed(&self) -> usize {
        self.checks.iter().filter(|c| !c.diagnostic && !c.pass).count()
    }
}

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Runtime(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e}"),
            RunError::Runtime(e) => write!(f, "runtime fault: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<shiftcalc::Error> for RunError {
    fn from(e: shiftcalc::Error) -> Self {
        RunError::Runtime(e.to_string())
    }
}

/// Writes one line per check followed by the summary object. Everything
/// but `timestamp` and `wall_time_s` is a function of the config.
pub fn write_jsonl<W: Write>(
    out: &mut W,
    experiment: &str,
    config_hash: &str,
    output: &ExperimentOutput,
    timestamp: u64,
    wall_time_s: f64,
) -> std::io::Result<()> {
    for c in &output.checks {
        let line = json!({
            "record": "check",
            "experiment": experiment,
            "config_hash": config_hash,
            "check": c.name,
            "pass": c.pass,
            "diagnostic": c.diagnostic,
            "excluded": c.excluded,
            "detail": c.detail,
        });
        writeln!(out, "{line}")?;
    }
    let summary = json!({
        "record": "summary",
        "experiment": experiment,
        "config_hash": config_hash,
        "checks": output.checks.len(),
        "failed": output.failed(),
        "excluded": output.checks.iter().map(|c| c.excluded).sum::<usize>(),
        "pass": output.pass(),
        "timestamp": timestamp,
        "wall_time_s": wall_time_s,
    });
    writeln!(out, "{summary}")
}
