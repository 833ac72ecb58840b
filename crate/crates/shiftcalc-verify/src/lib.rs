//! The twelve acceptance criteria, each a selection of check records from
//! one or two of the shipped configs plus a wall-clock budget.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use shiftcalc_cli::config::ExperimentConfig;
use shiftcalc_cli::experiments::run_experiment;
use shiftcalc_cli::report::{CheckRecord, ExperimentOutput, RunError};

pub struct Criterion {
    pub label: &'static str,
    /// Config stems under `configs/`; the budget covers all of them.
    pub configs: &'static [&'static str],
    pub budget_s: f64,
    /// Keeps only these model kinds, so the run (and its timing) covers
    /// what the criterion is about.
    pub models: Option<&'static [&'static str]>,
    pub select: fn(&CheckRecord) -> bool,
}

impl Criterion {
    /// Key of the run this criterion reads for `stem`.
    pub fn run_key(&self, stem: &'static str) -> RunKey {
        (stem, self.models)
    }
}

pub type RunKey = (&'static str, Option<&'static [&'static str]>);

fn all(_: &CheckRecord) -> bool {
    true
}

pub const CRITERIA: [Criterion; 12] = [
    Criterion { label: "Haar basis algebra", configs: &["basis-algebra"], budget_s: 10.0, models: None, select: |c| c.name.starts_with("basis algebra") },
    Criterion {
        label: "projection convergence",
        configs: &["basis-algebra"],
        budget_s: 30.0,
        models: None,
        select: |c| c.name.starts_with("projection convergence"),
    },
    Criterion { label: "Cameron-Martin quasi-invariance", configs: &["verify-cameron-martin"], budget_s: 60.0, models: None, select: all },
    Criterion { label: "gradient/divergence duality", configs: &["verify-duality"], budget_s: 60.0, models: None, select: all },
    Criterion {
        label: "pushforward density identity",
        configs: &["verify-pushforward"],
        budget_s: 300.0,
        models: None,
        select: |c| !c.name.starts_with("quadrature oracle"),
    },
    Criterion {
        label: "identity quadrature oracle",
        configs: &["verify-pushforward"],
        budget_s: 60.0,
        models: Some(&["identity"]),
        select: |c| c.name.starts_with("quadrature oracle"),
    },
    Criterion { label: "cocycle identity", configs: &["verify-cocycle"], budget_s: f64::INFINITY, models: None, select: |c| c.name.starts_with("cocycle") },
    Criterion {
        label: "flow homogeneity and jump orthogonality",
        configs: &["verify-cocycle"],
        budget_s: f64::INFINITY,
        models: None,
        select: |c| c.name.starts_with("flow"),
    },
    Criterion { label: "pairing identity and r*", configs: &["verify-pairing", "rstar"], budget_s: 240.0, models: None, select: all },
    Criterion { label: "mollified flow", configs: &["mollify-study"], budget_s: 180.0, models: None, select: all },
    Criterion { label: "particle density bounds", configs: &["mn-bounds"], budget_s: 60.0, models: None, select: all },
    Criterion { label: "compactness modulus", configs: &["particles-compactness"], budget_s: 180.0, models: None, select: all },
];

/// A finished run of one config.
pub struct Run {
    pub output: ExperimentOutput,
    pub wall_s: f64,
}

pub struct Outcome {
    pub label: &'static str,
    pub pass: bool,
    pub checks: usize,
    pub diagnostics: usize,
    pub failed: Vec<String>,
    pub wall_s: f64,
    pub budget_s: f64,
}

impl Outcome {
    pub fn over_budget(&self) -> bool {
        self.wall_s > self.budget_s
    }
}

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn run_config(dir: &Path, (stem, models): RunKey) -> Result<Run, RunError> {
    let mut cfg = ExperimentConfig::load(&dir.join(format!("{stem}.toml")))?;
    if let Some(kinds) = models {
        cfg.models.retain(|m| kinds.contains(&m.kind()));
    }
    let start = Instant::now();
    let output = run_experiment(&cfg, false)?;
    Ok(Run { output, wall_s: start.elapsed().as_secs_f64() })
}

/// Judges one criterion on already finished runs. A criterion with no
/// selected regular check is red.
pub fn judge(c: &Criterion, runs: &BTreeMap<RunKey, Run>) -> Outcome {
    let mut checks = 0;
    let mut diagnostics = 0;
    let mut failed = Vec::new();
    let mut wall_s = 0.0;
    for stem in c.configs {
        let run = &runs[&c.run_key(stem)];
        wall_s += run.wall_s;
        for r in run.output.checks.iter().filter(|r| (c.select)(r)) {
            if r.diagnostic {
                diagnostics += 1;
            } else {
                checks += 1;
                if !r.pass {
                    failed.push(r.name.clone());
                }
            }
        }
    }
    let mut out = Outcome { label: c.label, pass: false, checks, diagnostics, failed, wall_s, budget_s: c.budget_s };
    out.pass = checks > 0 && out.failed.is_empty() && !out.over_budget();
    out
}
