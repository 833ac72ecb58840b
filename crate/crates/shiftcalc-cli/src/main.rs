use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use shiftcalc_cli::config::ExperimentConfig;
use shiftcalc_cli::experiments::{run_experiment, CATALOG};
use shiftcalc_cli::report::{write_jsonl, RunError};

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "shiftcalc", version, about = "Runs the shiftcalc verification experiments", after_help = catalog_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment a config file names; JSON lines go to stdout.
    Run {
        /// TOML config (or JSON with a .json extension).
        config: PathBuf,
        /// Directory for plot-ready CSV tables.
        #[arg(long, value_name = "DIR")]
        csv_out: Option<PathBuf>,
        /// Worker threads for the replica loops; results do not depend on it.
        #[arg(long, value_name = "K", env = "SHIFTCALC_WORKERS")]
        workers: Option<usize>,
        /// Overrides `mc.seed`.
        #[arg(long, value_name = "S")]
        seed: Option<u64>,
    },
    /// List experiment ids with their topic tags.
    List,
}

fn catalog_help() -> String {
    let mut s = String::from("Experiments:\n");
    for e in &CATALOG {
        s.push_str(&format!("  {:<24} [{}] {}\n", e.id, e.tag, e.summary));
    }
    s.push_str("\nExit status: 0 all checks pass, 1 a check fails, 2 config error, 3 runtime fault.");
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            for e in &CATALOG {
                println!("{}\t[{}]\t{}", e.id, e.tag, e.summary);
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, csv_out, workers, seed } => run(config, csv_out, workers, seed),
    }
}

fn run(path: PathBuf, csv_out: Option<PathBuf>, workers: Option<usize>, seed: Option<u64>) -> ExitCode {
    let mut cfg = match ExperimentConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, &format!("config error: {e}")),
    };
    if let Some(s) = seed {
        cfg.mc.seed = s;
    }
    if workers == Some(0) {
        return fail(EXIT_CONFIG, "config error: --workers must be positive");
    }
    if let Some(dir) = &csv_out {
        if let Err(e) = std::fs::create_dir_all(dir) {
            return fail(EXIT_RUNTIME, &format!("runtime fault: {}: {e}", dir.display()));
        }
    }
    let hash = cfg.hash();
    let start = Instant::now();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => return fail(EXIT_RUNTIME, &format!("runtime fault: thread pool: {e}")),
    };
    let want_tables = csv_out.is_some();
    let result = pool.install(|| std::panic::catch_unwind(|| run_experiment(&cfg, want_tables)));
    let output = match result {
        Ok(Ok(o)) => o,
        Ok(Err(RunError::Config(e))) => return fail(EXIT_CONFIG, &format!("config error: {e}")),
        Ok(Err(e @ RunError::Runtime(_))) => return fail(EXIT_RUNTIME, &e.to_string()),
        Err(_) => return fail(EXIT_RUNTIME, "runtime fault: the experiment panicked"),
    };
    let wall = start.elapsed().as_secs_f64();
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    if let Err(e) = write_jsonl(&mut lock, &cfg.experiment, &hash, &output, timestamp, wall).and_then(|_| lock.flush()) {
        return fail(EXIT_RUNTIME, &format!("runtime fault: writing the report: {e}"));
    }
    if let Some(dir) = &csv_out {
        for t in &output.tables {
            if let Err(e) = t.write(dir) {
                return fail(EXIT_RUNTIME, &format!("runtime fault: writing {}.csv: {e}", t.name));
            }
        }
    }
    if output.pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    }
}

fn fail(code: u8, msg: &str) -> ExitCode {
    eprintln!("shiftcalc: {msg}");
    ExitCode::from(code)
}
