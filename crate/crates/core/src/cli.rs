//! `edanni generate|run|validate <spec>`.
//!
//! Experiment specs are TOML (or JSON when the file ends in `.json`). Every
//! command is a thin wrapper over a library function so tests can call the
//! same code paths directly.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{run, Algorithm, RunConfig, RunResult};
use crate::dataset::{read_dataset, write_dataset, DatasetFiles};
use crate::error::{Error, Result};
use crate::master::{validate_linear_rate_conditions, validate_rho};
use crate::problems::{Problem, ProblemSpec};
use crate::telemetry::{emit_csv, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUN_FAILURE: i32 = 1;
pub const EXIT_SPEC_ERROR: i32 = 2;
pub const LOG_ENV: &str = "EDANNI_LOG";

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A problem plus the runs to execute on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    /// Generate the problem inline.
    #[serde(default)]
    pub problem: Option<ProblemSpec>,
    /// Or load a dataset written by `generate`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub runs: Vec<RunConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: std::result::Result<Self, String> = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let mut spec = parsed.map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })?;
        if let Some(dataset) = spec.dataset.as_mut().filter(|d| d.is_relative()) {
            if let Some(parent) = path.parent() {
                *dataset = parent.join(&*dataset);
            }
        }
        spec.fill_run_names();
        Ok(spec)
    }

    fn fill_run_names(&mut self) {
        for (i, r) in self.runs.iter_mut().enumerate() {
            if r.name.is_empty() {
                r.name = format!("{}-{i}", r.algorithm);
            }
        }
    }

    /// Structural checks that need no problem data.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::spec("name", "must be non-empty"));
        }
        match (&self.problem, &self.dataset) {
            (Some(p), None) => p.validate()?,
            (None, Some(_)) => {}
            _ => return Err(Error::spec("problem", "exactly one of `problem` and `dataset` must be given")),
        }
        let mut seen = HashSet::new();
        for r in &self.runs {
            if !seen.insert(r.name.as_str()) {
                return Err(Error::spec("runs", format!("duplicate run name `{}`", r.name)));
            }
            if r.name.contains(['/', '\\']) {
                return Err(Error::spec("runs", format!("run name `{}` must not contain path separators", r.name)));
            }
        }
        Ok(())
    }

    pub fn load_problem(&self) -> Result<Problem> {
        match (&self.problem, &self.dataset) {
            (Some(spec), _) => spec.generate(),
            (None, Some(path)) => read_dataset(path).map(|(_, p)| p),
            (None, None) => Err(Error::spec("problem", "missing")),
        }
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(dir) = &overrides.output_dir {
            self.output_dir = dir.clone();
        }
        for r in &mut self.runs {
            if let Some(n) = overrides.max_rounds {
                r.max_rounds = n;
            }
            if let Some(eps) = overrides.target_eps {
                r.target_pg_norm = eps;
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args)]
pub struct Overrides {
    /// Directory for datasets, CSVs and manifests.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Override `max_rounds` of every run.
    #[arg(long)]
    pub max_rounds: Option<usize>,
    /// Override `target_pg_norm` of every run.
    #[arg(long)]
    pub target_eps: Option<f64>,
}

#[derive(Debug, Parser)]
#[command(name = "edanni", version, about = "Asynchronous distributed optimization simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the dataset container and sidecar for the spec's problem.
    Generate {
        spec: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Execute every run and write one CSV and manifest per run.
    Run {
        spec: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the advisory rho checks for every run.
    Validate {
        spec: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::from_path(path)?;
    spec.apply(overrides);
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_generate(spec: &ExperimentSpec) -> Result<DatasetFiles> {
    let problem = spec
        .problem
        .as_ref()
        .ok_or_else(|| Error::spec("problem", "generate needs an inline problem spec"))?;
    write_dataset(problem, &spec.output_dir, &spec.name).map(|(_, files)| files)
}

/// Outcome of one run inside `cmd_run`.
#[derive(Debug)]
pub struct RunOutcome {
    pub name: String,
    pub algorithm: Algorithm,
    pub tau: usize,
    pub result: Result<RunResult>,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub outcomes: Vec<RunOutcome>,
    pub summary: String,
}

impl ExperimentReport {
    pub fn failed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_err()).count()
    }
}

/// Runs every config (in parallel), writing `<run>.csv` and
/// `<run>.manifest.json` into the output directory. Individual failures are
/// reported in the outcome list; the remaining runs still execute.
pub fn cmd_run(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let problem = spec.load_problem()?;
    for r in &spec.runs {
        r.arrival.validate(problem.m())?;
    }
    fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;
    let outcomes: Vec<RunOutcome> = spec
        .runs
        .par_iter()
        .map(|config| {
            let mut config = config.clone();
            if let Some(log) = config.event_log.as_mut().filter(|p| p.is_relative()) {
                *log = spec.output_dir.join(&*log);
            }
            let result = run(&problem, &config).and_then(|result| {
                emit_csv(&result.records, &spec.output_dir.join(format!("{}.csv", config.name)))?;
                RunManifest::new(&config, &result).write(&spec.output_dir.join(format!("{}.manifest.json", config.name)))?;
                Ok(result)
            });
            if let Err(e) = &result {
                log::error!("run {} failed: {e}", config.name);
            }
            RunOutcome {
                name: config.name.clone(),
                algorithm: config.algorithm,
                tau: config.arrival.effective_tau(),
                result,
            }
        })
        .collect();
    let summary = summarize(&outcomes);
    Ok(ExperimentReport { outcomes, summary })
}

/// Rounds-to-target table normalized to the first converged EDANNI run, plus
/// the time table.
pub fn summarize(outcomes: &[RunOutcome]) -> String {
    let reference = outcomes.iter().find_map(|o| match &o.result {
        Ok(r) if o.algorithm == Algorithm::Edanni && r.converged() => Some(r.rounds().max(1) as f64),
        _ => None,
    });
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:<13} {:>4} {:>8} {:>10} {:>10} {:>10} {:>9} {:>11}",
        "run", "algorithm", "tau", "rounds", "reached", "uploads", "downloads", "ratio", "utilization"
    );
    for o in outcomes {
        match &o.result {
            Ok(r) => {
                let ratio = match reference {
                    Some(base) if r.converged() => format!("{:.3}", r.rounds() as f64 / base),
                    _ => "-".to_string(),
                };
                let _ = writeln!(
                    out,
                    "{:<24} {:<13} {:>4} {:>8} {:>10} {:>10} {:>10} {:>9} {:>11.4}",
                    o.name,
                    o.algorithm.to_string(),
                    o.tau,
                    r.rounds(),
                    if r.converged() { "yes" } else { "no" },
                    r.ledger.uploads,
                    r.ledger.downloads,
                    ratio,
                    r.time_table.mean_utilization(),
                );
            }
            Err(e) => {
                let _ = writeln!(out, "{:<24} {:<13} {:>4} FAILED: {e}", o.name, o.algorithm.to_string(), o.tau);
            }
        }
    }
    let _ = writeln!(out, "ratio = rounds to target / rounds of the first converged edanni run");
    out
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Advisory report of the rho conditions for every run.
pub fn cmd_validate(spec: &ExperimentSpec) -> Result<String> {
    let problem = spec.load_problem()?;
    let l = problem.losses.lipschitz_bound();
    let sigma2 = problem.losses.strong_convexity_modulus();
    let mu_h = problem.regularizer.convex_modulus();
    let mut out = String::new();
    let _ = writeln!(out, "problem: m={} p={} L={l:.6e} sigma2={sigma2:.6e}", problem.m(), problem.dim());
    for r in &spec.runs {
        let tau = r.arrival.effective_tau();
        let w = r.proximal_weight(&problem);
        let _ = writeln!(out, "run {} ({}, rho={w}, tau={tau}, delta={}):", r.name, r.algorithm, r.delta);
        let report = validate_rho(l, tau, mu_h, w, r.delta, r.inexact.c1)?;
        let _ = writeln!(out, "  sublinear rho conditions: {} (advisory)", verdict(report.pass));
        for c in &report.exact {
            let _ = writeln!(out, "    {}: {:.6e} vs {:.6e} {}", c.name, c.lhs, c.rhs, verdict(c.pass));
        }
        if r.inexact.c1 > 0.0 {
            let _ = writeln!(out, "  inexact rho conditions: {} (advisory)", verdict(report.inexact_pass));
            for c in &report.inexact {
                let _ = writeln!(out, "    {}: {:.6e} vs {:.6e} {}", c.name, c.lhs, c.rhs, verdict(c.pass));
            }
        }
        match validate_linear_rate_conditions(l, sigma2, tau, w, r.delta, None, r.inexact.c1) {
            Ok(lin) => {
                let _ = writeln!(
                    out,
                    "  linear-rate conditions: {} (advisory, eta={:.6}, delta1={:.4e})",
                    verdict(lin.pass),
                    lin.eta,
                    lin.delta1
                );
                for c in lin.exact.iter().chain(&lin.inexact) {
                    let _ = writeln!(out, "    {}: {:.6e} vs {:.6e} {}", c.name, c.lhs, c.rhs, verdict(c.pass));
                }
            }
            Err(Error::Inapplicable(why)) => {
                let _ = writeln!(out, "  linear-rate conditions: inapplicable ({why})");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

/// Parses `args` and executes the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_SPEC_ERROR } else { EXIT_OK };
        }
    };
    let (path, overrides) = match &cli.command {
        Command::Generate { spec, overrides } | Command::Run { spec, overrides } | Command::Validate { spec, overrides } => {
            (spec, overrides)
        }
    };
    let spec = match load(path, overrides) {
        Ok(spec) => spec,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_SPEC_ERROR;
        }
    };
    match cli.command {
        Command::Generate { .. } => match cmd_generate(&spec) {
            Ok(files) => {
                println!("wrote {} and {}", files.container.display(), files.sidecar.display());
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_SPEC_ERROR
            }
        },
        Command::Run { .. } => match cmd_run(&spec) {
            Ok(report) => {
                print!("{}", report.summary);
                if report.failed() > 0 {
                    eprintln!("{} of {} runs failed", report.failed(), report.outcomes.len());
                    EXIT_RUN_FAILURE
                } else {
                    EXIT_OK
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_SPEC_ERROR
            }
        },
        Command::Validate { .. } => match cmd_validate(&spec) {
            Ok(text) => {
                print!("{text}");
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_SPEC_ERROR
            }
        },
    }
}
