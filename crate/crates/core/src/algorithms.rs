//! Outer-loop drivers: EDANNI and the first-order parameter-server baseline.
//!
//! Both run the same arrival protocol (see [`crate::engine`]), so their
//! ledgers are comparable round for round. Only the master update differs:
//! EDANNI solves the proximal subproblem built on `L_1`, the baseline takes a
//! proximal gradient step on the averaged stale gradient.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{
    advance_clock, check_bounded_delay, draw_arrivals, iterate_hash, record_comm, update_delay_counters,
    ArrivalModel, CommLedger, EventLogWriter, EventRecord, WorkerState,
};
use crate::error::{Error, Result};
use crate::master::{
    perturb_inexact, solve_subproblem, validate_rho, InexactnessSpec, SubproblemSpec, ValidationReport,
    DEFAULT_INNER_MAX_ITER, DEFAULT_INNER_TOL,
};
use crate::problems::{average, LocalLoss, Problem};
use crate::prox::{prox, prox_gradient_map_with};
use crate::telemetry::TimeTable;
use crate::ParamVector;

/// Rounds between stale-gradient spot checks.
pub const STALE_CHECK_EVERY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Edanni,
    #[serde(alias = "ps")]
    ProxGradPs,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Edanni => "edanni",
            Algorithm::ProxGradPs => "prox_grad_ps",
        })
    }
}

/// Starting point `x^0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    /// `1/sqrt(p)` in every coordinate.
    UnitConstant,
    /// Gaussian direction scaled to unit norm, drawn from the run seed.
    RandomUnit,
    Explicit {
        values: Vec<f64>,
    },
}

impl Init {
    pub fn point(&self, p: usize, seed: u64) -> Result<ParamVector> {
        Ok(match self {
            Init::Zero => ParamVector::zeros(p),
            Init::Constant { value } => ParamVector::from_element(p, *value),
            Init::UnitConstant => ParamVector::from_element(p, 1.0 / (p as f64).sqrt()),
            Init::RandomUnit => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v = ParamVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
                let norm = v.norm();
                v / norm
            }
            Init::Explicit { values } => {
                if values.len() != p {
                    return Err(Error::DimensionMismatch {
                        expected: p,
                        found: values.len(),
                    });
                }
                ParamVector::from_column_slice(values)
            }
        })
    }
}

fn default_max_rounds() -> usize {
    1000
}
fn default_target() -> f64 {
    1e-8
}
fn default_inner_tol() -> f64 {
    DEFAULT_INNER_TOL
}
fn default_inner_max_iter() -> usize {
    DEFAULT_INNER_MAX_ITER
}
fn default_delta() -> f64 {
    1.0
}
fn default_arrival() -> ArrivalModel {
    ArrivalModel::synchronous()
}

/// Everything that defines one run besides the problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub algorithm: Algorithm,
    /// Proximal weight of the master subproblem.
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_arrival")]
    pub arrival: ArrivalModel,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Stop once the fresh proximal-gradient norm drops below this.
    #[serde(default = "default_target")]
    pub target_pg_norm: f64,
    /// Also stop once the objective is at or below this value.
    #[serde(default)]
    pub target_objective: Option<f64>,
    #[serde(default)]
    pub inexact: InexactnessSpec,
    /// Seed for `Init::RandomUnit`.
    #[serde(default)]
    pub seed: u64,
    /// Step weight `w` of the baseline, `x+ = Prox_{h/w}(x - g/w)`.
    /// Defaults to the global Lipschitz bound.
    #[serde(default)]
    pub ps_weight: Option<f64>,
    #[serde(default)]
    pub init: Init,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_inner_max_iter")]
    pub inner_max_iter: usize,
    /// Virtual seconds charged per master update.
    #[serde(default)]
    pub master_cost: f64,
    /// Analysis constant used for the advisory `rho` check.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub keep_iterates: bool,
    #[serde(default)]
    pub event_log: Option<PathBuf>,
    /// Evaluate gradients on the rayon pool. Results are identical either way.
    #[serde(default)]
    pub parallel: bool,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, rho: f64, arrival: ArrivalModel) -> Self {
        Self {
            name: String::new(),
            algorithm,
            rho,
            arrival,
            max_rounds: default_max_rounds(),
            target_pg_norm: default_target(),
            target_objective: None,
            inexact: InexactnessSpec::default(),
            seed: 0,
            ps_weight: None,
            init: Init::Zero,
            inner_tol: DEFAULT_INNER_TOL,
            inner_max_iter: DEFAULT_INNER_MAX_ITER,
            master_cost: 0.0,
            delta: default_delta(),
            keep_iterates: false,
            event_log: None,
            parallel: false,
        }
    }

    pub fn validate(&self, problem: &Problem) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.target_pg_norm > 0.0) {
            return bad("target_pg_norm must be positive".into());
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1".into());
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be finite and >= 0, got {}", self.rho));
        }
        if !(self.master_cost >= 0.0 && self.master_cost.is_finite()) {
            return bad("master_cost must be finite and >= 0".into());
        }
        if !(self.inexact.c1 >= 0.0) {
            return bad("inexact.c1 must be >= 0".into());
        }
        self.arrival.validate(problem.m())?;
        match self.algorithm {
            Algorithm::Edanni => {
                let l1 = problem.losses.get(0);
                if !l1.is_convex() && self.rho < l1.lipschitz_bound() {
                    return bad(format!(
                        "master loss is nonconvex: rho must be >= {} (its Lipschitz bound), got {}",
                        l1.lipschitz_bound(),
                        self.rho
                    ));
                }
            }
            Algorithm::ProxGradPs => {
                if self.inexact.is_active() {
                    return bad("inexact solving applies to the EDANNI subproblem only".into());
                }
                let w = self.ps_weight(problem);
                if !(w > 0.0 && w.is_finite()) {
                    return bad(format!("baseline step weight must be positive, got {w}"));
                }
            }
        }
        Ok(())
    }

    /// The baseline's `w`.
    pub fn ps_weight(&self, problem: &Problem) -> f64 {
        self.ps_weight.unwrap_or_else(|| problem.losses.lipschitz_bound())
    }

    /// The weight on `||x - x^t||^2 / 2` in `F`.
    pub fn proximal_weight(&self, problem: &Problem) -> f64 {
        match self.algorithm {
            Algorithm::Edanni => self.rho,
            Algorithm::ProxGradPs => self.ps_weight(problem),
        }
    }
}

/// Telemetry of round `t` (the step `x^t -> x^{t+1}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    /// `L(x^t)`.
    pub objective: f64,
    /// `F(x^{t+1}, x^t)`.
    pub f_value: f64,
    /// Fresh proximal-gradient norm at `x^t`.
    pub pg_norm: f64,
    /// `||x^{t+1} - x^t||`.
    pub delta_norm: f64,
    pub uploads: u64,
    pub downloads: u64,
    pub rounds: u64,
    /// Clock after the broadcast of `x^{t+1}`.
    pub virtual_time: f64,
    pub rho_valid: bool,
    pub arrivals: Vec<usize>,
    pub inner_iters: usize,
    /// `||eps^t||^2` of the injected subproblem error (0 when exact).
    pub injected_error_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Proximal-gradient norm below the target.
    Converged,
    TargetObjective,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub name: String,
    pub algorithm: Algorithm,
    pub records: Vec<IterationRecord>,
    /// `x^T`, the last iterate.
    pub x_final: ParamVector,
    pub final_objective: f64,
    pub final_pg_norm: f64,
    pub termination: Termination,
    pub ledger: CommLedger,
    pub time_table: TimeTable,
    /// `x^0, ..., x^T` when `keep_iterates` is set.
    pub iterates: Option<Vec<ParamVector>>,
    pub rho_report: ValidationReport,
    pub wall_time_secs: f64,
}

impl RunResult {
    /// Rounds executed.
    pub fn rounds(&self) -> usize {
        self.records.len()
    }

    /// `pg_norm` of `x^0, ..., x^T`.
    pub fn pg_series(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.records.iter().map(|r| r.pg_norm).collect();
        s.push(self.final_pg_norm);
        s
    }

    /// `L(x^0), ..., L(x^T)`.
    pub fn objective_series(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.records.iter().map(|r| r.objective).collect();
        s.push(self.final_objective);
        s
    }

    /// First `t` with `L(x^t) <= target`.
    pub fn rounds_to_objective(&self, target: f64) -> Option<usize> {
        self.objective_series().iter().position(|&v| v <= target)
    }

    pub fn converged(&self) -> bool {
        self.termination != Termination::MaxRounds
    }
}

/// `F(x, x^t) = (1/m) sum_j L_j(x) + (rho/2)||x - x^t||^2 + h(x)`.
pub fn evaluate_f(problem: &Problem, rho: f64, x_next: &ParamVector, x_t: &ParamVector) -> Result<f64> {
    if x_next.len() != x_t.len() {
        return Err(Error::DimensionMismatch {
            expected: x_t.len(),
            found: x_next.len(),
        });
    }
    Ok(problem.objective(x_next)? + 0.5 * rho * (x_next - x_t).norm_squared())
}

pub fn run(problem: &Problem, config: &RunConfig) -> Result<RunResult> {
    config.validate(problem)?;
    Driver::new(problem, config)?.run()
}

/// EDANNI. Requires `config.algorithm == Edanni`.
pub fn run_edanni(problem: &Problem, config: &RunConfig) -> Result<RunResult> {
    if config.algorithm != Algorithm::Edanni {
        return Err(Error::InvalidConfig(format!("run_edanni called with algorithm {}", config.algorithm)));
    }
    run(problem, config)
}

/// Parameter-server proximal gradient. Requires `config.algorithm == ProxGradPs`.
pub fn run_proxgrad_ps(problem: &Problem, config: &RunConfig) -> Result<RunResult> {
    if config.algorithm != Algorithm::ProxGradPs {
        return Err(Error::InvalidConfig(format!(
            "run_proxgrad_ps called with algorithm {}",
            config.algorithm
        )));
    }
    run(problem, config)
}

fn gradients(losses: &[LocalLoss], x: &ParamVector, parallel: bool) -> Vec<ParamVector> {
    if parallel {
        losses.par_iter().map(|l| l.gradient(x)).collect()
    } else {
        losses.iter().map(|l| l.gradient(x)).collect()
    }
}

struct Driver<'a> {
    problem: &'a Problem,
    config: &'a RunConfig,
    weight: f64,
    tau: usize,
    rho_report: ValidationReport,
}

impl<'a> Driver<'a> {
    fn new(problem: &'a Problem, config: &'a RunConfig) -> Result<Self> {
        let tau = config.arrival.effective_tau();
        let weight = config.proximal_weight(problem);
        let rho_report = validate_rho(
            problem.losses.lipschitz_bound(),
            tau,
            problem.regularizer.convex_modulus(),
            weight,
            config.delta,
            config.inexact.c1,
        )?;
        Ok(Self {
            problem,
            config,
            weight,
            tau,
            rho_report,
        })
    }

    fn run(self) -> Result<RunResult> {
        let started = Instant::now();
        let (problem, config) = (self.problem, self.config);
        let losses = problem.losses.losses();
        let h = &problem.regularizer;
        let m = problem.m();
        let costs = config.arrival.cost_model().costs(m - 1)?;
        let rho_valid = if config.inexact.is_active() {
            self.rho_report.inexact_pass
        } else {
            self.rho_report.pass
        };

        let mut x = config.init.point(problem.dim(), config.seed)?;
        let initial = gradients(&losses[1..], &x, config.parallel);
        let mut states: Vec<WorkerState> = initial
            .into_iter()
            .enumerate()
            .map(|(k, g)| WorkerState::new(k + 1, costs[k], &x, g))
            .collect();
        let mut ledger = CommLedger::default();
        let mut clock = 0.0;
        let mut log = match &config.event_log {
            Some(path) => Some(EventLogWriter::create(path)?),
            None => None,
        };
        let mut records = Vec::new();
        let mut iterates = config.keep_iterates.then(|| vec![x.clone()]);
        let mut prev_delta_norm: Option<f64> = None;
        let mut t = 0;

        let (termination, final_objective, final_pg_norm) = loop {
            let fresh = gradients(losses, &x, config.parallel);
            let pg_norm = prox_gradient_map_with(h, &x, &average(&fresh))?.norm;
            let objective = problem.objective(&x)?;
            if !pg_norm.is_finite() {
                return Err(Error::Round {
                    round: t,
                    source: Box::new(Error::NonFinite("proximal-gradient norm")),
                });
            }
            if pg_norm < config.target_pg_norm {
                break (Termination::Converged, objective, pg_norm);
            }
            if config.target_objective.is_some_and(|target| objective <= target) {
                break (Termination::TargetObjective, objective, pg_norm);
            }
            if t == config.max_rounds {
                break (Termination::MaxRounds, objective, pg_norm);
            }

            let arrivals = draw_arrivals(&config.arrival, &states, t, clock);
            update_delay_counters(&mut states, &arrivals, t);
            for s in states.iter_mut().filter(|s| arrivals.contains(s.id)) {
                s.cached_gradient = fresh[s.id].clone();
                s.anchor = x.clone();
            }
            check_bounded_delay(&states, t, self.tau)?;
            if t % STALE_CHECK_EVERY == 0 {
                check_stale_gradients(problem, &states, t)?;
            }

            let mut combined = Vec::with_capacity(m);
            combined.push(fresh[0].clone());
            combined.extend(states.iter().map(|s| s.cached_gradient.clone()));
            let gbar = average(&combined);

            let step = self
                .master_update(&x, &fresh[0], &gbar, prev_delta_norm, t)
                .map_err(|e| Error::Round {
                    round: t,
                    source: Box::new(e),
                })?;
            let x_next = step.x;
            let delta_norm = (&x_next - &x).norm();
            let f_value = evaluate_f(problem, self.weight, &x_next, &x)?;

            record_comm(&mut ledger, &arrivals.workers, &arrivals.workers);
            clock = advance_clock(&mut states, &arrivals, config.master_cost).clock;
            if let Some(log) = log.as_mut() {
                log.append(&EventRecord {
                    t: t as u64,
                    arrivals: arrivals.workers.iter().map(|&w| w as u32).collect(),
                    delays: states.iter().map(|s| s.delay_counter as u32).collect(),
                    x_hash: iterate_hash(&x),
                })?;
            }
            records.push(IterationRecord {
                t,
                objective,
                f_value,
                pg_norm,
                delta_norm,
                uploads: ledger.uploads,
                downloads: ledger.downloads,
                rounds: ledger.rounds,
                virtual_time: clock,
                rho_valid,
                arrivals: arrivals.workers,
                inner_iters: step.inner_iters,
                injected_error_sq: step.injected_error_sq,
            });
            log::debug!("t={t} obj={objective:.6e} pg={pg_norm:.3e} delta={delta_norm:.3e}");
            prev_delta_norm = Some(delta_norm);
            x = x_next;
            if let Some(it) = iterates.as_mut() {
                it.push(x.clone());
            }
            t += 1;
        };
        if let Some(log) = log {
            log.finish()?;
        }

        Ok(RunResult {
            name: config.name.clone(),
            algorithm: config.algorithm,
            records,
            x_final: x,
            final_objective,
            final_pg_norm,
            termination,
            ledger,
            time_table: TimeTable::from_workers(&states),
            iterates,
            rho_report: self.rho_report,
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    }

    fn master_update(
        &self,
        x: &ParamVector,
        master_gradient: &ParamVector,
        gbar: &ParamVector,
        prev_delta_norm: Option<f64>,
        t: usize,
    ) -> Result<MasterStep> {
        let config = self.config;
        let h = &self.problem.regularizer;
        match config.algorithm {
            Algorithm::ProxGradPs => {
                let w = self.weight;
                Ok(MasterStep {
                    x: prox(h, &(x - gbar / w), 1.0 / w)?,
                    inner_iters: 0,
                    injected_error_sq: 0.0,
                })
            }
            Algorithm::Edanni => {
                let drift = gbar - master_gradient;
                let spec = SubproblemSpec {
                    local_loss: self.problem.losses.get(0),
                    h,
                    rho: config.rho,
                    x_t: x,
                    drift: &drift,
                    inner_tol: config.inner_tol,
                    inner_max_iter: config.inner_max_iter,
                };
                let exact = solve_subproblem(&spec)?;
                let Some(prev) = prev_delta_norm.filter(|_| config.inexact.is_active()) else {
                    return Ok(MasterStep {
                        x: exact.x_next,
                        inner_iters: exact.inner_iters,
                        injected_error_sq: 0.0,
                    });
                };
                let step = perturb_inexact(&spec, &exact.x_next, &config.inexact, prev, t)?;
                let error_sq = step.error.norm_squared();
                let bound = config.inexact.c1 * prev * prev;
                if error_sq > 0.0 && !(error_sq < bound) {
                    return Err(Error::InexactBound {
                        t,
                        error_sq,
                        prev_delta_sq: prev * prev,
                    });
                }
                Ok(MasterStep {
                    x: step.x,
                    inner_iters: exact.inner_iters,
                    injected_error_sq: error_sq,
                })
            }
        }
    }
}

struct MasterStep {
    x: ParamVector,
    inner_iters: usize,
    injected_error_sq: f64,
}

/// Recomputes every cached gradient from its anchor iterate.
pub fn check_stale_gradients(problem: &Problem, states: &[WorkerState], t: usize) -> Result<()> {
    for s in states {
        if problem.losses.get(s.id).gradient(&s.anchor) != s.cached_gradient {
            return Err(Error::StaleGradient { t, worker: s.id });
        }
    }
    Ok(())
}

/// Outcome of the summed-descent check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    /// `min{gamma/2 - 3L/2 - L delta tau, rho/2 - L tau/delta}`.
    pub c: f64,
    /// False when `c <= 0`; no inequality is checked then.
    pub applicable: bool,
    /// Largest `F(x^{T+1},x^T) - F(x^1,x^0) + c sum_{t<=T} ||Delta^t||^2`
    /// over `T >= 1`.
    pub worst_margin: f64,
    pub summed_pass: bool,
    /// Every recorded `F` is at least `lower_bound` (up to the slack).
    pub lower_bound: f64,
    pub lower_bound_pass: bool,
    pub pass: bool,
}

pub const CERTIFICATE_SLACK: f64 = 1e-8;

/// Checks `F(x^{T+1},x^T) - F(x^1,x^0) <= -c sum_{t=0}^T ||Delta^t||^2` for
/// every `T >= 1` of a completed run, and that no `F` value falls below
/// `lower_bound` (default: the smallest recorded objective).
pub fn check_descent_certificates(
    records: &[IterationRecord],
    lipschitz: f64,
    tau: usize,
    rho: f64,
    mu_h: f64,
    delta: f64,
    lower_bound: Option<f64>,
) -> CertificateReport {
    let l = lipschitz;
    let tau = tau as f64;
    let gamma = rho + mu_h;
    let c = (0.5 * gamma - 1.5 * l - l * delta * tau).min(0.5 * rho - l * tau / delta);
    let lower = lower_bound.unwrap_or_else(|| records.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min));
    let lower_bound_pass = records.iter().all(|r| r.f_value >= lower - CERTIFICATE_SLACK);
    if !(c > 0.0) {
        return CertificateReport {
            c,
            applicable: false,
            worst_margin: f64::NAN,
            summed_pass: false,
            lower_bound: lower,
            lower_bound_pass,
            pass: false,
        };
    }
    let mut worst = f64::NEG_INFINITY;
    let mut sum_sq = 0.0;
    for (i, r) in records.iter().enumerate() {
        sum_sq += r.delta_norm * r.delta_norm;
        if i >= 1 {
            worst = worst.max(r.f_value - records[0].f_value + c * sum_sq);
        }
    }
    let summed_pass = records.len() >= 2 && worst <= CERTIFICATE_SLACK;
    CertificateReport {
        c,
        applicable: true,
        worst_margin: worst,
        summed_pass,
        lower_bound: lower,
        lower_bound_pass,
        pass: summed_pass && lower_bound_pass,
    }
}
