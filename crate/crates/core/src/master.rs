//! The master's per-iteration subproblem
//!
//! `argmin_x L_1(x) + h(x) + (rho/2)||x - x_t||^2 + <drift, x - x_t>`
//!
//! solved by accelerated proximal gradient, by a direct factorization in the
//! quadratic/unregularized case, or inexactly with a controlled residual.
//! Also hosts the advisory checks on `rho` used by the run drivers.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{LocalLoss, Regularizer};
use crate::prox::{prox, prox_gradient_map_with};
use crate::ParamVector;

pub const DEFAULT_INNER_TOL: f64 = 1e-10;
pub const DEFAULT_INNER_MAX_ITER: usize = 100_000;
/// Objective increases below this relative size are rounding noise and do
/// not trigger a momentum restart.
const RESTART_NOISE: f64 = 8.0 * f64::EPSILON;

/// One instance of the master subproblem.
#[derive(Debug, Clone, Copy)]
pub struct SubproblemSpec<'a> {
    pub local_loss: &'a LocalLoss,
    pub h: &'a Regularizer,
    pub rho: f64,
    pub x_t: &'a ParamVector,
    /// `(1/m) sum_j grad L_j(x^{t_j}) - grad L_1(x^{t_1})`.
    pub drift: &'a ParamVector,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub x_next: ParamVector,
    pub inner_iters: usize,
    pub residual: f64,
}

impl SubproblemSpec<'_> {
    fn validate(&self) -> Result<()> {
        let p = self.x_t.len();
        for v in [self.drift.len(), self.local_loss.dim()] {
            if v != p {
                return Err(Error::DimensionMismatch { expected: p, found: v });
            }
        }
        if !(self.inner_tol > 0.0) {
            return Err(Error::InvalidConfig("inner_tol must be positive".into()));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho must be finite and >= 0, got {}", self.rho)));
        }
        if !self.local_loss.is_convex() && self.rho < self.local_loss.lipschitz_bound() {
            return Err(Error::InvalidConfig(format!(
                "nonconvex master loss needs rho >= {} for a convex subproblem, got {}",
                self.local_loss.lipschitz_bound(),
                self.rho
            )));
        }
        Ok(())
    }

    pub fn smooth_gradient(&self, x: &ParamVector) -> ParamVector {
        self.local_loss.gradient(x) + self.drift + (x - self.x_t) * self.rho
    }

    /// Subproblem objective (including `h`).
    pub fn objective(&self, x: &ParamVector) -> f64 {
        let d = x - self.x_t;
        self.local_loss.value(x) + self.drift.dot(&d) + 0.5 * self.rho * d.norm_squared() + self.h.value(x)
    }

    /// Norm of the subproblem's own proximal-gradient map at `x`.
    pub fn residual(&self, x: &ParamVector) -> Result<f64> {
        Ok(prox_gradient_map_with(self.h, x, &self.smooth_gradient(x))?.norm)
    }

    fn with_drift<'b>(&self, drift: &'b ParamVector) -> SubproblemSpec<'b>
    where
        Self: 'b,
    {
        SubproblemSpec { drift, ..*self }
    }
}

/// Accelerated proximal gradient, fixed step `1/(L_1 + rho)`, momentum
/// restart whenever the objective goes up. Warm-started at `x_t`.
pub fn solve_subproblem(spec: &SubproblemSpec<'_>) -> Result<SubproblemSolution> {
    spec.validate()?;
    solve_from(spec, spec.x_t.clone())
}

fn solve_from(spec: &SubproblemSpec<'_>, start: ParamVector) -> Result<SubproblemSolution> {
    let lip = spec.local_loss.lipschitz_bound() + spec.rho;
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };

    let mut x = start;
    let mut fx = spec.objective(&x);
    let mut residual = spec.residual(&x)?;
    if residual <= spec.inner_tol {
        return Ok(SubproblemSolution {
            x_next: x,
            inner_iters: 0,
            residual,
        });
    }
    let mut best = (x.clone(), residual);
    let mut y = x.clone();
    let mut momentum = 1.0f64;
    let mut accelerating = false;

    for iter in 1..=spec.inner_max_iter {
        let gy = spec.smooth_gradient(&y);
        let candidate = prox(spec.h, &(&y - gy * step), step)?;
        let f_candidate = spec.objective(&candidate);
        if accelerating && f_candidate - fx > RESTART_NOISE * fx.abs().max(1.0) {
            // restart from the last accepted point with a plain step
            y = x.clone();
            momentum = 1.0;
            accelerating = false;
            continue;
        }
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next_momentum;
        y = &candidate + (&candidate - &x) * beta;
        accelerating = beta > 0.0;
        momentum = next_momentum;
        x = candidate;
        fx = f_candidate;

        residual = spec.residual(&x)?;
        if !residual.is_finite() {
            return Err(Error::NonFinite("subproblem iterate"));
        }
        if residual < best.1 {
            best = (x.clone(), residual);
        }
        if residual <= spec.inner_tol {
            return Ok(SubproblemSolution {
                x_next: x,
                inner_iters: iter,
                residual,
            });
        }
    }
    let (x_best, r_best) = best;
    if r_best <= 10.0 * spec.inner_tol {
        Ok(SubproblemSolution {
            x_next: x_best,
            inner_iters: spec.inner_max_iter,
            residual: r_best,
        })
    } else {
        Err(Error::NonConvergence {
            iterations: spec.inner_max_iter,
            residual: r_best,
            best: Box::new(x_best),
        })
    }
}

/// `x_t - H^{-1} gbar` through a Cholesky factorization.
///
/// Applies when `rho = 0`, `h = None` and `L_1` is quadratic with Hessian `H`.
pub fn solve_subproblem_closed_form(
    hessian: &DMatrix<f64>,
    gbar: &ParamVector,
    x_t: &ParamVector,
) -> Result<ParamVector> {
    let p = x_t.len();
    if hessian.shape() != (p, p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: hessian.nrows(),
        });
    }
    if gbar.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: gbar.len(),
        });
    }
    let asym = (hessian - hessian.transpose()).amax();
    if asym > 1e-12 * hessian.amax().max(1.0) {
        return Err(Error::Factorization("Hessian is not symmetric".into()));
    }
    let chol = hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization("Hessian is not positive definite".into()))?;
    Ok(x_t - chol.solve(gbar))
}

/// How subproblem errors are injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InexactMode {
    #[default]
    Off,
    InjectedNoise { seed: u64 },
}

/// Inexact solving with `||eps^t||^2 < c1 ||Delta^{(t-1)}||^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct InexactnessSpec {
    #[serde(default)]
    pub c1: f64,
    #[serde(default)]
    pub mode: InexactMode,
}

impl InexactnessSpec {
    pub fn is_active(&self) -> bool {
        matches!(self.mode, InexactMode::InjectedNoise { .. }) && self.c1 > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InexactStep {
    pub x: ParamVector,
    /// The residual `eps^t` the returned point satisfies.
    pub error: ParamVector,
}

/// Moves an exact solution to the point whose optimality residual is a random
/// `eps^t` with `||eps^t|| <= 0.99 sqrt(c1) prev_delta_norm`.
///
/// The returned `x` exactly minimizes the subproblem with its linear term
/// shifted by `-eps^t`, so `eps^t` lies in the subproblem's subdifferential at
/// `x`. Draws are deterministic in `(seed, t)`.
pub fn perturb_inexact(
    sub: &SubproblemSpec<'_>,
    x_exact: &ParamVector,
    spec: &InexactnessSpec,
    prev_delta_norm: f64,
    t: usize,
) -> Result<InexactStep> {
    let p = x_exact.len();
    let InexactMode::InjectedNoise { seed } = spec.mode else {
        return Ok(InexactStep {
            x: x_exact.clone(),
            error: ParamVector::zeros(p),
        });
    };
    let cap = 0.99 * spec.c1.max(0.0).sqrt() * prev_delta_norm;
    if !(cap > 0.0) {
        return Ok(InexactStep {
            x: x_exact.clone(),
            error: ParamVector::zeros(p),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    let scale = spec.c1.sqrt() * prev_delta_norm / (p as f64).sqrt();
    let mut error = ParamVector::from_fn(p, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    let norm = error.norm();
    if norm > cap {
        error *= cap / norm;
    }
    let shifted = sub.drift - &error;
    let solution = solve_from(&sub.with_drift(&shifted), x_exact.clone())?;
    Ok(InexactStep {
        x: solution.x_next,
        error,
    })
}

/// One inequality in an advisory report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl Condition {
    /// Encodes `lhs > rhs`.
    fn greater(name: &str, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            pass: lhs > rhs,
        }
    }

    /// Encodes `value < 0`.
    fn negative(name: &str, value: f64) -> Self {
        Self {
            name: name.to_string(),
            lhs: value,
            rhs: 0.0,
            pass: value < 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// gamma(rho) = rho + mu_h.
    pub gamma: f64,
    pub exact: Vec<Condition>,
    pub inexact: Vec<Condition>,
    pub pass: bool,
    pub inexact_pass: bool,
}

/// Advisory check that `rho` is large enough for the sublinear guarantee:
/// `gamma > 3L + 2L delta tau` and `rho > 2L tau / delta`, plus the
/// inexact-solve variants `gamma > 3L + 2L delta tau + 1` and
/// `rho > 2L tau / delta + c1`.
pub fn validate_rho(lipschitz: f64, tau: usize, mu_h: f64, rho: f64, delta: f64, c1: f64) -> Result<ValidationReport> {
    if !(delta > 0.0) {
        return Err(Error::InvalidConfig("delta must be positive".into()));
    }
    let l = lipschitz;
    let tau = tau as f64;
    let gamma = rho + mu_h;
    let exact = vec![
        Condition::greater("gamma > 3L + 2L*delta*tau", gamma, 3.0 * l + 2.0 * l * delta * tau),
        Condition::greater("rho > 2L*tau/delta", rho, 2.0 * l * tau / delta),
    ];
    let inexact = vec![
        Condition::greater("gamma > 3L + 2L*delta*tau + 1", gamma, 3.0 * l + 2.0 * l * delta * tau + 1.0),
        Condition::greater("rho > 2L*tau/delta + c1", rho, 2.0 * l * tau / delta + c1),
    ];
    Ok(ValidationReport {
        gamma,
        pass: exact.iter().all(|c| c.pass),
        inexact_pass: inexact.iter().all(|c| c.pass),
        exact,
        inexact,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRateReport {
    pub eta: f64,
    pub delta1: f64,
    pub exact: Vec<Condition>,
    pub inexact: Vec<Condition>,
    pub pass: bool,
    pub inexact_pass: bool,
}

/// Default `delta_1 = 2 (2L + rho + 1) / sigma^2`.
pub fn default_delta1(lipschitz: f64, rho: f64, sigma2: f64) -> f64 {
    2.0 * (2.0 * lipschitz + rho + 1.0) / sigma2
}

/// Advisory check of the linear-rate conditions for strongly convex losses.
///
/// With `D = (rho/2)(1+delta1) + delta1` and `eta = 1 + 1/D` evaluates
/// `delta1 > (2L+rho+1)/sigma^2` and the two rate inequalities (and their
/// inexact variants when `c1 > 0`).
pub fn validate_linear_rate_conditions(
    lipschitz: f64,
    sigma2: f64,
    tau: usize,
    rho: f64,
    delta: f64,
    delta1: Option<f64>,
    c1: f64,
) -> Result<LinearRateReport> {
    if !(sigma2 > 0.0) {
        return Err(Error::Inapplicable(
            "losses are not strongly convex (sigma^2 = 0)".into(),
        ));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidConfig("delta must be positive".into()));
    }
    let l = lipschitz;
    let delta1 = delta1.unwrap_or_else(|| default_delta1(l, rho, sigma2));
    let tau_f = tau as f64;
    let d = 0.5 * rho * (1.0 + delta1) + delta1;
    let eta = 1.0 + 1.0 / d;
    // (eta^tau - 1)/(eta - 1) summed directly to avoid cancellation.
    let geometric: f64 = (0..tau).map(|k| eta.powi(k as i32)).sum();
    let delay_coef = l / delta + 0.5 * delta1 * l * l * tau_f / d;

    let a = (delta1 * l + 0.5 * rho * (1.0 + delta1)) / d;
    let first = a + 1.5 * l - 0.5 * rho + l * delta * tau_f;
    let second = first - 0.5 * rho * eta + delay_coef * geometric;
    let exact = vec![
        Condition::greater("delta1 > (2L+rho+1)/sigma^2", delta1, (2.0 * l + rho + 1.0) / sigma2),
        Condition::negative("rate condition 1", first),
        Condition::negative("rate condition 2", second),
    ];

    let inexact = if c1 > 0.0 {
        let a_in = (delta1 * l + 0.5 * rho * (1.0 + delta1) + 0.5) / d;
        let first_in = a_in + 1.5 * l - 0.5 * (rho - 1.0) + l * delta * tau_f;
        let second_in = first_in - 0.5 * (rho - c1) * eta + delay_coef * geometric + c1 * eta / d;
        vec![
            exact[0].clone(),
            Condition::negative("inexact rate condition 1", first_in),
            Condition::negative("inexact rate condition 2", second_in),
        ]
    } else {
        Vec::new()
    };
    Ok(LinearRateReport {
        eta,
        delta1,
        pass: exact.iter().all(|c| c.pass),
        inexact_pass: !inexact.is_empty() && inexact.iter().all(|c| c.pass),
        exact,
        inexact,
    })
}
