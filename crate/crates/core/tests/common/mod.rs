//! Reference oracles for integration tests.
//!
//! Everything here is written against raw matrices so it shares no code with
//! the library's solvers.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use edanni::problems::{LossKind, Problem, Regularizer};

pub fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// `(Q, c, k)` with `(1/m) sum_j L_j(x) = 1/2 x^T Q x - c^T x + k` for
/// quadratic-type losses.
pub fn averaged_quadratic(problem: &Problem) -> (DMatrix<f64>, DVector<f64>, f64) {
    let p = problem.dim();
    let m = problem.m() as f64;
    let mut q = DMatrix::zeros(p, p);
    let mut c = DVector::zeros(p);
    let mut k = 0.0;
    for loss in problem.losses.losses() {
        match loss.kind() {
            LossKind::LeastSquares { design, targets } => {
                let n = design.nrows() as f64;
                q += design.transpose() * design / n;
                c += design.transpose() * targets / n;
                k += targets.norm_squared() / (2.0 * n);
            }
            LossKind::Quadratic { hessian, linear } => {
                q += hessian;
                c += linear;
            }
            LossKind::NegativeQuadraticForm { gram } => {
                q -= gram * 2.0;
            }
        }
    }
    (q / m, c / m, k / m)
}

/// Long-run proximal gradient on the averaged quadratic plus `theta||x||_1`.
/// Stops after `max_iter` iterations or once the iterate is a fixed point.
pub fn reference_l1_solver(q: &DMatrix<f64>, c: &DVector<f64>, theta: f64, max_iter: usize) -> DVector<f64> {
    let step = 1.0 / q.clone().symmetric_eigenvalues().max();
    let mut x = DVector::zeros(c.len());
    for _ in 0..max_iter {
        let g = q * &x - c;
        let next = (&x - g * step).map(|v| soft(v, step * theta));
        let done = next == x;
        x = next;
        if done {
            break;
        }
    }
    x
}

/// Cyclic coordinate descent on `1/2 x^T Q x - c^T x + theta||x||_1`.
pub fn coordinate_descent(q: &DMatrix<f64>, c: &DVector<f64>, theta: f64, sweeps: usize) -> DVector<f64> {
    let p = c.len();
    let mut x: DVector<f64> = DVector::zeros(p);
    for _ in 0..sweeps {
        let mut change: f64 = 0.0;
        for i in 0..p {
            let mut r = c[i];
            for k in 0..p {
                if k != i {
                    r -= q[(i, k)] * x[k];
                }
            }
            let new: f64 = soft(r, theta) / q[(i, i)];
            change = change.max((new - x[i]).abs());
            x[i] = new;
        }
        if change == 0.0 {
            break;
        }
    }
    x
}

pub fn l1_objective(q: &DMatrix<f64>, c: &DVector<f64>, k: f64, theta: f64, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(q * x)) - c.dot(x) + k + theta * x.abs().sum()
}

/// `argmin theta||x||_1 + 1/2||x - z||^2` over `||x|| <= radius` by
/// Douglas-Rachford splitting between the l1 part and the ball.
pub fn l1_ball_prox_oracle(z: &DVector<f64>, theta: f64, radius: f64, iters: usize) -> DVector<f64> {
    // prox of gamma*(theta||.||_1 + 1/2||. - z||^2) at v, gamma = 1
    let prox_f = |v: &DVector<f64>| v.zip_map(z, |vi, zi| soft((vi + zi) / 2.0, theta / 2.0));
    let proj = |v: &DVector<f64>| {
        let n = v.norm();
        if n > radius {
            v * (radius / n)
        } else {
            v.clone()
        }
    };
    let mut y = z.clone();
    let mut x = proj(&y);
    for _ in 0..iters {
        x = proj(&y);
        let w = prox_f(&(&x * 2.0 - &y));
        y += &w - &x;
    }
    x
}

/// Composite objective of the ball-constrained prox problem (`inf` outside).
pub fn l1_ball_prox_objective(x: &DVector<f64>, z: &DVector<f64>, theta: f64, radius: f64) -> f64 {
    if x.norm() > radius * (1.0 + 1e-12) {
        return f64::INFINITY;
    }
    theta * x.abs().sum() + 0.5 * (x - z).norm_squared()
}

/// Central differences of `f` at `x`.
pub fn finite_difference_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut up = x.clone();
        let mut down = x.clone();
        up[i] += h;
        down[i] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    })
}

pub fn random_vector(rng: &mut ChaCha8Rng, p: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(p, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain least-squares fit of `log(gap)` against `t`; returns `(exp(-slope), r^2)`.
pub fn log_linear_fit(gaps: &[f64]) -> (f64, f64) {
    let n = gaps.len() as f64;
    let ys: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        sxy += (i as f64 - mx) * (y - my);
        sxx += (i as f64 - mx).powi(2);
        syy += (y - my).powi(2);
    }
    ((-sxy / sxx).exp(), sxy * sxy / (sxx * syy))
}

pub fn theta_of(problem: &Problem) -> f64 {
    match problem.regularizer {
        Regularizer::L1 { theta } | Regularizer::L1Ball { theta, .. } => theta,
        Regularizer::None => 0.0,
    }
}
