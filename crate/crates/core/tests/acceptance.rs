//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line; run with
//! `--nocapture` to see them all.

mod common;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use common::*;
use edanni::algorithms::{check_descent_certificates, run, Algorithm, Init, RunConfig, RunResult};
use edanni::engine::{read_event_log, replay_bounded_delay, ArrivalModel};
use edanni::master::{solve_subproblem, validate_linear_rate_conditions, InexactMode, InexactnessSpec, SubproblemSpec};
use edanni::problems::{
    average, generate_lasso, generate_spca, generate_strongly_convex_quadratic, LassoGenSpec, LossKind, Problem,
    Regularizer, SpcaGenSpec,
};
use edanni::prox::prox;
use edanni::telemetry::{emit_csv, f_series, fit_linear_rate, fit_sublinear_bound, read_csv, CsvRow};

const SEEDS: [u64; 3] = [1, 2, 3];
/// Proximal weight for the desk LASSO; smaller values diverge at n=50, p=40.
const DESK_LASSO_RHO: f64 = 1.0;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!("[{}] {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

fn desk_lasso(m: usize, seed: u64) -> Problem {
    generate_lasso(&LassoGenSpec {
        m,
        n: 50,
        p: 40,
        s: 4,
        theta: 0.01,
        noise_std: 0.1,
        seed,
        covariance_decay: 0.5,
    })
    .unwrap()
    .0
}

fn quadratic(m: usize, seed: u64) -> Problem {
    Problem::new(generate_strongly_convex_quadratic(m, 20, 1.0, seed).unwrap(), Regularizer::None).unwrap()
}

/// First half of the remote workers at 0.2, the rest at 0.5.
fn half_probs(remote: usize) -> Vec<f64> {
    (0..remote).map(|k| if k < remote / 2 { 0.2 } else { 0.5 }).collect()
}

fn lasso_f_star(problem: &Problem) -> f64 {
    let (q, c, k) = averaged_quadratic(problem);
    let theta = theta_of(problem);
    let x = reference_l1_solver(&q, &c, theta, 200_000);
    l1_objective(&q, &c, k, theta, &x)
}

fn quadratic_f_star(problem: &Problem) -> f64 {
    let (q, c, k) = averaged_quadratic(problem);
    let x = q.clone().lu().solve(&c).unwrap();
    0.5 * x.dot(&(&q * &x)) - c.dot(&x) + k
}

/// Smallest multiple of 0.25 passing the linear-rate conditions at `tau = 0`.
fn linear_rate_rho(problem: &Problem, c1: f64) -> f64 {
    let l = problem.losses.lipschitz_bound();
    let sigma2 = problem.losses.strong_convexity_modulus();
    let mut rho: f64 = 0.0;
    loop {
        let report = validate_linear_rate_conditions(l, sigma2, 0, rho, 1.0, None, c1).unwrap();
        if (c1 == 0.0 && report.pass) || (c1 > 0.0 && report.inexact_pass) {
            return rho;
        }
        rho += 0.25;
    }
}

fn rounds_to_gap(problem: &Problem, config: &RunConfig, f_star: f64) -> (RunResult, Option<usize>) {
    let mut config = config.clone();
    config.target_objective = Some(f_star + 1e-6);
    config.target_pg_norm = 1e-300;
    config.max_rounds = 5000;
    let result = run(problem, &config).unwrap();
    let rounds = result.rounds_to_objective(f_star + 1e-6);
    (result, rounds)
}

fn lasso_config(algorithm: Algorithm, remote: usize, seed: u64) -> RunConfig {
    let mut config = RunConfig::new(algorithm, DESK_LASSO_RHO, ArrivalModel::bernoulli(half_probs(remote), seed, 3));
    config.seed = seed;
    config
}

fn injected_within_bound(result: &RunResult, c1: f64) -> bool {
    result.records.windows(2).all(|w| {
        let bound = c1 * w[0].delta_norm * w[0].delta_norm;
        w[1].injected_error_sq == 0.0 || w[1].injected_error_sq < bound
    })
}

#[test]
fn criterion_01_newton_equivalence() {
    let started = Instant::now();
    let problem = quadratic(3, 7);
    let x0 = random_vector(&mut rng(70), 20, 1.0);
    let mut config = RunConfig::new(Algorithm::Edanni, 0.0, ArrivalModel::synchronous());
    config.init = Init::Explicit {
        values: x0.as_slice().to_vec(),
    };
    config.max_rounds = 1;
    config.target_pg_norm = 1e-300;
    config.keep_iterates = true;
    let result = run(&problem, &config).unwrap();
    let x1 = &result.iterates.as_ref().unwrap()[1];

    let mut h1 = DMatrix::zeros(20, 20);
    let mut gbar = DVector::zeros(20);
    for (j, loss) in problem.losses.losses().iter().enumerate() {
        let LossKind::Quadratic { hessian, linear } = loss.kind() else {
            unreachable!()
        };
        if j == 0 {
            h1 = hessian.clone();
        }
        gbar += (hessian * &x0 - linear) / 3.0;
    }
    let expected = &x0 - h1.lu().solve(&gbar).unwrap();
    let rel = (x1 - &expected).norm() / expected.norm();
    let elapsed = started.elapsed();
    report(
        1,
        "newton equivalence",
        rel <= 1e-9 && within(elapsed, 1),
        &format!("relative error {rel:.3e}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_02_synchronous_reduction() {
    let started = Instant::now();
    let problem = desk_lasso(4, 5);
    let rounds = 200;
    let mut config = RunConfig::new(Algorithm::Edanni, DESK_LASSO_RHO, ArrivalModel::bernoulli(vec![0.3; 3], 5, 0));
    config.max_rounds = rounds;
    config.target_pg_norm = 1e-300;
    config.keep_iterates = true;
    let result = run(&problem, &config).unwrap();
    let iterates = result.iterates.as_ref().unwrap();

    let mut x = DVector::zeros(40);
    let mut identical = iterates.len() == rounds + 1 && iterates[0] == x;
    for next_expected in iterates.iter().skip(1) {
        let grads: Vec<DVector<f64>> = problem.losses.losses().iter().map(|l| l.gradient(&x)).collect();
        let drift = average(&grads) - &grads[0];
        let spec = SubproblemSpec {
            local_loss: problem.losses.get(0),
            h: &problem.regularizer,
            rho: DESK_LASSO_RHO,
            x_t: &x,
            drift: &drift,
            inner_tol: config.inner_tol,
            inner_max_iter: config.inner_max_iter,
        };
        x = solve_subproblem(&spec).unwrap().x_next;
        identical &= &x == next_expected;
    }
    let elapsed = started.elapsed();
    report(
        2,
        "synchronous reduction",
        identical && within(elapsed, 5),
        &format!("{rounds} rounds bit-identical: {identical}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_03_bounded_delay() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let problem = desk_lasso(4, 11);
    let mut config = lasso_config(Algorithm::Edanni, 3, 11);
    config.max_rounds = 2000;
    config.target_pg_norm = 1e-300;
    config.event_log = Some(dir.path().join("events.edl"));
    let result = run(&problem, &config);
    let ran = result.as_ref().map(|r| r.rounds()).unwrap_or(0);
    let log = read_event_log(&dir.path().join("events.edl")).unwrap();
    let staleness = replay_bounded_delay(&log, 3, 3);
    let elapsed = started.elapsed();
    report(
        3,
        "bounded delay",
        ran == 2000 && log.len() == 2000 && matches!(staleness, Ok(s) if s <= 3) && within(elapsed, 10),
        &format!("{ran} rounds, replayed max staleness {staleness:?}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_04_desk_lasso_rounds() {
    let started = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let problem = desk_lasso(4, seed);
        let f_star = lasso_f_star(&problem);
        let (_, edanni) = rounds_to_gap(&problem, &lasso_config(Algorithm::Edanni, 3, seed), f_star);
        let (_, ps) = rounds_to_gap(&problem, &lasso_config(Algorithm::ProxGradPs, 3, seed), f_star);
        match (edanni, ps) {
            (Some(e), Some(p)) => {
                let ratio = p as f64 / e as f64;
                pass &= e < p && ratio >= 1.1;
                detail.push(format!("seed {seed}: {e} vs {p} (x{ratio:.2})"));
            }
            _ => {
                pass = false;
                detail.push(format!("seed {seed}: edanni {edanni:?} ps {ps:?}"));
            }
        }
    }
    let elapsed = started.elapsed();
    report(
        4,
        "desk lasso rounds",
        pass && within(elapsed, 30),
        &format!("{}, {elapsed:.2?}", detail.join("; ")),
    );
}

#[test]
fn criterion_05_linear_rate() {
    let started = Instant::now();
    let problem = quadratic(4, 21);
    let rho = linear_rate_rho(&problem, 0.0);
    let mut config = RunConfig::new(Algorithm::Edanni, rho, ArrivalModel::synchronous());
    config.max_rounds = 2000;
    config.target_pg_norm = 1e-12;
    let result = run(&problem, &config).unwrap();
    let fit = fit_linear_rate(&f_series(&result.records), quadratic_f_star(&problem), 1e-10).unwrap();
    let eta = fit.eta_hat.unwrap_or(f64::NAN);
    let elapsed = started.elapsed();
    report(
        5,
        "linear rate",
        eta > 1.0 && fit.r_squared >= 0.99 && within(elapsed, 10),
        &format!("rho {rho}, eta_hat {eta:.4}, r2 {:.5}, window {:?}, {elapsed:.2?}", fit.r_squared, fit.window),
    );
}

#[test]
fn criterion_06_sublinear_stationarity() {
    let started = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let problem = generate_spca(&SpcaGenSpec {
            m: 3,
            n: 5,
            p: 30,
            q: 60,
            nnz: 60,
            theta: 0.1,
            seed,
        })
        .unwrap();
        let rho = 2.0 * problem.losses.get(0).lipschitz_bound();
        let mut config = RunConfig::new(Algorithm::Edanni, rho, ArrivalModel::bernoulli(vec![0.2, 0.5], seed, 3));
        config.init = Init::UnitConstant;
        config.max_rounds = 50_000;
        config.target_pg_norm = 1e-10;
        let result = run(&problem, &config).unwrap();
        let pg = result.pg_series();
        let fit = fit_sublinear_bound(&pg, &[1e-1, 1e-3]);
        let t = |k: usize| fit.grid[k].first_below;
        let tail = result.records[result.rounds().saturating_sub(10)..]
            .iter()
            .map(|r| r.delta_norm)
            .fold(0.0, f64::max);
        let ok = match (t(0), t(1)) {
            (Some(a), Some(b)) => pg[0] >= 1e-1 && b as f64 * 1e-3 <= 10.0 * a as f64 * 1e-1,
            _ => false,
        };
        pass &= ok && result.converged() && tail < 1e-8;
        detail.push(format!(
            "seed {seed}: T(1e-1)={:?} T(1e-3)={:?} tail max {tail:.1e}",
            t(0),
            t(1)
        ));
    }
    let elapsed = started.elapsed();
    report(
        6,
        "sublinear stationarity",
        pass && within(elapsed, 60),
        &format!("{}, {elapsed:.2?}", detail.join("; ")),
    );
}

#[test]
fn criterion_07_inexact_mode() {
    let started = Instant::now();
    let c1 = 0.1;
    let inexact = |seed| InexactnessSpec {
        c1,
        mode: InexactMode::InjectedNoise { seed },
    };
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let problem = desk_lasso(4, seed);
        let mut config = lasso_config(Algorithm::Edanni, 3, seed);
        config.inexact = inexact(seed);
        let (result, rounds) = rounds_to_gap(&problem, &config, lasso_f_star(&problem));
        let bounded = injected_within_bound(&result, c1);
        let injected = result.records.iter().filter(|r| r.injected_error_sq > 0.0).count();
        pass &= rounds.is_some() && bounded && injected > 0;
        detail.push(format!("lasso seed {seed}: {rounds:?} rounds, {injected} injections"));
    }
    let problem = quadratic(4, 21);
    let rho = linear_rate_rho(&problem, c1);
    let mut config = RunConfig::new(Algorithm::Edanni, rho, ArrivalModel::synchronous());
    config.max_rounds = 2000;
    config.target_pg_norm = 1e-12;
    config.inexact = inexact(21);
    let result = run(&problem, &config).unwrap();
    let fit = fit_linear_rate(&f_series(&result.records), quadratic_f_star(&problem), 1e-10).unwrap();
    let eta = fit.eta_hat.unwrap_or(f64::NAN);
    pass &= eta > 1.0 && fit.r_squared >= 0.98 && injected_within_bound(&result, c1);
    detail.push(format!("quadratic rho {rho}: eta_hat {eta:.4} r2 {:.5}", fit.r_squared));
    let elapsed = started.elapsed();
    report(
        7,
        "inexact mode",
        pass && within(elapsed, 60),
        &format!("{}, {elapsed:.2?}", detail.join("; ")),
    );
}

#[test]
fn criterion_08_descent_certificate() {
    let problem = desk_lasso(4, 8);
    let l = problem.losses.lipschitz_bound();
    let mut config = RunConfig::new(Algorithm::Edanni, 4.0 * l, ArrivalModel::synchronous());
    config.max_rounds = 500;
    config.target_pg_norm = 1e-10;
    let result = run(&problem, &config).unwrap();
    let f_star = lasso_f_star(&problem);
    let cert = check_descent_certificates(&result.records, l, 0, 4.0 * l, 0.0, 1.0, Some(f_star));
    report(
        8,
        "descent certificate",
        cert.pass,
        &format!(
            "c {:.4}, worst margin {:.3e}, lower bound ok {}, {} rounds",
            cert.c,
            cert.worst_margin,
            cert.lower_bound_pass,
            result.rounds()
        ),
    );
}

#[test]
fn criterion_09_utilization() {
    let started = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let problem = desk_lasso(10, seed);
        let rho = problem.losses.lipschitz_bound();
        let utilization = |tau| {
            let mut config = RunConfig::new(Algorithm::Edanni, rho, ArrivalModel::speed_driven(seed, tau));
            config.max_rounds = 300;
            config.target_pg_norm = 1e-300;
            run(&problem, &config).unwrap().time_table.mean_utilization()
        };
        let (u0, u3) = (utilization(0), utilization(3));
        pass &= u3 - u0 >= 0.05;
        detail.push(format!("seed {seed}: {:.1}% -> {:.1}%", 100.0 * u0, 100.0 * u3));
    }
    let elapsed = started.elapsed();
    report(
        9,
        "utilization vs tau",
        pass && within(elapsed, 30),
        &format!("{}, {elapsed:.2?}", detail.join("; ")),
    );
}

#[test]
fn criterion_10_property_suites() {
    let mut r = rng(10);
    let mut prox_worst: f64 = 0.0;
    for _ in 0..100 {
        let p = 2 + (r.random_range(0..30) as usize);
        let theta = r.random_range(0.0..1.0);
        let radius = r.random_range(0.1..2.0);
        let z = random_vector(&mut r, p, 3.0);
        let h = Regularizer::L1Ball { theta, radius };
        let x = prox(&h, &z, 1.0).unwrap();
        let oracle = l1_ball_prox_oracle(&z, theta, radius, 5000);
        prox_worst = prox_worst.max((&x - &oracle).norm());
    }
    let prox_ok = prox_worst <= 1e-6;

    let mut nonexpansive = true;
    let regs = [
        Regularizer::L1 { theta: 0.3 },
        Regularizer::L1Ball { theta: 0.2, radius: 1.0 },
        Regularizer::None,
    ];
    for k in 0..1000 {
        let h = &regs[k % regs.len()];
        let scale = r.random_range(0.01..5.0);
        let z1 = random_vector(&mut r, 15, 4.0);
        let z2 = random_vector(&mut r, 15, 4.0);
        let d = (prox(h, &z1, scale).unwrap() - prox(h, &z2, scale).unwrap()).norm();
        nonexpansive &= d <= (&z1 - &z2).norm() * (1.0 + 1e-12);
    }

    let problems = [
        desk_lasso(3, 4),
        quadratic(3, 4),
        generate_spca(&SpcaGenSpec {
            m: 3,
            n: 5,
            p: 30,
            q: 60,
            nnz: 60,
            theta: 0.1,
            seed: 4,
        })
        .unwrap(),
    ];
    let mut fd_worst: f64 = 0.0;
    for problem in &problems {
        for loss in problem.losses.losses() {
            let x = random_vector(&mut r, problem.dim(), 1.0);
            let fd = finite_difference_gradient(|v| loss.value(v), &x, 1e-5);
            let g = loss.gradient(&x);
            fd_worst = fd_worst.max((&g - &fd).norm() / g.norm().max(1e-12));
        }
    }
    let fd_ok = fd_worst <= 1e-4;

    let dir = tempfile::tempdir().unwrap();
    let problem = desk_lasso(4, 6);
    let mut config = lasso_config(Algorithm::Edanni, 3, 6);
    config.max_rounds = 40;
    let result = run(&problem, &config).unwrap();
    let path = dir.path().join("run.csv");
    emit_csv(&result.records, &path).unwrap();
    let expected: Vec<CsvRow> = result.records.iter().map(CsvRow::from).collect();
    let csv_ok = read_csv(&path).unwrap() == expected;

    report(
        10,
        "property suites",
        prox_ok && nonexpansive && fd_ok && csv_ok,
        &format!(
            "prox oracle worst {prox_worst:.1e}, nonexpansive {nonexpansive}, fd worst {fd_worst:.1e}, csv lossless {csv_ok}"
        ),
    );
}
