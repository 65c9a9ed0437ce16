//! Composite objectives `(1/m) sum_j L_j(x) + h(x)` and synthetic instance
//! generators (LASSO, sparse PCA, strongly convex quadratics).

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{power_iteration, symmetric_extremes, SparseFactor};
use crate::ParamVector;

/// Above this dimension Lipschitz bounds come from power iteration instead of
/// a dense eigendecomposition.
const DENSE_EIGEN_MAX_DIM: usize = 512;
const POWER_REL_TOL: f64 = 1e-8;
const POWER_MAX_ITER: usize = 10_000;
/// Relative slack on the ball constraint; projections land on the sphere only
/// up to rounding.
pub const BALL_SLACK: f64 = 1e-12;

/// Data defining one machine's smooth loss.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// `(1/2n) ||X w - y||^2` with `X` stored `n x p`.
    LeastSquares {
        design: DMatrix<f64>,
        targets: DVector<f64>,
    },
    /// `-w^T G w` where `G = (1/n) sum_i B_i B_i^T` (concave).
    NegativeQuadraticForm { gram: DMatrix<f64> },
    /// `1/2 x^T A x - b^T x`.
    Quadratic {
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
    },
}

/// One machine's smooth loss with its curvature constants.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLoss {
    kind: LossKind,
    dim: usize,
    lipschitz: f64,
    strong_convexity: f64,
    convex: bool,
}

impl LocalLoss {
    pub fn least_squares(design: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        let (n, p) = design.shape();
        if n == 0 || p == 0 {
            return Err(Error::spec("design", "must be non-empty"));
        }
        if targets.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: targets.len(),
            });
        }
        let inv_n = 1.0 / n as f64;
        let (lipschitz, strong_convexity) = if p <= DENSE_EIGEN_MAX_DIM {
            let gram = design.tr_mul(&design) * inv_n;
            let (min, max) = symmetric_extremes(&gram);
            (max.max(0.0), if n < p { 0.0 } else { min.max(0.0) })
        } else {
            let est = power_iteration(
                |v| design.tr_mul(&(&design * v)) * inv_n,
                p,
                POWER_REL_TOL,
                POWER_MAX_ITER,
            );
            let min = if n < p {
                0.0
            } else {
                let gram = design.tr_mul(&design) * inv_n;
                symmetric_extremes(&gram).0.max(0.0)
            };
            (est.eigenvalue.max(0.0), min)
        };
        Ok(Self {
            kind: LossKind::LeastSquares { design, targets },
            dim: p,
            lipschitz,
            strong_convexity,
            convex: true,
        })
    }

    pub fn negative_quadratic_form(gram: DMatrix<f64>) -> Result<Self> {
        let p = gram.nrows();
        if p == 0 || gram.ncols() != p {
            return Err(Error::spec("gram", "must be square and non-empty"));
        }
        let est = power_iteration(|v| &gram * v, p, POWER_REL_TOL, POWER_MAX_ITER);
        let lipschitz = 2.0 * est.eigenvalue.max(0.0);
        Ok(Self {
            kind: LossKind::NegativeQuadraticForm { gram },
            dim: p,
            lipschitz,
            strong_convexity: 0.0,
            convex: lipschitz == 0.0,
        })
    }

    pub fn quadratic(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        let p = hessian.nrows();
        if p == 0 || hessian.ncols() != p {
            return Err(Error::spec("hessian", "must be square and non-empty"));
        }
        if linear.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: linear.len(),
            });
        }
        let asym = (&hessian - hessian.transpose()).amax();
        if asym > 1e-12 * hessian.amax().max(1.0) {
            return Err(Error::spec("hessian", "must be symmetric"));
        }
        let (min, max) = symmetric_extremes(&hessian);
        Ok(Self {
            kind: LossKind::Quadratic { hessian, linear },
            dim: p,
            lipschitz: max.abs().max(min.abs()),
            strong_convexity: min.max(0.0),
            convex: min >= 0.0,
        })
    }

    pub fn kind(&self) -> &LossKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz
    }

    /// sigma^2 for this loss; zero when it is not provably strongly convex.
    pub fn strong_convexity_modulus(&self) -> f64 {
        self.strong_convexity
    }

    pub fn is_convex(&self) -> bool {
        self.convex
    }

    pub fn value(&self, x: &ParamVector) -> f64 {
        match &self.kind {
            LossKind::LeastSquares { design, targets } => {
                let r = design * x - targets;
                0.5 * r.norm_squared() / targets.len() as f64
            }
            LossKind::NegativeQuadraticForm { gram } => -x.dot(&(gram * x)),
            LossKind::Quadratic { hessian, linear } => 0.5 * x.dot(&(hessian * x)) - linear.dot(x),
        }
    }

    pub fn gradient(&self, x: &ParamVector) -> ParamVector {
        match &self.kind {
            LossKind::LeastSquares { design, targets } => {
                let r = design * x - targets;
                design.tr_mul(&r) / targets.len() as f64
            }
            LossKind::NegativeQuadraticForm { gram } => (gram * x) * -2.0,
            LossKind::Quadratic { hessian, linear } => hessian * x - linear,
        }
    }

    /// Every supported loss is quadratic, so the Hessian is constant.
    pub fn hessian(&self) -> DMatrix<f64> {
        match &self.kind {
            LossKind::LeastSquares { design, targets } => {
                design.tr_mul(design) / targets.len() as f64
            }
            LossKind::NegativeQuadraticForm { gram } => gram * -2.0,
            LossKind::Quadratic { hessian, .. } => hessian.clone(),
        }
    }
}

/// The `m` per-machine losses. Machine 0 is the master.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothLossSet {
    losses: Vec<LocalLoss>,
}

impl SmoothLossSet {
    pub fn new(losses: Vec<LocalLoss>) -> Result<Self> {
        let first = losses
            .first()
            .ok_or_else(|| Error::spec("losses", "at least one machine is required"))?;
        let p = first.dim();
        if let Some(bad) = losses.iter().find(|l| l.dim() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: bad.dim(),
            });
        }
        Ok(Self { losses })
    }

    pub fn m(&self) -> usize {
        self.losses.len()
    }

    pub fn dim(&self) -> usize {
        self.losses[0].dim()
    }

    pub fn losses(&self) -> &[LocalLoss] {
        &self.losses
    }

    pub fn get(&self, j: usize) -> &LocalLoss {
        &self.losses[j]
    }

    /// Global L: the largest per-machine Lipschitz constant.
    pub fn lipschitz_bound(&self) -> f64 {
        self.losses.iter().map(LocalLoss::lipschitz_bound).fold(0.0, f64::max)
    }

    /// Smallest per-machine sigma^2 (zero if any loss is not strongly convex).
    pub fn strong_convexity_modulus(&self) -> f64 {
        self.losses
            .iter()
            .map(LocalLoss::strong_convexity_modulus)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_convex(&self) -> bool {
        self.losses.iter().all(LocalLoss::is_convex)
    }

    pub fn average_value(&self, x: &ParamVector) -> f64 {
        self.losses.iter().map(|l| l.value(x)).sum::<f64>() / self.m() as f64
    }

    pub fn gradients(&self, x: &ParamVector) -> Vec<ParamVector> {
        self.losses.iter().map(|l| l.gradient(x)).collect()
    }

    pub fn average_gradient(&self, x: &ParamVector) -> ParamVector {
        average(&self.gradients(x))
    }

    pub(crate) fn check_dim(&self, x: &ParamVector) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(())
    }
}

/// Sum of the vectors (in order) divided by their count.
pub fn average(vectors: &[ParamVector]) -> ParamVector {
    let mut acc = DVector::zeros(vectors[0].len());
    for v in vectors {
        acc += v;
    }
    acc / vectors.len() as f64
}

/// The shared nonsmooth term `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    None,
    L1 { theta: f64 },
    /// `theta ||x||_1` plus the indicator of `||x||_2 <= radius`.
    L1Ball { theta: f64, radius: f64 },
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Regularizer::None => Ok(()),
            Regularizer::L1 { theta } => check_theta(theta),
            Regularizer::L1Ball { theta, radius } => {
                check_theta(theta)?;
                if !(radius > 0.0 && radius.is_finite()) {
                    return Err(Error::spec("radius", "must be positive and finite"));
                }
                Ok(())
            }
        }
    }

    pub fn theta(&self) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::L1 { theta } | Regularizer::L1Ball { theta, .. } => theta,
        }
    }

    /// mu_h. All supported regularizers are merely convex.
    pub fn convex_modulus(&self) -> f64 {
        0.0
    }

    /// `h(x)`; `+inf` outside the ball for `L1Ball` (with a rounding slack of
    /// `BALL_SLACK` relative).
    pub fn value(&self, x: &ParamVector) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::L1 { theta } => theta * x.lp_norm(1),
            Regularizer::L1Ball { theta, radius } => {
                if x.norm() > radius * (1.0 + BALL_SLACK) {
                    f64::INFINITY
                } else {
                    theta * x.lp_norm(1)
                }
            }
        }
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta >= 0.0 && theta.is_finite() {
        Ok(())
    } else {
        Err(Error::spec("theta", "must be finite and >= 0"))
    }
}

/// A composite problem: smooth losses plus regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub losses: SmoothLossSet,
    pub regularizer: Regularizer,
}

impl Problem {
    pub fn new(losses: SmoothLossSet, regularizer: Regularizer) -> Result<Self> {
        regularizer.validate()?;
        Ok(Self {
            losses,
            regularizer,
        })
    }

    pub fn dim(&self) -> usize {
        self.losses.dim()
    }

    pub fn m(&self) -> usize {
        self.losses.m()
    }

    pub fn objective(&self, x: &ParamVector) -> Result<f64> {
        objective(&self.losses, &self.regularizer, x)
    }
}

/// `(1/m) sum_j L_j(x) + h(x)`.
pub fn objective(losses: &SmoothLossSet, h: &Regularizer, x: &ParamVector) -> Result<f64> {
    losses.check_dim(x)?;
    let reg = h.value(x);
    if reg.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(losses.average_value(x) + reg)
}

// ---------------------------------------------------------------------------
// Generators

fn default_decay() -> f64 {
    0.5
}

fn default_noise_std() -> f64 {
    0.1
}

/// Synthetic LASSO: Gaussian rows with AR(1) covariance, sparse truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoGenSpec {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub theta: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    pub seed: u64,
    /// `Sigma_rt = decay^|r-t|`.
    #[serde(default = "default_decay")]
    pub covariance_decay: f64,
}

impl LassoGenSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m", self.m), ("n", self.n), ("p", self.p)] {
            if v == 0 {
                return Err(Error::spec(name, "must be positive"));
            }
        }
        if self.s > self.p {
            return Err(Error::spec(
                "s",
                format!("sparsity s={} exceeds dimension p={} (requires s <= p)", self.s, self.p),
            ));
        }
        check_theta(self.theta)?;
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::spec("noise_std", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.covariance_decay) {
            return Err(Error::spec("covariance_decay", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Draws one row with covariance `decay^|r-t|`.
///
/// The AR(1) recursion `x_k = a x_{k-1} + sqrt(1-a^2) z_k` is exactly the
/// lower Cholesky factor of that covariance applied to `z`, in O(p).
pub(crate) fn ar1_row(z: &[f64], decay: f64) -> Vec<f64> {
    let scale = (1.0 - decay * decay).sqrt();
    let mut out = Vec::with_capacity(z.len());
    let mut prev = 0.0;
    for (k, &zk) in z.iter().enumerate() {
        let v = if k == 0 { zk } else { decay * prev + scale * zk };
        out.push(v);
        prev = v;
    }
    out
}

/// LASSO instance: worker `j` holds `(X_j, y_j)` with `y = X w* + noise`.
pub fn generate_lasso(spec: &LassoGenSpec) -> Result<(Problem, ParamVector)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = DVector::from_fn(spec.p, |i, _| if i < spec.s { rng.random::<f64>() } else { 0.0 });

    let mut losses = Vec::with_capacity(spec.m);
    let mut z = vec![0.0; spec.p];
    for _ in 0..spec.m {
        let mut design = DMatrix::zeros(spec.n, spec.p);
        for i in 0..spec.n {
            for zk in z.iter_mut() {
                *zk = StandardNormal.sample(&mut rng);
            }
            for (k, v) in ar1_row(&z, spec.covariance_decay).into_iter().enumerate() {
                design[(i, k)] = v;
            }
        }
        let noise = DVector::from_fn(spec.n, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.noise_std * z
        });
        let targets = &design * &truth + noise;
        losses.push(LocalLoss::least_squares(design, targets)?);
    }
    let problem = Problem::new(
        SmoothLossSet::new(losses)?,
        Regularizer::L1 { theta: spec.theta },
    )?;
    Ok((problem, truth))
}

/// Synthetic sparse PCA with sparse random `B_ji` (`p x q`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpcaGenSpec {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub nnz: usize,
    pub theta: f64,
    pub seed: u64,
}

impl SpcaGenSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m", self.m), ("n", self.n), ("p", self.p), ("q", self.q)] {
            if v == 0 {
                return Err(Error::spec(name, "must be positive"));
            }
        }
        if self.nnz > self.p * self.q {
            return Err(Error::spec("nnz", "cannot exceed p*q"));
        }
        check_theta(self.theta)
    }
}

/// The raw factors `B_ji`, indexed `[machine][sample]`.
///
/// Positions are drawn uniformly without replacement, values standard normal.
pub fn generate_spca_factors(spec: &SpcaGenSpec) -> Result<Vec<Vec<SparseFactor>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells = spec.p * spec.q;
    let factors = (0..spec.m)
        .map(|_| {
            (0..spec.n)
                .map(|_| {
                    let mut positions = index::sample(&mut rng, cells, spec.nnz).into_vec();
                    positions.sort_unstable();
                    let entries = positions
                        .into_iter()
                        .map(|pos| {
                            let v: f64 = StandardNormal.sample(&mut rng);
                            (pos / spec.q, pos % spec.q, v)
                        })
                        .collect();
                    SparseFactor {
                        rows: spec.p,
                        cols: spec.q,
                        entries,
                    }
                })
                .collect()
        })
        .collect();
    Ok(factors)
}

/// Sparse PCA: `L_j(w) = -(1/n) sum_i w^T B_ji B_ji^T w`, `h = theta||w||_1 + [||w|| <= 1]`.
pub fn generate_spca(spec: &SpcaGenSpec) -> Result<Problem> {
    let factors = generate_spca_factors(spec)?;
    spca_from_factors(&factors, spec.p, spec.theta)
}

pub fn spca_from_factors(factors: &[Vec<SparseFactor>], p: usize, theta: f64) -> Result<Problem> {
    let losses = factors
        .iter()
        .map(|machine| {
            let mut gram = DMatrix::zeros(p, p);
            let scale = 1.0 / machine.len() as f64;
            for b in machine {
                b.accumulate_outer(&mut gram, scale);
            }
            LocalLoss::negative_quadratic_form(gram)
        })
        .collect::<Result<Vec<_>>>()?;
    Problem::new(
        SmoothLossSet::new(losses)?,
        Regularizer::L1Ball { theta, radius: 1.0 },
    )
}

/// Strongly convex quadratic test fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadGenSpec {
    pub m: usize,
    pub p: usize,
    pub sigma2: f64,
    pub seed: u64,
    #[serde(default = "no_regularizer")]
    pub regularizer: Regularizer,
}

fn no_regularizer() -> Regularizer {
    Regularizer::None
}

/// `L_j(x) = 1/2 x^T A_j x - b_j^T x` with `A_j = sigma2 I + G G^T / p`.
///
/// The reported modulus is the exact `lambda_min(A_j) >= sigma2`.
pub fn generate_strongly_convex_quadratic(
    m: usize,
    p: usize,
    sigma2: f64,
    seed: u64,
) -> Result<SmoothLossSet> {
    if m == 0 || p == 0 {
        return Err(Error::spec("m/p", "must be positive"));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::spec("sigma2", "must be positive and finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let losses = (0..m)
        .map(|_| {
            let g: DMatrix<f64> = DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng));
            let mut a = (&g * g.transpose()) / p as f64;
            a = (&a + a.transpose()) * 0.5;
            for i in 0..p {
                a[(i, i)] += sigma2;
            }
            let b = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
            LocalLoss::quadratic(a, b)
        })
        .collect::<Result<Vec<_>>>()?;
    SmoothLossSet::new(losses)
}

/// Any of the generators, as written in experiment specs and dataset sidecars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemSpec {
    Lasso(LassoGenSpec),
    Spca(SpcaGenSpec),
    Quad(QuadGenSpec),
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ProblemSpec::Lasso(s) => s.validate(),
            ProblemSpec::Spca(s) => s.validate(),
            ProblemSpec::Quad(s) => {
                if s.m == 0 || s.p == 0 {
                    return Err(Error::spec("m/p", "must be positive"));
                }
                if !(s.sigma2 > 0.0) {
                    return Err(Error::spec("sigma2", "must be positive"));
                }
                s.regularizer.validate()
            }
        }
    }

    pub fn generate(&self) -> Result<Problem> {
        match self {
            ProblemSpec::Lasso(s) => generate_lasso(s).map(|(p, _)| p),
            ProblemSpec::Spca(s) => generate_spca(s),
            ProblemSpec::Quad(s) => Problem::new(
                generate_strongly_convex_quadratic(s.m, s.p, s.sigma2, s.seed)?,
                s.regularizer,
            ),
        }
    }
}
