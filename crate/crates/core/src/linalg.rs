//! Small dense/sparse linear-algebra helpers shared by the problem generators.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Outcome of a power iteration run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest eigenvalue of a symmetric positive semidefinite operator.
///
/// Iterates until two successive Rayleigh quotients agree to `rel_tol`
/// (relative) or `max_iter` is reached. The start vector is a fixed-seed
/// Gaussian draw so results are reproducible.
pub fn power_iteration<F>(apply: F, dim: usize, rel_tol: f64, max_iter: usize) -> PowerIteration
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if dim == 0 {
        return PowerIteration {
            eigenvalue: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x0005_eed0_f9e1);
    let mut v = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
    v /= v.norm();

    let mut lambda = 0.0;
    for k in 1..=max_iter {
        let w = apply(&v);
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return PowerIteration {
                eigenvalue: 0.0,
                iterations: k,
                converged: true,
            };
        }
        v = w / norm;
        if k > 1 && (next - lambda).abs() <= rel_tol * next.abs() {
            return PowerIteration {
                eigenvalue: next.max(lambda),
                iterations: k,
                converged: true,
            };
        }
        lambda = next;
    }
    PowerIteration {
        eigenvalue: lambda,
        iterations: max_iter,
        converged: false,
    }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn symmetric_extremes(matrix: &DMatrix<f64>) -> (f64, f64) {
    if matrix.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = matrix.clone().symmetric_eigenvalues();
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// A sparse `rows x cols` matrix stored as coordinate triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseFactor {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseFactor {
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            out[(r, c)] += v;
        }
        out
    }

    /// Adds `scale * B B^T` into `acc` (which must be `rows x rows`).
    ///
    /// Works column by column, so the cost is the sum of squared column
    /// occupancies rather than `rows^2 * cols`.
    pub fn accumulate_outer(&self, acc: &mut DMatrix<f64>, scale: f64) {
        let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.cols];
        for &(r, c, v) in &self.entries {
            by_col[c].push((r, v));
        }
        for col in &by_col {
            for &(r1, v1) in col {
                for &(r2, v2) in col {
                    acc[(r1, r2)] += scale * v1 * v2;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_matches_dense_eigen() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: DMatrix<f64> = DMatrix::from_fn(12, 8, |_, _| StandardNormal.sample(&mut rng));
        let a: DMatrix<f64> = &g * g.transpose();
        let (_, max) = symmetric_extremes(&a);
        let est = power_iteration(|v| &a * v, 12, 1e-12, 10_000);
        assert!(est.converged);
        assert!((est.eigenvalue - max).abs() <= 1e-8 * max, "{} vs {max}", est.eigenvalue);
    }

    #[test]
    fn power_iteration_zero_operator() {
        let est = power_iteration(|v| v * 0.0, 5, 1e-8, 50);
        assert_eq!(est.eigenvalue, 0.0);
    }

    #[test]
    fn sparse_outer_matches_dense() {
        let f = SparseFactor {
            rows: 3,
            cols: 2,
            entries: vec![(0, 0, 1.0), (2, 0, -2.0), (1, 1, 0.5), (2, 1, 3.0)],
        };
        let mut acc = DMatrix::zeros(3, 3);
        f.accumulate_outer(&mut acc, 0.5);
        let d = f.to_dense();
        let expected = (&d * d.transpose()) * 0.5;
        assert!((acc - expected).norm() < 1e-15);
    }
}
