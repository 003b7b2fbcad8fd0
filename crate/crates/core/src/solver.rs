//! Matrix-free conjugate gradient for symmetric positive definite systems.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("conjugate gradient breakdown at iteration {iteration}: {reason}")]
    Breakdown { iteration: usize, reason: String },
    #[error("right-hand side contains non-finite values")]
    NonFiniteRhs,
    #[error("tolerance must lie in (0, 1), got {0}")]
    BadTolerance(f64),
    #[error("max_iter must be at least 1")]
    NoIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    /// Target for `||r_k|| / ||r_0||`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub final_relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` from a zero initial guess, touching `A` only through
/// `apply(x, out)` which must write `A x` into `out`.
///
/// Convergence is declared when the recursively updated residual satisfies
/// `||r_k|| <= tol * ||b||`. Hitting `max_iter` is not an error: the report
/// comes back with `converged == false`.
pub fn cg_solve<F>(mut apply: F, b: &[f64], cfg: CgConfig) -> Result<SolveReport, SolverError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if !(cfg.tol > 0.0 && cfg.tol < 1.0) {
        return Err(SolverError::BadTolerance(cfg.tol));
    }
    if cfg.max_iter == 0 {
        return Err(SolverError::NoIterations);
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteRhs);
    }
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(SolveReport {
            solution: x,
            iterations: 0,
            final_relative_residual: 0.0,
            converged: true,
        });
    }

    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let mut rel = 1.0;

    for iteration in 1..=cfg.max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(SolverError::Breakdown {
                iteration,
                reason: format!("curvature p^T A p = {pap}"),
            });
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_next = dot(&r, &r);
        if !rr_next.is_finite() {
            return Err(SolverError::Breakdown {
                iteration,
                reason: "non-finite residual".into(),
            });
        }
        rel = rr_next.sqrt() / b_norm;
        if rel <= cfg.tol {
            return Ok(SolveReport {
                solution: x,
                iterations: iteration,
                final_relative_residual: rel,
                converged: true,
            });
        }
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }

    Ok(SolveReport {
        solution: x,
        iterations: cfg.max_iter,
        final_relative_residual: rel,
        converged: false,
    })
}
