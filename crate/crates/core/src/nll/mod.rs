//! Structured negative log-likelihood for `N(mu, L D L^T)` fields.
//!
//! For a residual `r = target - mean` (zeroed outside the field-of-view mask)
//! the loss is evaluated without forming `Sigma`:
//!
//! ```text
//! a = Sigma^{-1} r            (conjugate gradient, Sigma applied by convolution)
//! b = sigma . (g^T * A)       (A = grid reshape of a)
//! L = 1/2 * ( sum_i b_i^2 + sum_{i in mask} log sigma_i^2 )
//! ```
//!
//! `sum_i b_i^2 = r^T Sigma^{-1} r`. The constants `2 log det L` and
//! `n log 2 pi` are dropped. Gradients reuse `a` and `b` from the same solve:
//! `dL/dmu_i = -a_i` and `dL/dlog sigma_i^2 = 1/2 (1 - b_i^2)` on mask cells.
//! Log-variances outside the mask receive no data gradient; they are steered
//! only by [`ofov_loss`].

mod fit;

pub use fit::{fit_field, FitConfig, FitOutcome, LossPoint};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covfield::{CovarianceOperator, FieldError, GaussianField};
use crate::grid::{convolve_into, GridError, ScalarGrid};
use crate::param::TerrainParam;
use crate::solver::{cg_solve, CgConfig, SolveReport, SolverError};

#[derive(Debug, Error)]
pub enum NllError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("mask shape {got:?} does not match field shape {expected:?}")]
    MaskShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("field-of-view mask has no supervised cells")]
    EmptyMask,
    #[error("target has a non-finite value at index {0}")]
    NonFiniteTarget(usize),
    #[error("conjugate gradient did not converge: relative residual {:.3e} after {} iterations", .0.final_relative_residual, .0.iterations)]
    NotConverged(Box<SolveReport>),
    #[error("no target and mask supplied for weighted parameter `{0}`")]
    MissingTarget(TerrainParam),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("fit needs at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("fit diverged at step {step}: loss became non-finite")]
    Divergence { step: usize },
    #[error("fit failed at step {step}: {source}")]
    FitStep {
        step: usize,
        #[source]
        source: Box<NllError>,
    },
}

pub type Result<T, E = NllError> = std::result::Result<T, E>;

/// Per-cell supervision indicator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FovMask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl FovMask {
    pub fn new(rows: usize, cols: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(NllError::MaskShape {
                expected: (rows, cols),
                got: (cells.len() / cols.max(1), cols),
            });
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                cells.push(f(i, j));
            }
        }
        Self { rows, cols, cells }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn out_of_view_count(&self) -> usize {
        self.cells.len() - self.count()
    }

    fn ensure_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if self.shape() != (rows, cols) {
            return Err(NllError::MaskShape {
                expected: (rows, cols),
                got: self.shape(),
            });
        }
        Ok(())
    }
}

/// Loss weights and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight per supervised parameter map; parameters absent here weigh 0.
    pub lambda_phi: BTreeMap<TerrainParam, f64>,
    pub lambda_traj: f64,
    /// Weight of the out-of-view variance regularizer.
    pub ofov_weight: f64,
    /// Prior variance out-of-view cells are pulled towards.
    pub ofov_prior_variance: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_phi: BTreeMap::from([(TerrainParam::Geom, 1.0), (TerrainParam::Height, 1.0)]),
            lambda_traj: 1.0,
            ofov_weight: 0.1,
            ofov_prior_variance: 1.0,
            cg_tol: 1e-8,
            cg_max_iter: 200,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some((p, w)) = self.lambda_phi.iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            return Err(NllError::Config(format!("lambda for `{p}` must be >= 0, got {w}")));
        }
        if !(self.lambda_traj >= 0.0 && self.lambda_traj.is_finite()) {
            return Err(NllError::Config(format!("lambda_traj must be >= 0, got {}", self.lambda_traj)));
        }
        if !(self.ofov_weight >= 0.0 && self.ofov_weight.is_finite()) {
            return Err(NllError::Config(format!("ofov_weight must be >= 0, got {}", self.ofov_weight)));
        }
        if !(self.ofov_prior_variance > 0.0 && self.ofov_prior_variance.is_finite()) {
            return Err(NllError::Config(format!(
                "ofov_prior_variance must be > 0, got {}",
                self.ofov_prior_variance
            )));
        }
        Ok(())
    }

    pub fn cg(&self) -> CgConfig {
        CgConfig {
            tol: self.cg_tol,
            max_iter: self.cg_max_iter,
        }
    }

    pub fn lambda(&self, param: TerrainParam) -> f64 {
        self.lambda_phi.get(&param).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllReport {
    pub value: f64,
    /// `Sigma^{-1} r`
    pub a: Vec<f64>,
    /// `D^{1/2} L^T a`
    pub b: Vec<f64>,
    pub cg_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllGradient {
    pub mean: ScalarGrid,
    pub log_variance: ScalarGrid,
    pub report: NllReport,
}

/// Masked residual `target - mean`, zero outside the mask.
pub fn masked_residual(field: &GaussianField, target: &ScalarGrid, mask: &FovMask) -> Result<Vec<f64>> {
    target.ensure_shape(field.rows(), field.cols())?;
    mask.ensure_shape(field.rows(), field.cols())?;
    if let Some(i) = target.values().iter().position(|v| !v.is_finite()) {
        return Err(NllError::NonFiniteTarget(i));
    }
    Ok(target
        .values()
        .iter()
        .zip(field.mean().values())
        .zip(mask.cells())
        .map(|((t, m), &inside)| if inside { t - m } else { 0.0 })
        .collect())
}

pub fn structured_nll(
    field: &GaussianField,
    target: &ScalarGrid,
    mask: &FovMask,
    cfg: &LossConfig,
) -> Result<NllReport> {
    let r = masked_residual(field, target, mask)?;
    if mask.count() == 0 {
        return Err(NllError::EmptyMask);
    }
    let mut op = CovarianceOperator::new(field);
    let solve = cg_solve(|x, out| op.apply(x, out), &r, cfg.cg())?;
    if !solve.converged {
        return Err(NllError::NotConverged(Box::new(solve)));
    }
    let a = solve.solution;
    let mut b = vec![0.0; a.len()];
    convolve_into(&a, field.rows(), field.cols(), field.kernel(), true, &mut b);
    for (bi, s) in b.iter_mut().zip(field.std_dev()) {
        *bi *= s;
    }
    let mahalanobis: f64 = b.iter().map(|v| v * v).sum();
    let log_det: f64 = field
        .log_variance()
        .values()
        .iter()
        .zip(mask.cells())
        .filter(|(_, &inside)| inside)
        .map(|(s, _)| s)
        .sum();
    Ok(NllReport {
        value: 0.5 * (mahalanobis + log_det),
        a,
        b,
        cg_iterations: solve.iterations,
    })
}

pub fn structured_nll_grad(
    field: &GaussianField,
    target: &ScalarGrid,
    mask: &FovMask,
    cfg: &LossConfig,
) -> Result<NllGradient> {
    let report = structured_nll(field, target, mask, cfg)?;
    let inside = mask.cells();
    let mean = report
        .a
        .iter()
        .zip(inside)
        .map(|(a, &m)| if m { -a } else { 0.0 })
        .collect();
    let log_variance = report
        .b
        .iter()
        .zip(inside)
        .map(|(b, &m)| if m { 0.5 * (1.0 - b * b) } else { 0.0 })
        .collect();
    Ok(NllGradient {
        mean: field.mean().with_values(mean)?,
        log_variance: field.mean().with_values(log_variance)?,
        report,
    })
}

/// `lambda * mean_{i outside mask} (sigma_i^2 - sigma_0^2)^2`; zero when every
/// cell is supervised.
pub fn ofov_loss(field: &GaussianField, mask: &FovMask, cfg: &LossConfig) -> Result<f64> {
    mask.ensure_shape(field.rows(), field.cols())?;
    let outside = mask.out_of_view_count();
    if outside == 0 {
        return Ok(0.0);
    }
    let sum: f64 = field
        .log_variance()
        .values()
        .iter()
        .zip(mask.cells())
        .filter(|(_, &inside)| !inside)
        .map(|(s, _)| (s.exp() - cfg.ofov_prior_variance).powi(2))
        .sum();
    Ok(cfg.ofov_weight * sum / outside as f64)
}

/// Gradient of [`ofov_loss`] with respect to the log-variance grid.
pub fn ofov_grad(field: &GaussianField, mask: &FovMask, cfg: &LossConfig) -> Result<Vec<f64>> {
    mask.ensure_shape(field.rows(), field.cols())?;
    let outside = mask.out_of_view_count();
    if outside == 0 {
        return Ok(vec![0.0; field.len()]);
    }
    let scale = 2.0 * cfg.ofov_weight / outside as f64;
    Ok(field
        .log_variance()
        .values()
        .iter()
        .zip(mask.cells())
        .map(|(s, &inside)| {
            if inside {
                0.0
            } else {
                let v = s.exp();
                scale * (v - cfg.ofov_prior_variance) * v
            }
        })
        .collect())
}

/// `sum_phi lambda_phi (nll_phi + ofov_phi) + lambda_traj * traj_term`.
///
/// Parameters with zero weight are skipped and need no target.
pub fn total_loss(
    fields: &BTreeMap<TerrainParam, GaussianField>,
    targets: &BTreeMap<TerrainParam, ScalarGrid>,
    masks: &BTreeMap<TerrainParam, FovMask>,
    traj_term: f64,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let mut total = 0.0;
    for (&param, field) in fields {
        let weight = cfg.lambda(param);
        if weight == 0.0 {
            continue;
        }
        let (Some(target), Some(mask)) = (targets.get(&param), masks.get(&param)) else {
            return Err(NllError::MissingTarget(param));
        };
        let nll = structured_nll(field, target, mask, cfg)?.value;
        total += weight * (nll + ofov_loss(field, mask, cfg)?);
    }
    Ok(total + cfg.lambda_traj * traj_term)
}
