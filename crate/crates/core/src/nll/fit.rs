//! Maximum-likelihood fit of a field directly from observed grids.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ofov_grad, ofov_loss, structured_nll_grad, FovMask, LossConfig, NllError, Result};
use crate::covfield::{clamp_log_variance, GaussianField};
use crate::grid::{Kernel, ScalarGrid};

/// NLL value, mean gradient, log-variance gradient and oFoV gradient of one observation.
type NllGradientParts = (f64, Vec<f64>, Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub lr: f64,
    pub steps: usize,
    /// Observations per step; `None` uses all of them every step.
    pub batch_size: Option<usize>,
    /// Drives minibatch selection.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            steps: 150,
            batch_size: None,
            seed: 0,
        }
    }
}

/// One row of the loss curve, evaluated before the step's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub nll: f64,
    pub ofov: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub field: GaussianField,
    pub curve: Vec<LossPoint>,
}

/// Gradient descent on `(mean, log_variance)` minimizing the average of
/// `structured_nll + ofov_loss` over the observations.
///
/// The mean starts at the per-cell average of supervised observations (zero
/// where a cell is never observed) and the log-variance at `log sigma_0^2`.
/// Mean steps are scaled by the current per-cell variance, the diagonal of
/// the Fisher metric, so the step size does not depend on the units of the
/// map. Log-variances are clamped after every update.
pub fn fit_field(
    observations: &[(ScalarGrid, FovMask)],
    kernel: &Kernel,
    loss: &LossConfig,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    loss.validate()?;
    if observations.len() < 2 {
        return Err(NllError::TooFewObservations(observations.len()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(NllError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let (first, _) = &observations[0];
    let (rows, cols, cell) = (first.rows(), first.cols(), first.cell_size());
    for (grid, mask) in observations {
        grid.ensure_shape(rows, cols)?;
        mask.ensure_shape(rows, cols)?;
    }
    let n = rows * cols;

    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (grid, mask) in observations {
        for ((s, c), (v, &inside)) in sums.iter_mut().zip(counts.iter_mut()).zip(grid.values().iter().zip(mask.cells())) {
            if inside {
                *s += v;
                *c += 1;
            }
        }
    }
    let mean0: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut mean = ScalarGrid::new(rows, cols, cell, mean0)?;
    let mut log_var = ScalarGrid::filled(rows, cols, cell, clamp_log_variance(loss.ofov_prior_variance.ln()))?;

    let mut order: Vec<usize> = (0..observations.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.unwrap_or(observations.len()).clamp(1, observations.len());
    let mut cursor = observations.len();
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let field = GaussianField::new(mean.clone(), log_var.clone(), kernel.clone())?;
        let picked: Vec<usize> = if batch == observations.len() {
            order.clone()
        } else {
            if cursor + batch > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch;
            order[cursor - batch..cursor].to_vec()
        };

        let per_obs: Vec<Result<(NllGradientParts, f64)>> = picked
            .par_iter()
            .map(|&idx| {
                let (target, mask) = &observations[idx];
                let grad = structured_nll_grad(&field, target, mask, loss).map_err(|e| NllError::FitStep {
                    step,
                    source: Box::new(e),
                })?;
                let ofov = ofov_loss(&field, mask, loss)?;
                let og = ofov_grad(&field, mask, loss)?;
                Ok(((grad.report.value, grad.mean.into_values(), grad.log_variance.into_values(), og), ofov))
            })
            .collect();
        let mut g_mean = vec![0.0; n];
        let mut g_logv = vec![0.0; n];
        let mut nll_sum = 0.0;
        let mut ofov_sum = 0.0;
        for outcome in per_obs {
            let ((value, gm, gl, og), ofov) = outcome?;
            nll_sum += value;
            ofov_sum += ofov;
            for i in 0..n {
                g_mean[i] += gm[i];
                g_logv[i] += gl[i] + og[i];
            }
        }
        let m = picked.len() as f64;
        let point = LossPoint {
            step,
            nll: nll_sum / m,
            ofov: ofov_sum / m,
        };
        if !(point.nll.is_finite() && point.ofov.is_finite()) {
            return Err(NllError::Divergence { step });
        }
        curve.push(point);

        let variance = field.variance();
        let new_mean: Vec<f64> = mean
            .values()
            .iter()
            .zip(&g_mean)
            .zip(&variance)
            .map(|((mu, g), v)| mu - cfg.lr * v * g / m)
            .collect();
        let new_logv: Vec<f64> = log_var
            .values()
            .iter()
            .zip(&g_logv)
            .map(|(s, g)| clamp_log_variance(s - cfg.lr * g / m))
            .collect();
        if new_mean.iter().chain(&new_logv).any(|v| !v.is_finite()) {
            return Err(NllError::Divergence { step });
        }
        mean = mean.with_values(new_mean)?;
        log_var = log_var.with_values(new_logv)?;
    }

    Ok(FitOutcome {
        field: GaussianField::new(mean, log_var, kernel.clone())?,
        curve,
    })
}
