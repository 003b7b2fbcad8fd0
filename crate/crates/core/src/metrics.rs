//! Accuracy and calibration scores for trajectory forecasts.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::forecast::TrajectoryDistribution;

/// Samples considered by [`best_ate`].
pub const BEST_ATE_SAMPLES: usize = 10;

pub const DEFAULT_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("horizon mismatch: {expected} vs {got}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("trajectories must have at least one step")]
    EmptyTrajectory,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("coverage levels must be a nonempty subset of (0, 1)")]
    BadLevels,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn check_horizon(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(MetricError::EmptyTrajectory);
    }
    if a != b {
        return Err(MetricError::HorizonMismatch { expected: b, got: a });
    }
    Ok(())
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean Euclidean position error over the horizon, without alignment.
pub fn ate(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    check_horizon(pred.len(), gt.len())?;
    Ok(pred.iter().zip(gt).map(|(p, g)| dist3(p, g)).sum::<f64>() / gt.len() as f64)
}

/// Smallest [`ate`] among the first [`BEST_ATE_SAMPLES`] samples.
pub fn best_ate(samples: &[Vec<[f64; 3]>], gt: &[[f64; 3]]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MetricError::TooFewSamples { needed: 1, got: 0 });
    }
    samples
        .iter()
        .take(BEST_ATE_SAMPLES)
        .map(|s| ate(s, gt))
        .try_fold(f64::INFINITY, |best, a| a.map(|a| best.min(a)))
}

fn flat_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |d| (p[d] - q[d]).powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Sample energy score of trajectories flattened to `R^{3T}`:
/// `mean_m ||X_m - y|| - 1/(2 M^2) sum_{m, m'} ||X_m - X_m'||`.
pub fn energy_score(samples: &[Vec<[f64; 3]>], gt: &[[f64; 3]]) -> Result<f64> {
    let m = samples.len();
    if m < 2 {
        return Err(MetricError::TooFewSamples { needed: 2, got: m });
    }
    for s in samples {
        check_horizon(s.len(), gt.len())?;
    }
    let fit = samples.iter().map(|s| flat_distance(s, gt)).sum::<f64>() / m as f64;
    let mut spread = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            spread += flat_distance(&samples[i], &samples[j]);
        }
    }
    // Each unordered pair appears twice in the double sum.
    Ok(fit - spread / (m * m) as f64)
}

/// Mean over `levels` of the gap between nominal coverage `alpha` and the
/// fraction of `(t, d)` cells whose ground truth lies in the central interval
/// `mu +- z_{(1 + alpha) / 2} sigma`.
pub fn ecpe(dist: &TrajectoryDistribution, gt: &[[f64; 3]], levels: &[f64]) -> Result<f64> {
    check_horizon(gt.len(), dist.horizon)?;
    if levels.is_empty() || levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(MetricError::BadLevels);
    }
    let normal = Normal::standard();
    let cells = (3 * gt.len()) as f64;
    let mut total = 0.0;
    for &alpha in levels {
        let z = normal.inverse_cdf(0.5 * (1.0 + alpha));
        let mut covered = 0usize;
        for ((g, mu), var) in gt.iter().zip(&dist.mean).zip(&dist.variance) {
            for d in 0..3 {
                if (g[d] - mu[d]).abs() <= z * var[d].sqrt() {
                    covered += 1;
                }
            }
        }
        total += (covered as f64 / cells - alpha).abs();
    }
    Ok(total / levels.len() as f64)
}

/// Scores of one forecast against its ground truth. The sample-based scores
/// are absent for deterministic predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ate: f64,
    pub best_ate: Option<f64>,
    pub energy_score: Option<f64>,
    pub ecpe: Option<f64>,
    pub n_samples: usize,
    pub horizon: usize,
}

impl MetricReport {
    pub fn deterministic(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Self> {
        Ok(Self {
            ate: ate(pred, gt)?,
            best_ate: None,
            energy_score: None,
            ecpe: None,
            n_samples: 1,
            horizon: gt.len(),
        })
    }

    /// ATE is taken on the forecast mean.
    pub fn probabilistic(dist: &TrajectoryDistribution, gt: &[[f64; 3]], levels: &[f64]) -> Result<Self> {
        Ok(Self {
            ate: ate(&dist.mean, gt)?,
            best_ate: Some(best_ate(&dist.samples, gt)?),
            energy_score: Some(energy_score(&dist.samples, gt)?),
            ecpe: Some(ecpe(dist, gt, levels)?),
            n_samples: dist.samples.len(),
            horizon: gt.len(),
        })
    }
}

/// One row of the comparison table: scores averaged over scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub supervision: String,
    pub method: String,
    pub ate: f64,
    pub best_ate: Option<f64>,
    pub ecpe: Option<f64>,
    pub energy_score: Option<f64>,
    pub scenarios: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl TableRow {
    /// Averages reports; a sample-based column stays empty unless every
    /// report carries it.
    pub fn aggregate(supervision: &str, method: &str, reports: &[MetricReport]) -> Self {
        Self {
            supervision: supervision.to_string(),
            method: method.to_string(),
            ate: reports.iter().map(|r| r.ate).sum::<f64>() / reports.len().max(1) as f64,
            best_ate: mean_of(reports.iter().map(|r| r.best_ate)),
            ecpe: mean_of(reports.iter().map(|r| r.ecpe)),
            energy_score: mean_of(reports.iter().map(|r| r.energy_score)),
            scenarios: reports.len(),
        }
    }
}

pub const TABLE_HEADER: &str = "supervision,method,ate,best_ate,ecpe,es";

/// Writes the table; missing scores become empty cells.
pub fn write_table_csv<W: Write>(rows: &[TableRow], mut w: W) -> Result<()> {
    let cell = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    writeln!(w, "{TABLE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{},{},{}",
            r.supervision,
            r.method,
            r.ate,
            cell(r.best_ate),
            cell(r.ecpe),
            cell(r.energy_score)
        )?;
    }
    Ok(())
}
