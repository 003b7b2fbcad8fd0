//! Structured Gaussian fields `N(mu, L D L^T)`.
//!
//! `L` is the convolution with a fixed kernel and `D = diag(exp(log_variance))`.
//! Products with `Sigma` go through two convolutions and never build a matrix;
//! [`dense_cov`] exists only as an oracle for small grids.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{self, convolve_into, GridError, Kernel, ScalarGrid};

/// Log-variances are kept inside this range so `D` stays invertible.
pub const LOG_VARIANCE_MIN: f64 = -30.0;
pub const LOG_VARIANCE_MAX: f64 = 30.0;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("log-variance {value} at cell ({row}, {col}) is outside [{LOG_VARIANCE_MIN}, {LOG_VARIANCE_MAX}]")]
    LogVarianceRange { row: usize, col: usize, value: f64 },
    #[error("vector has length {got}, field has {expected} cells")]
    Length { expected: usize, got: usize },
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("field manifest: {0}")]
    Manifest(String),
}

pub type Result<T, E = FieldError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianField {
    mean: ScalarGrid,
    log_variance: ScalarGrid,
    kernel: Kernel,
}

impl GaussianField {
    pub fn new(mean: ScalarGrid, log_variance: ScalarGrid, kernel: Kernel) -> Result<Self> {
        log_variance.ensure_shape(mean.rows(), mean.cols())?;
        if kernel.size() > Kernel::max_size_for(mean.rows(), mean.cols()) {
            return Err(GridError::KernelTooLarge {
                size: kernel.size(),
                rows: mean.rows(),
                cols: mean.cols(),
                max: Kernel::max_size_for(mean.rows(), mean.cols()),
            }
            .into());
        }
        let cols = mean.cols();
        if let Some((idx, &value)) = log_variance
            .values()
            .iter()
            .enumerate()
            .find(|(_, v)| !(LOG_VARIANCE_MIN..=LOG_VARIANCE_MAX).contains(*v))
        {
            return Err(FieldError::LogVarianceRange {
                row: idx / cols,
                col: idx % cols,
                value,
            });
        }
        Ok(Self {
            mean,
            log_variance,
            kernel,
        })
    }

    /// Like [`GaussianField::new`] but clamps log-variances into range.
    pub fn new_clamped(mean: ScalarGrid, log_variance: ScalarGrid, kernel: Kernel) -> Result<Self> {
        let log_variance = log_variance.map(clamp_log_variance)?;
        Self::new(mean, log_variance, kernel)
    }

    /// Field with constant variance `variance` everywhere.
    pub fn with_constant_variance(mean: ScalarGrid, variance: f64, kernel: Kernel) -> Result<Self> {
        let log_variance = mean.map(|_| variance.ln())?;
        Self::new(mean, log_variance, kernel)
    }

    pub fn mean(&self) -> &ScalarGrid {
        &self.mean
    }

    pub fn log_variance(&self) -> &ScalarGrid {
        &self.log_variance
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn rows(&self) -> usize {
        self.mean.rows()
    }

    pub fn cols(&self) -> usize {
        self.mean.cols()
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.values().iter().map(|s| s.exp()).collect()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_variance.values().iter().map(|s| (0.5 * s).exp()).collect()
    }

    /// Same mean and variances with a different correlation kernel.
    pub fn with_kernel(&self, kernel: Kernel) -> Result<Self> {
        Self::new(self.mean.clone(), self.log_variance.clone(), kernel)
    }

    pub fn with_mean(&self, mean: ScalarGrid) -> Result<Self> {
        Self::new(mean, self.log_variance.clone(), self.kernel.clone())
    }
}

pub fn clamp_log_variance(s: f64) -> f64 {
    s.clamp(LOG_VARIANCE_MIN, LOG_VARIANCE_MAX)
}

/// Reusable `x -> L D L^T x` operator with its own scratch buffer.
pub struct CovarianceOperator<'a> {
    kernel: &'a Kernel,
    variance: Vec<f64>,
    rows: usize,
    cols: usize,
    scratch: Vec<f64>,
}

impl<'a> CovarianceOperator<'a> {
    pub fn new(field: &'a GaussianField) -> Self {
        Self {
            kernel: field.kernel(),
            variance: field.variance(),
            rows: field.rows(),
            cols: field.cols(),
            scratch: vec![0.0; field.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.variance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variance.is_empty()
    }

    /// `out = g * (sigma^2 . (g^T * x))`
    pub fn apply(&mut self, x: &[f64], out: &mut [f64]) {
        convolve_into(x, self.rows, self.cols, self.kernel, true, &mut self.scratch);
        for (s, v) in self.scratch.iter_mut().zip(&self.variance) {
            *s *= v;
        }
        convolve_into(&self.scratch, self.rows, self.cols, self.kernel, false, out);
    }
}

/// Implicit `Sigma x` for the field's covariance.
pub fn sigma_matvec(field: &GaussianField, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != field.len() {
        return Err(FieldError::Length {
            expected: field.len(),
            got: x.len(),
        });
    }
    let mut out = vec![0.0; x.len()];
    CovarianceOperator::new(field).apply(x, &mut out);
    Ok(out)
}

/// Reparameterized draw `mean + g * (sigma . eps)` for a given noise grid.
pub fn sample_from_noise(field: &GaussianField, noise: &[f64]) -> Result<ScalarGrid> {
    if noise.len() != field.len() {
        return Err(FieldError::Length {
            expected: field.len(),
            got: noise.len(),
        });
    }
    let scaled: Vec<f64> = noise.iter().zip(field.std_dev()).map(|(e, s)| e * s).collect();
    let mut out = vec![0.0; scaled.len()];
    convolve_into(&scaled, field.rows(), field.cols(), field.kernel(), false, &mut out);
    for (o, m) in out.iter_mut().zip(field.mean().values()) {
        *o += m;
    }
    Ok(field.mean().with_values(out)?)
}

/// Generator for draw `index` under `seed`. Each draw has its own ChaCha
/// stream, so draws can be produced in any order or in parallel.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw number `index` of the sequence produced by [`sample`].
pub fn sample_one(field: &GaussianField, seed: u64, index: u64) -> Result<ScalarGrid> {
    let mut rng = sample_rng(seed, index);
    let noise: Vec<f64> = (0..field.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    sample_from_noise(field, &noise)
}

/// `count` independent draws from the field, deterministic in `seed`.
pub fn sample(field: &GaussianField, seed: u64, count: usize) -> Result<Vec<ScalarGrid>> {
    if count == 0 {
        return Err(FieldError::NoSamples);
    }
    (0..count as u64).map(|m| sample_one(field, seed, m)).collect()
}

/// Dense `L diag(sigma^2) L^T`. Oracle-scale only.
pub fn dense_cov(field: &GaussianField) -> Result<DMatrix<f64>> {
    let l = grid::toeplitz_dense(field.kernel(), field.rows(), field.cols())?;
    let mut ld = l.clone();
    for (j, v) in field.variance().into_iter().enumerate() {
        ld.column_mut(j).scale_mut(v);
    }
    Ok(ld * l.transpose())
}

/// JSON manifest tying a field's grid and kernel files together. Paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldManifest {
    pub mean: String,
    pub log_variance: String,
    pub kernel: String,
}

/// Writes `<stem>_mean.<ext>`, `<stem>_log_variance.<ext>`, `<stem>_kernel.json`
/// and the manifest `<stem>.json` into `dir`; returns the manifest path.
/// `ext` is `csv` or `bin`.
pub fn save_field(field: &GaussianField, dir: &Path, stem: &str, ext: &str) -> Result<PathBuf> {
    let manifest = FieldManifest {
        mean: format!("{stem}_mean.{ext}"),
        log_variance: format!("{stem}_log_variance.{ext}"),
        kernel: format!("{stem}_kernel.json"),
    };
    grid::write_grid(field.mean(), &dir.join(&manifest.mean))?;
    grid::write_grid(field.log_variance(), &dir.join(&manifest.log_variance))?;
    let kernel_json =
        serde_json::to_string_pretty(field.kernel()).map_err(|e| FieldError::Manifest(e.to_string()))?;
    fs::write(dir.join(&manifest.kernel), kernel_json).map_err(GridError::from)?;
    let path = dir.join(format!("{stem}.json"));
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| FieldError::Manifest(e.to_string()))?;
    fs::write(&path, text).map_err(GridError::from)?;
    Ok(path)
}

pub fn load_field(manifest_path: &Path) -> Result<GaussianField> {
    let text = fs::read_to_string(manifest_path).map_err(GridError::from)?;
    let manifest: FieldManifest =
        serde_json::from_str(&text).map_err(|e| FieldError::Manifest(e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mean = grid::read_grid(&dir.join(&manifest.mean))?;
    let log_variance = grid::read_grid(&dir.join(&manifest.log_variance))?;
    let kernel_text = fs::read_to_string(dir.join(&manifest.kernel)).map_err(GridError::from)?;
    let raw: Kernel =
        serde_json::from_str(&kernel_text).map_err(|e| FieldError::Manifest(e.to_string()))?;
    // Re-validate: deserialization bypasses the constructor.
    let kernel = Kernel::new(raw.size(), raw.weights().to_vec())?;
    GaussianField::new(mean, log_variance, kernel)
}
