//! Dense-matrix oracles and the check suite behind `oracle-check`.
//!
//! Every check compares the matrix-free path against an independent dense
//! computation (`toeplitz_dense`, explicit `L D L^T`, Cholesky) or against
//! finite differences, and records the measured error next to its tolerance.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covfield::{self, dense_cov, sigma_matvec, CovarianceOperator, GaussianField};
use crate::grid::{self, gaussian_kernel, Kernel, ScalarGrid};
use crate::nll::{self, FovMask, LossConfig, NllError};
use crate::solver::{cg_solve, CgConfig};

/// `1/2 (r^T Sigma^{-1} r + sum_{mask} log sigma_i^2)` via dense Cholesky, with
/// `r` zeroed outside the mask. Drops the same constants as [`nll::structured_nll`].
pub fn dense_nll(field: &GaussianField, target: &ScalarGrid, mask: &FovMask) -> Result<f64, NllError> {
    let r = DVector::from_vec(nll::masked_residual(field, target, mask)?);
    let sigma = dense_cov(field)?;
    let chol = sigma
        .cholesky()
        .ok_or_else(|| NllError::Config("dense covariance is not positive definite".into()))?;
    let a = chol.solve(&r);
    let log_det: f64 = field
        .log_variance()
        .values()
        .iter()
        .zip(mask.cells())
        .filter(|(_, &m)| m)
        .map(|(s, _)| s)
        .sum();
    Ok(0.5 * (r.dot(&a) + log_det))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub seed: u64,
    pub nll_instances: usize,
    pub nll_rel_tol: f64,
    pub matvec_tol: f64,
    pub grad_instances: usize,
    pub grad_rel_tol: f64,
    pub fd_step: f64,
    pub cg_instances: usize,
    pub cg_budget: usize,
    pub cg_required_fraction: f64,
    pub cg_tol: f64,
    pub kernel_size: usize,
    pub kernel_bandwidth: f64,
    pub sampling_draws: usize,
    pub sampling_frob_tol: f64,
    pub neighbor_corr_tol: f64,
    pub indep_corr_tol: f64,
    pub scalability_rows: usize,
    pub scalability_cols: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            nll_instances: 100,
            nll_rel_tol: 1e-6,
            matvec_tol: 1e-10,
            grad_instances: 50,
            grad_rel_tol: 1e-4,
            fd_step: 1e-5,
            cg_instances: 100,
            cg_budget: 50,
            cg_required_fraction: 0.95,
            cg_tol: 1e-8,
            kernel_size: 5,
            kernel_bandwidth: 0.5,
            sampling_draws: 100_000,
            sampling_frob_tol: 0.05,
            neighbor_corr_tol: 0.05,
            indep_corr_tol: 0.02,
            scalability_rows: 128,
            scalability_cols: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    /// Passes when `measured <= tolerance`.
    #[serde(rename = "<=")]
    AtMost,
    /// Passes when `measured >= tolerance`.
    #[serde(rename = ">=")]
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, measured: f64, tolerance: f64, comparison: Comparison, detail: String) -> Self {
        let passed = match comparison {
            Comparison::AtMost => measured <= tolerance,
            Comparison::AtLeast => measured >= tolerance,
        };
        Self {
            name: name.to_string(),
            measured,
            tolerance,
            comparison,
            passed,
            detail,
        }
    }

    fn failed(name: &str, tolerance: f64, comparison: Comparison, detail: String) -> Self {
        Self {
            name: name.to_string(),
            measured: f64::NAN,
            tolerance,
            comparison,
            passed: false,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    /// Bytes a dense covariance of the scalability grid would occupy.
    pub dense_covariance_bytes: u64,
}

/// A random structured-NLL instance on a `rows x cols` grid.
pub struct Instance {
    pub field: GaussianField,
    pub target: ScalarGrid,
    pub mask: FovMask,
}

pub fn random_instance(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    kernel: Kernel,
    partial_mask: bool,
) -> Instance {
    let mean = ScalarGrid::from_fn(rows, cols, 0.1, |_, _| rng.random_range(-1.0..1.0)).unwrap();
    let logv = ScalarGrid::from_fn(rows, cols, 0.1, |_, _| rng.random_range(-1.0..1.0)).unwrap();
    let target = ScalarGrid::from_fn(rows, cols, 0.1, |_, _| rng.random_range(-2.0..2.0)).unwrap();
    let mask = if partial_mask {
        let mut m = FovMask::from_fn(rows, cols, |_, _| rng.random_bool(0.7));
        if m.count() == 0 {
            m = FovMask::full(rows, cols);
        }
        m
    } else {
        FovMask::full(rows, cols)
    };
    Instance {
        field: GaussianField::new(mean, logv, kernel).unwrap(),
        target,
        mask,
    }
}

fn random_kernel(rng: &mut ChaCha8Rng, rows: usize, cols: usize, max_bandwidth: f64) -> Kernel {
    let sizes: Vec<usize> = [1usize, 3, 5]
        .into_iter()
        .filter(|&k| k <= Kernel::max_size_for(rows, cols))
        .collect();
    let k = sizes[rng.random_range(0..sizes.len())];
    gaussian_kernel(k, rng.random_range(0.3..max_bandwidth)).unwrap()
}

fn oracle_loss_config(tol: f64) -> LossConfig {
    LossConfig {
        cg_tol: tol,
        cg_max_iter: 5000,
        ..LossConfig::default()
    }
}

/// Structured NLL against the dense oracle; returns the worst relative error.
pub fn check_nll_equivalence(cfg: &OracleConfig) -> CheckResult {
    let name = "nll_dense_equivalence";
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let loss = oracle_loss_config(cfg.cg_tol);
    let mut worst = 0.0f64;
    for _ in 0..cfg.nll_instances {
        let rows = rng.random_range(2..=8);
        let cols = rng.random_range(2..=8);
        let kernel = random_kernel(&mut rng, rows, cols, 1.0);
        let partial = rng.random_bool(0.3);
        let inst = random_instance(&mut rng, rows, cols, kernel, partial);
        let fast = match nll::structured_nll(&inst.field, &inst.target, &inst.mask, &loss) {
            Ok(r) => r.value,
            Err(e) => return CheckResult::failed(name, cfg.nll_rel_tol, Comparison::AtMost, e.to_string()),
        };
        let dense = match dense_nll(&inst.field, &inst.target, &inst.mask) {
            Ok(v) => v,
            Err(e) => return CheckResult::failed(name, cfg.nll_rel_tol, Comparison::AtMost, e.to_string()),
        };
        worst = worst.max((fast - dense).abs() / dense.abs().max(1e-12));
    }
    CheckResult::new(
        name,
        worst,
        cfg.nll_rel_tol,
        Comparison::AtMost,
        format!("{} instances, grids 2x2..8x8, kernels 1/3/5", cfg.nll_instances),
    )
}

/// Implicit `Sigma x` against the dense product; returns the worst absolute error.
pub fn check_matvec_equivalence(cfg: &OracleConfig) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    for _ in 0..cfg.nll_instances {
        let rows = rng.random_range(2..=8);
        let cols = rng.random_range(2..=8);
        let kernel = random_kernel(&mut rng, rows, cols, 1.0);
        let inst = random_instance(&mut rng, rows, cols, kernel, false);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let implicit = sigma_matvec(&inst.field, &x).expect("matching length");
        let dense = dense_cov(&inst.field).expect("oracle scale") * DVector::from_column_slice(&x);
        for (a, b) in implicit.iter().zip(dense.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckResult::new(
        "matvec_dense_equivalence",
        worst,
        cfg.matvec_tol,
        Comparison::AtMost,
        format!("{} instances", cfg.nll_instances),
    )
}

/// Largest componentwise relative error between the analytic gradients and
/// central finite differences. The relative error of component `i` is
/// `|analytic - fd| / max(|fd|, 1e-4)`. Log-variance components are checked
/// on supervised cells, where the data term depends on them.
pub fn gradient_fd_error(inst: &Instance, step: f64) -> Result<f64, NllError> {
    let loss = oracle_loss_config(1e-13);
    let grad = nll::structured_nll_grad(&inst.field, &inst.target, &inst.mask, &loss)?;
    let kernel = inst.field.kernel().clone();
    let eval = |mean: Vec<f64>, logv: Vec<f64>| -> Result<f64, NllError> {
        let f = GaussianField::new(
            inst.field.mean().with_values(mean)?,
            inst.field.mean().with_values(logv)?,
            kernel.clone(),
        )?;
        Ok(nll::structured_nll(&f, &inst.target, &inst.mask, &loss)?.value)
    };
    let mean = inst.field.mean().values();
    let logv = inst.field.log_variance().values();
    let rel = |analytic: f64, fd: f64| (analytic - fd).abs() / fd.abs().max(1e-4);
    let mut worst = 0.0f64;
    for i in 0..mean.len() {
        let (mut up, mut dn) = (mean.to_vec(), mean.to_vec());
        up[i] += step;
        dn[i] -= step;
        let fd = (eval(up, logv.to_vec())? - eval(dn, logv.to_vec())?) / (2.0 * step);
        worst = worst.max(rel(grad.mean.values()[i], fd));
        if inst.mask.cells()[i] {
            let (mut up, mut dn) = (logv.to_vec(), logv.to_vec());
            up[i] += step;
            dn[i] -= step;
            let fd = (eval(mean.to_vec(), up)? - eval(mean.to_vec(), dn)?) / (2.0 * step);
            worst = worst.max(rel(grad.log_variance.values()[i], fd));
        }
    }
    Ok(worst)
}

pub fn check_gradients(cfg: &OracleConfig) -> CheckResult {
    let name = "gradient_finite_difference";
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut worst = 0.0f64;
    for _ in 0..cfg.grad_instances {
        let rows = rng.random_range(3..=6);
        let cols = rng.random_range(3..=6);
        let kernel = random_kernel(&mut rng, rows, cols, 0.8);
        let partial = rng.random_bool(0.5);
        let inst = random_instance(&mut rng, rows, cols, kernel, partial);
        match gradient_fd_error(&inst, cfg.fd_step) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return CheckResult::failed(name, cfg.grad_rel_tol, Comparison::AtMost, e.to_string()),
        }
    }
    CheckResult::new(
        name,
        worst,
        cfg.grad_rel_tol,
        Comparison::AtMost,
        format!("{} instances, central differences h = {:e}", cfg.grad_instances, cfg.fd_step),
    )
}

/// Iterations CG needs on one random 16x16 system with `sigma^2 in [0.5, 2]`.
pub fn cg_budget_iterations(rng: &mut ChaCha8Rng, kernel: &Kernel, tol: f64, max_iter: usize) -> Option<usize> {
    let (rows, cols) = (16, 16);
    let logv = ScalarGrid::from_fn(rows, cols, 0.1, |_, _| rng.random_range(0.5f64..2.0).ln()).unwrap();
    let field = GaussianField::new(ScalarGrid::zeros(rows, cols, 0.1).unwrap(), logv, kernel.clone()).unwrap();
    let r: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut op = CovarianceOperator::new(&field);
    let rep = cg_solve(|x, out| op.apply(x, out), &r, CgConfig { tol, max_iter }).ok()?;
    rep.converged.then_some(rep.iterations)
}

pub fn check_cg_budget(cfg: &OracleConfig) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let kernel = match gaussian_kernel(cfg.kernel_size, cfg.kernel_bandwidth) {
        Ok(k) => k,
        Err(e) => return CheckResult::failed("cg_budget", cfg.cg_required_fraction, Comparison::AtLeast, e.to_string()),
    };
    let mut within = 0usize;
    let mut max_seen = 0usize;
    for _ in 0..cfg.cg_instances {
        if let Some(it) = cg_budget_iterations(&mut rng, &kernel, cfg.cg_tol, cfg.cg_budget) {
            within += 1;
            max_seen = max_seen.max(it);
        }
    }
    CheckResult::new(
        "cg_budget",
        within as f64 / cfg.cg_instances.max(1) as f64,
        cfg.cg_required_fraction,
        Comparison::AtLeast,
        format!(
            "fraction of {} 16x16 systems solved to {:e} within {} iterations (max used {max_seen})",
            cfg.cg_instances, cfg.cg_tol, cfg.cg_budget
        ),
    )
}

/// Outcome of one NLL evaluation at map scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalabilityRun {
    pub cg_iterations: usize,
    pub convolutions: u64,
    pub elapsed: std::time::Duration,
    pub dense_covariance_bytes: u64,
}

pub fn scalability_run(rows: usize, cols: usize, seed: u64) -> Result<ScalabilityRun, NllError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = gaussian_kernel(5, 0.5)?;
    let logv = ScalarGrid::from_fn(rows, cols, 0.1, |_, _| rng.random_range(0.5f64..2.0).ln())?;
    let mean = ScalarGrid::zeros(rows, cols, 0.1)?;
    let target = ScalarGrid::from_fn(rows, cols, 0.1, |_, _| rng.random_range(-1.0..1.0))?;
    let field = GaussianField::new(mean, logv, kernel)?;
    let mask = FovMask::full(rows, cols);
    grid::reset_convolution_count();
    let start = std::time::Instant::now();
    let rep = nll::structured_nll(&field, &target, &mask, &LossConfig::default())?;
    let elapsed = start.elapsed();
    let n = (rows * cols) as u64;
    Ok(ScalabilityRun {
        cg_iterations: rep.cg_iterations,
        convolutions: grid::convolution_count(),
        elapsed,
        dense_covariance_bytes: n * n * 8,
    })
}

fn check_scalability(cfg: &OracleConfig) -> (CheckResult, u64) {
    let name = "scalability_convolution_count";
    match scalability_run(cfg.scalability_rows, cfg.scalability_cols, cfg.seed) {
        Ok(run) => {
            let expected = 2 * run.cg_iterations as u64 + 1;
            let check = CheckResult::new(
                name,
                (run.convolutions as f64 - expected as f64).abs(),
                0.0,
                Comparison::AtMost,
                format!(
                    "{}x{} grid: {} CG iterations, {} convolutions; dense covariance would need {} bytes ({:.2} GB)",
                    cfg.scalability_rows,
                    cfg.scalability_cols,
                    run.cg_iterations,
                    run.convolutions,
                    run.dense_covariance_bytes,
                    run.dense_covariance_bytes as f64 / 1e9,
                ),
            );
            (check, run.dense_covariance_bytes)
        }
        Err(e) => (CheckResult::failed(name, 0.0, Comparison::AtMost, e.to_string()), 0),
    }
}

/// Relative Frobenius error of the empirical covariance of `draws` samples.
pub fn sampling_covariance_error(field: &GaussianField, seed: u64, draws: usize) -> f64 {
    let n = field.len();
    let sigma = dense_cov(field).expect("oracle scale");
    let mut emp = nalgebra::DMatrix::<f64>::zeros(n, n);
    for m in 0..draws as u64 {
        let s = covfield::sample_one(field, seed, m).expect("valid field");
        let d = DVector::from_iterator(n, s.values().iter().zip(field.mean().values()).map(|(x, mu)| x - mu));
        emp.ger(1.0, &d, &d, 1.0);
    }
    emp /= draws as f64;
    (&emp - &sigma).norm() / sigma.norm()
}

/// Empirical and analytic correlation between cells `i` and `j`.
pub fn neighbor_correlation(field: &GaussianField, seed: u64, draws: usize, i: usize, j: usize) -> (f64, f64) {
    let sigma = dense_cov(field).expect("oracle scale");
    let analytic = sigma[(i, j)] / (sigma[(i, i)] * sigma[(j, j)]).sqrt();
    let (mut sii, mut sjj, mut sij) = (0.0, 0.0, 0.0);
    let mu = field.mean().values();
    for m in 0..draws as u64 {
        let s = covfield::sample_one(field, seed, m).expect("valid field");
        let di = s.values()[i] - mu[i];
        let dj = s.values()[j] - mu[j];
        sii += di * di;
        sjj += dj * dj;
        sij += di * dj;
    }
    (sij / (sii * sjj).sqrt(), analytic)
}

fn check_sampling(cfg: &OracleConfig) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let kernel = gaussian_kernel(5, 1.0).unwrap();
    let inst = random_instance(&mut rng, 4, 4, kernel, false);
    let frob = sampling_covariance_error(&inst.field, cfg.seed, cfg.sampling_draws);

    let mean = ScalarGrid::zeros(8, 8, 0.1).unwrap();
    let sc = GaussianField::with_constant_variance(mean, 1.0, gaussian_kernel(5, 1.0).unwrap()).unwrap();
    let indep = sc.with_kernel(Kernel::identity()).unwrap();
    let (i, j) = (3 * 8 + 3, 3 * 8 + 4);
    let (sc_emp, sc_true) = neighbor_correlation(&sc, cfg.seed, cfg.sampling_draws, i, j);
    let (ind_emp, _) = neighbor_correlation(&indep, cfg.seed, cfg.sampling_draws, i, j);

    vec![
        CheckResult::new(
            "sampling_covariance",
            frob,
            cfg.sampling_frob_tol,
            Comparison::AtMost,
            format!("relative Frobenius error over {} draws, 4x4 field, 5x5 kernel", cfg.sampling_draws),
        ),
        CheckResult::new(
            "sampling_neighbor_correlation",
            (sc_emp - sc_true).abs(),
            cfg.neighbor_corr_tol,
            Comparison::AtMost,
            format!("empirical {sc_emp:.4} vs analytic {sc_true:.4}"),
        ),
        CheckResult::new(
            "sampling_independent_correlation",
            ind_emp.abs(),
            cfg.indep_corr_tol,
            Comparison::AtMost,
            format!("delta-kernel neighbor correlation {ind_emp:.4}"),
        ),
    ]
}

/// Runs every check in order.
pub fn run_oracle_checks(cfg: &OracleConfig) -> OracleReport {
    let mut checks = vec![
        check_nll_equivalence(cfg),
        check_matvec_equivalence(cfg),
        check_gradients(cfg),
        check_cg_budget(cfg),
    ];
    let (scal, bytes) = check_scalability(cfg);
    checks.push(scal);
    checks.extend(check_sampling(cfg));
    OracleReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
        dense_covariance_bytes: bytes,
    }
}
