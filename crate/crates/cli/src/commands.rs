use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use terrain_uq::covfield;
use terrain_uq::experiment::{self, CompareConfig, FitExperimentConfig, ScenarioSetup, METHODS};
use terrain_uq::forecast::{self, ForecastConfig, TrajectoryDistribution, DEFAULT_VARIANCE_FLOOR};
use terrain_uq::grid::{self, gaussian_kernel, ScalarGrid};
use terrain_uq::metrics::{self, MetricReport};
use terrain_uq::oracle::{self, Comparison, OracleConfig};
use terrain_uq::physics::{self, PhysicsConfig, Trajectory};
use terrain_uq::synth::ScenarioSpec;
use terrain_uq::TerrainParam;

use crate::{write_file, write_json, CliError, CliResult, Context};

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_trajectory(path: &Path) -> CliResult<Trajectory> {
    let file = File::open(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    physics::read_trajectory_csv(file).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// The scenario given inline, or read from `file` when that is set, with its
/// seed replaced by `seed`.
fn resolve_scenario(ctx: &Context, inline: &ScenarioSpec, file: Option<&Path>, seed: u64) -> CliResult<ScenarioSpec> {
    let spec = match file {
        Some(p) => {
            let path = ctx.resolve(p);
            ScenarioSpec::from_json_file(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => inline.clone(),
    };
    let spec = ScenarioSpec { seed, ..spec };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

pub fn oracle_check(ctx: &Context) -> CliResult<()> {
    let mut cfg: OracleConfig = ctx.load()?;
    cfg.seed = ctx.require_seed("oracle-check")?;
    let report = oracle::run_oracle_checks(&cfg);
    if let Some(dir) = ctx.out_dir()? {
        write_json(dir, "oracle_report.json", &report)?;
    }
    ctx.emit(&report, || {
        let mut s = String::new();
        for c in &report.checks {
            let op = match c.comparison {
                Comparison::AtMost => "<=",
                Comparison::AtLeast => ">=",
            };
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{verdict} {}: {:.3e} {op} {:.3e} ({})", c.name, c.measured, c.tolerance, c.detail);
        }
        let _ = writeln!(
            s,
            "dense covariance of the {}x{} grid would need {} bytes ({:.2} GB)",
            cfg.scalability_rows,
            cfg.scalability_cols,
            report.dense_covariance_bytes,
            report.dense_covariance_bytes as f64 / 1e9
        );
        s
    })?;
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::Check(failed.join(", ")))
    }
}

pub fn fit(ctx: &Context) -> CliResult<()> {
    let cfg: FitExperimentConfig = ctx.load()?;
    let seed = ctx.require_seed("fit")?;
    cfg.scenario.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.loss.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let run = experiment::run_fit_experiment(&cfg, seed).map_err(CliError::runtime)?;
    if let Some(dir) = ctx.out_dir()? {
        covfield::save_field(&run.outcome.field, dir, "fitted", "csv").map_err(CliError::runtime)?;
        covfield::save_field(&run.planted, dir, "planted", "csv").map_err(CliError::runtime)?;
        let (rows, cols) = run.mask.shape();
        let cells = run.mask.cells().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let mask = ScalarGrid::new(rows, cols, run.planted.mean().cell_size(), cells).map_err(CliError::runtime)?;
        grid::write_grid(&mask, &dir.join("fov_mask.csv")).map_err(CliError::runtime)?;
        write_json(dir, "loss_curve.json", &run.report.curve)?;
        let mut csv = String::from("step,nll,ofov\n");
        for p in &run.report.curve {
            let _ = writeln!(csv, "{},{},{}", p.step, p.nll, p.ofov);
        }
        write_file(dir, "loss_curve.csv", csv)?;
        write_json(dir, "fit_report.json", &run.report)?;
    }
    ctx.emit(&run.report, || {
        let r = &run.report;
        let last = r.curve.last();
        format!(
            "fov cells {}: mean relative variance error {:.4}\n\
             ofov cells {}: max relative deviation from prior {:.4}\n\
             final nll {}\n",
            r.fov_cells,
            r.fov_mean_relative_error,
            r.ofov_cells,
            r.ofov_max_relative_deviation,
            last.map(|p| format!("{:.6}", p.nll)).unwrap_or_else(|| "-".into()),
        )
    })
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateConfig {
    scenario: ScenarioSpec,
    /// Scenario JSON file, relative to the config; overrides `scenario`.
    scenario_file: Option<PathBuf>,
    physics: PhysicsConfig,
}

#[derive(Debug, Serialize)]
struct SimulateReport {
    steps: usize,
    truncated_at: Option<usize>,
    final_position: [f64; 3],
    final_orthogonality_error: f64,
}

pub fn simulate(ctx: &Context) -> CliResult<()> {
    let cfg: SimulateConfig = ctx.load()?;
    let seed = ctx.require_seed("simulate")?;
    cfg.physics.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let spec = resolve_scenario(ctx, &cfg.scenario, cfg.scenario_file.as_deref(), seed)?;
    let generated = terrain_uq::synth::gen_world(&spec).map_err(CliError::runtime)?;
    let body = spec.body().map_err(CliError::runtime)?;
    let controls = spec.controls().map_err(CliError::runtime)?;
    let state0 = spec.initial_state(&generated.truth).map_err(CliError::runtime)?;
    let traj = physics::rollout(&state0, &generated.truth, &body, &controls, &cfg.physics).map_err(CliError::runtime)?;

    if let Some(dir) = ctx.out_dir()? {
        physics::write_trajectory_csv(&traj, create(dir, "trajectory.csv")?).map_err(CliError::runtime)?;
        for param in TerrainParam::ALL {
            grid::write_grid(generated.truth.grid(param), &dir.join(format!("world_{param}.csv")))
                .map_err(CliError::runtime)?;
        }
    }
    let last = traj.states.last().expect("a rollout holds its initial state");
    let report = SimulateReport {
        steps: traj.horizon(),
        truncated_at: traj.truncated_at,
        final_position: [last.x.x, last.x.y, last.x.z],
        final_orthogonality_error: last.orthogonality_error(),
    };
    ctx.emit(&report, || {
        let p = report.final_position;
        let mut s = format!("{} control steps, final position ({:.4}, {:.4}, {:.4})\n", report.steps, p[0], p[1], p[2]);
        if let Some(t) = report.truncated_at {
            let _ = writeln!(s, "left the map at step {t}");
        }
        s
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ForecastMethod {
    #[default]
    Sc,
    Indep,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ForecastCommandConfig {
    scenario: ScenarioSpec,
    /// Scenario JSON file, relative to the config; overrides `scenario`.
    scenario_file: Option<PathBuf>,
    forecast: ForecastConfig,
    method: ForecastMethod,
    kernel_size: usize,
    kernel_bandwidth: f64,
}

impl Default for ForecastCommandConfig {
    fn default() -> Self {
        let compare = CompareConfig::default();
        Self {
            scenario: ScenarioSpec::default(),
            scenario_file: None,
            forecast: ForecastConfig::default(),
            method: ForecastMethod::default(),
            kernel_size: compare.kernel_size,
            kernel_bandwidth: compare.kernel_bandwidth,
        }
    }
}

#[derive(Debug, Serialize)]
struct ForecastSummary {
    method: &'static str,
    requested: usize,
    survived: usize,
    failed: usize,
    horizon: usize,
    floor_active: bool,
    final_mean: [f64; 3],
    final_variance: [f64; 3],
}

pub fn forecast(ctx: &Context) -> CliResult<()> {
    let cfg: ForecastCommandConfig = ctx.load()?;
    let seed = ctx.require_seed("forecast")?;
    cfg.forecast.physics.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let spec = resolve_scenario(ctx, &cfg.scenario, cfg.scenario_file.as_deref(), seed)?;
    let kernel = gaussian_kernel(cfg.kernel_size, cfg.kernel_bandwidth).map_err(|e| CliError::Config(e.to_string()))?;
    let setup = ScenarioSetup::new(&spec, &kernel).map_err(CliError::runtime)?;
    let prior = match cfg.method {
        ForecastMethod::Sc => &setup.sc,
        ForecastMethod::Indep => &setup.indep,
    };
    let dist = forecast::mc_forecast(prior, &setup.state0, &setup.body, &setup.controls, &cfg.forecast, seed)
        .map_err(CliError::runtime)?;

    if let Some(dir) = ctx.out_dir()? {
        dist.write_json(create(dir, "forecast.json")?).map_err(CliError::runtime)?;
        dist.write_samples_csv(create(dir, "samples.csv")?).map_err(CliError::runtime)?;
        let physics_cfg = &cfg.forecast.physics;
        let truth = setup.rollout_on(&setup.realized, physics_cfg).map_err(CliError::runtime)?;
        physics::write_trajectory_csv(&truth, create(dir, "truth.csv")?).map_err(CliError::runtime)?;
        let det = setup.rollout_on(&setup.generated.truth, physics_cfg).map_err(CliError::runtime)?;
        physics::write_trajectory_csv(&det, create(dir, "det.csv")?).map_err(CliError::runtime)?;
    }
    let summary = ForecastSummary {
        method: match cfg.method {
            ForecastMethod::Sc => "SC",
            ForecastMethod::Indep => "Indep",
        },
        requested: cfg.forecast.samples,
        survived: dist.samples.len(),
        failed: dist.failed.len(),
        horizon: dist.horizon,
        floor_active: dist.floor_active,
        final_mean: *dist.mean.last().expect("horizon is at least 1"),
        final_variance: *dist.variance.last().expect("horizon is at least 1"),
    };
    ctx.emit(&summary, || {
        let (m, v) = (summary.final_mean, summary.final_variance);
        format!(
            "{}: {}/{} rollouts survived over {} steps\n\
             final mean ({:.4}, {:.4}, {:.4}), std ({:.4}, {:.4}, {:.4})\n",
            summary.method,
            summary.survived,
            summary.requested,
            summary.horizon,
            m[0],
            m[1],
            m[2],
            v[0].sqrt(),
            v[1].sqrt(),
            v[2].sqrt()
        )
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MetricsConfig {
    /// Trajectory CSV the predictions are scored against.
    ground_truth: Option<PathBuf>,
    /// Samples CSV of a Monte Carlo forecast.
    samples: Option<PathBuf>,
    /// Trajectory CSV of a single deterministic prediction.
    prediction: Option<PathBuf>,
    levels: Vec<f64>,
    variance_floor: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ground_truth: None,
            samples: None,
            prediction: None,
            levels: metrics::DEFAULT_LEVELS.to_vec(),
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

pub fn metrics(ctx: &Context) -> CliResult<()> {
    let cfg: MetricsConfig = ctx.load()?;
    let gt_path = cfg
        .ground_truth
        .as_deref()
        .ok_or_else(|| CliError::Config("metrics needs `ground_truth`".into()))?;
    let gt = forecast::forecast_positions(&read_trajectory(&ctx.resolve(gt_path))?);
    let report = match (&cfg.samples, &cfg.prediction) {
        (Some(samples), None) => {
            let path = ctx.resolve(samples);
            let file = File::open(&path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let raw = forecast::read_samples_csv(file).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            let dist = TrajectoryDistribution::from_samples(raw, cfg.variance_floor).map_err(CliError::runtime)?;
            MetricReport::probabilistic(&dist, &gt, &cfg.levels).map_err(CliError::runtime)?
        }
        (None, Some(pred)) => {
            let pred = forecast::forecast_positions(&read_trajectory(&ctx.resolve(pred))?);
            MetricReport::deterministic(&pred, &gt).map_err(CliError::runtime)?
        }
        _ => return Err(CliError::Config("metrics needs exactly one of `samples` and `prediction`".into())),
    };
    if let Some(dir) = ctx.out_dir()? {
        write_json(dir, "metrics.json", &report)?;
    }
    ctx.emit(&report, || {
        format!(
            "ate {:.4}  best_ate {}  ecpe {}  es {}  ({} samples, {} steps)\n",
            report.ate,
            fmt_opt(report.best_ate),
            fmt_opt(report.ecpe),
            fmt_opt(report.energy_score),
            report.n_samples,
            report.horizon
        )
    })
}

pub fn compare(ctx: &Context) -> CliResult<()> {
    let cfg: CompareConfig = ctx.load()?;
    let seed = ctx.require_seed("compare")?;
    ScenarioSpec { seed, ..cfg.scenario.clone() }
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    cfg.forecast.physics.validate().map_err(|e| CliError::Config(e.to_string()))?;
    gaussian_kernel(cfg.kernel_size, cfg.kernel_bandwidth).map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.scenarios == 0 {
        return Err(CliError::Config("scenarios must be at least 1".into()));
    }
    let report = experiment::run_compare(&cfg, seed).map_err(CliError::runtime)?;

    if let Some(dir) = ctx.out_dir()? {
        metrics::write_table_csv(&report.table, create(dir, "table.csv")?).map_err(CliError::runtime)?;
        write_json(dir, "compare.json", &report)?;
        let mut csv = String::from("scenario,seed,method,ate,best_ate,ecpe,es\n");
        for s in &report.scenarios {
            for (method, r) in METHODS.iter().zip([&s.det, &s.indep, &s.sc]) {
                let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(
                    csv,
                    "{},{},{method},{},{},{},{}",
                    s.index,
                    s.seed,
                    r.ate,
                    cell(r.best_ate),
                    cell(r.ecpe),
                    cell(r.energy_score)
                );
            }
        }
        write_file(dir, "scenarios.csv", csv)?;
    }
    ctx.emit(&report, || {
        let mut s = format!("{:<12} {:<6} {:>8} {:>8} {:>8} {:>8}\n", "supervision", "method", "ATE", "bestATE", "ECPE", "ES");
        for r in &report.table {
            let _ = writeln!(
                s,
                "{:<12} {:<6} {:>8.4} {:>8} {:>8} {:>8}",
                r.supervision,
                r.method,
                r.ate,
                fmt_opt(r.best_ate),
                fmt_opt(r.ecpe),
                fmt_opt(r.energy_score)
            );
        }
        s
    })
}
