//! Batch experiments: method comparison over seeded scenarios and planted
//! field recovery by maximum likelihood.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covfield::{self, FieldError, GaussianField};
use crate::forecast::{self, param_seed, ForecastConfig, ForecastError, ParamSource, WorldPrior};
use crate::grid::{gaussian_kernel, GridError, Kernel, ScalarGrid};
use crate::metrics::{self, MetricError, MetricReport, TableRow};
use crate::nll::{fit_field, FitConfig, FitOutcome, FovMask, LossConfig, LossPoint, NllError};
use crate::param::TerrainParam;
use crate::physics::{self, PhysicsError, WorldModelSample};
use crate::synth::{self, ScenarioSpec, SynthError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("scenario {index}: {source}")]
    Scenario {
        index: usize,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("ground-truth rollout left the map at step {0}")]
    TruthTruncated(usize),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Nll(#[from] NllError),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Seed of scenario `index` in a batch started from `seed`.
pub fn scenario_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 27)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub scenarios: usize,
    /// Template for every scenario; its seed is replaced per scenario.
    pub scenario: ScenarioSpec,
    pub forecast: ForecastConfig,
    /// Correlation kernel of the terrain uncertainty. Also the kernel of the
    /// spatially correlated forecast.
    pub kernel_size: usize,
    pub kernel_bandwidth: f64,
    pub levels: Vec<f64>,
    /// Label for the supervision column of the table.
    pub supervision: String,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            scenarios: 20,
            scenario: ScenarioSpec::default(),
            forecast: ForecastConfig::default(),
            kernel_size: 9,
            kernel_bandwidth: 2.0,
            levels: metrics::DEFAULT_LEVELS.to_vec(),
            supervision: "height".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub index: usize,
    pub seed: u64,
    pub det: MetricReport,
    pub indep: MetricReport,
    pub sc: MetricReport,
    pub failed_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub table: Vec<TableRow>,
    pub scenarios: Vec<ScenarioResult>,
}

pub const METHODS: [&str; 3] = ["Det", "Indep", "SC"];

/// Builds a prior whose probabilistic parameters use `kernel`; parameters
/// without a field are taken deterministically from `truth`.
pub fn prior_with_kernel(
    truth: &WorldModelSample,
    fields: &BTreeMap<TerrainParam, GaussianField>,
    kernel: &Kernel,
) -> Result<WorldPrior> {
    let mut sources = BTreeMap::new();
    for param in TerrainParam::ALL {
        let source = match fields.get(&param) {
            Some(f) => ParamSource::Probabilistic(f.with_kernel(kernel.clone())?),
            None => ParamSource::Deterministic(truth.grid(param).clone()),
        };
        sources.insert(param, source);
    }
    Ok(WorldPrior {
        sources,
        origin: truth.origin(),
    })
}

/// Everything needed to forecast one generated scenario.
pub struct ScenarioSetup {
    pub generated: synth::GeneratedWorld,
    pub sc: WorldPrior,
    pub indep: WorldPrior,
    /// The world the ground-truth trajectory is rolled out on, one draw of
    /// the correlated fields.
    pub realized: WorldModelSample,
    pub body: physics::RigidBodyModel,
    pub controls: physics::ControlSequence,
    pub state0: physics::RobotState,
}

impl ScenarioSetup {
    pub fn new(spec: &ScenarioSpec, kernel: &Kernel) -> Result<Self> {
        let generated = synth::gen_world(spec)?;
        let sc = prior_with_kernel(&generated.truth, &generated.fields, kernel)?;
        let indep = prior_with_kernel(&generated.truth, &generated.fields, &Kernel::identity())?;
        let realized = sc.sample(param_seed(spec.seed, TerrainParam::Geom).rotate_left(17), 0)?;
        Ok(Self {
            body: spec.body()?,
            controls: spec.controls()?,
            state0: spec.initial_state(&generated.truth)?,
            generated,
            sc,
            indep,
            realized,
        })
    }

    /// Rolls out on `world`, failing if the robot leaves the map.
    pub fn rollout_on(&self, world: &WorldModelSample, cfg: &physics::PhysicsConfig) -> Result<physics::Trajectory> {
        let traj = physics::rollout(&self.state0, world, &self.body, &self.controls, cfg)?;
        match traj.truncated_at {
            Some(t) => Err(ExperimentError::TruthTruncated(t)),
            None => Ok(traj),
        }
    }
}

/// Runs one scenario: draws the realized world from the correlated fields,
/// rolls out the ground truth, and scores the three methods against it.
pub fn run_scenario(cfg: &CompareConfig, index: usize, seed: u64) -> Result<ScenarioResult> {
    let spec = ScenarioSpec {
        seed,
        ..cfg.scenario.clone()
    };
    let kernel = gaussian_kernel(cfg.kernel_size, cfg.kernel_bandwidth)?;
    let setup = ScenarioSetup::new(&spec, &kernel)?;
    let gt = forecast::forecast_positions(&setup.rollout_on(&setup.realized, &cfg.forecast.physics)?);
    let det_traj = setup.rollout_on(&setup.generated.truth, &cfg.forecast.physics)?;
    let det = MetricReport::deterministic(&forecast::forecast_positions(&det_traj), &gt)?;

    // Common random numbers: both forecasts see the same noise draws.
    let (s0, body, controls) = (&setup.state0, &setup.body, &setup.controls);
    let sc_dist = forecast::mc_forecast(&setup.sc, s0, body, controls, &cfg.forecast, seed)?;
    let indep_dist = forecast::mc_forecast(&setup.indep, s0, body, controls, &cfg.forecast, seed)?;
    Ok(ScenarioResult {
        index,
        seed,
        det,
        indep: MetricReport::probabilistic(&indep_dist, &gt, &cfg.levels)?,
        sc: MetricReport::probabilistic(&sc_dist, &gt, &cfg.levels)?,
        failed_samples: sc_dist.failed.len() + indep_dist.failed.len(),
    })
}

/// Scores Det, Indep and SC over `cfg.scenarios` seeded scenarios.
pub fn run_compare(cfg: &CompareConfig, seed: u64) -> Result<CompareReport> {
    if cfg.scenarios == 0 {
        return Err(ExperimentError::Config("scenarios must be at least 1".into()));
    }
    let scenarios: Vec<ScenarioResult> = (0..cfg.scenarios)
        .into_par_iter()
        .map(|i| {
            run_scenario(cfg, i, scenario_seed(seed, i)).map_err(|e| ExperimentError::Scenario {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let pick = |f: fn(&ScenarioResult) -> &MetricReport| scenarios.iter().map(f).cloned().collect::<Vec<_>>();
    let table = vec![
        TableRow::aggregate(&cfg.supervision, METHODS[0], &pick(|s| &s.det)),
        TableRow::aggregate(&cfg.supervision, METHODS[1], &pick(|s| &s.indep)),
        TableRow::aggregate(&cfg.supervision, METHODS[2], &pick(|s| &s.sc)),
    ];
    Ok(CompareReport { table, scenarios })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitExperimentConfig {
    pub scenario: ScenarioSpec,
    pub observations: usize,
    pub loss: LossConfig,
    pub fit: FitConfig,
}

impl Default for FitExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec {
                rows: 32,
                cols: 32,
                robot_cell: Some([16, 4]),
                fov: synth::FovSpec {
                    angle_deg: 90.0,
                    range: 2.4,
                    heading_deg: 0.0,
                },
                ..ScenarioSpec::default()
            },
            observations: 200,
            loss: LossConfig {
                ofov_prior_variance: 0.01,
                ..LossConfig::default()
            },
            fit: FitConfig {
                steps: 60,
                ..FitConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitExperimentReport {
    /// Mean over in-view cells of `|fitted var - planted var| / planted var`.
    pub fov_mean_relative_error: f64,
    /// Largest `|fitted var / prior var - 1|` over out-of-view cells.
    pub ofov_max_relative_deviation: f64,
    pub fov_cells: usize,
    pub ofov_cells: usize,
    pub curve: Vec<LossPoint>,
}

pub struct FitExperiment {
    pub planted: GaussianField,
    pub mask: FovMask,
    pub outcome: FitOutcome,
    pub report: FitExperimentReport,
}

/// Draws observations of the planted height field under a fixed field of
/// view, fits a field to them and scores the recovered variances.
pub fn run_fit_experiment(cfg: &FitExperimentConfig, seed: u64) -> Result<FitExperiment> {
    let spec = ScenarioSpec {
        seed,
        ..cfg.scenario.clone()
    };
    let generated = synth::gen_world(&spec)?;
    let planted = generated.fields[&TerrainParam::Height].clone();
    let mask = synth::gen_fov_mask(&spec)?;
    let observations: Vec<(ScalarGrid, FovMask)> = covfield::sample(&planted, seed, cfg.observations)?
        .into_iter()
        .map(|g| (g, mask.clone()))
        .collect();
    let outcome = fit_field(&observations, planted.kernel(), &cfg.loss, &cfg.fit)?;

    let fitted = outcome.field.variance();
    let truth = planted.variance();
    let prior = cfg.loss.ofov_prior_variance;
    let (mut fov_err, mut fov_n, mut ofov_dev, mut ofov_n) = (0.0, 0usize, 0.0f64, 0usize);
    for ((f, t), &inside) in fitted.iter().zip(&truth).zip(mask.cells()) {
        if inside {
            fov_err += (f - t).abs() / t;
            fov_n += 1;
        } else {
            ofov_dev = ofov_dev.max((f / prior - 1.0).abs());
            ofov_n += 1;
        }
    }
    let report = FitExperimentReport {
        fov_mean_relative_error: fov_err / fov_n.max(1) as f64,
        ofov_max_relative_deviation: ofov_dev,
        fov_cells: fov_n,
        ofov_cells: ofov_n,
        curve: outcome.curve.clone(),
    };
    Ok(FitExperiment {
        planted,
        mask,
        outcome,
        report,
    })
}
