//! Monte Carlo trajectory forecasts over sampled worlds.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covfield::{self, FieldError, GaussianField};
use crate::grid::ScalarGrid;
use crate::param::TerrainParam;
use crate::physics::{self, ControlSequence, PhysicsConfig, PhysicsError, RigidBodyModel, RobotState, WorldModelSample};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("at least 2 samples are needed for a variance, got {0}")]
    TooFewSamples(usize),
    #[error("only {survived} rollouts survived; first failure: {first_failure}")]
    TooFewSurvivors { survived: usize, first_failure: String },
    #[error("no source for terrain parameter {0}")]
    MissingParam(TerrainParam),
    #[error("horizon mismatch: forecast has {expected} steps, ground truth has {got}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("variance floor must be positive, got {0}")]
    BadFloor(f64),
    #[error("sample {index} has {got} steps, expected {expected}")]
    RaggedSamples { index: usize, expected: usize, got: usize },
    #[error("samples csv: {0}")]
    Format(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ForecastError> = std::result::Result<T, E>;

/// Where one terrain map comes from when building world samples.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSource {
    Probabilistic(GaussianField),
    Deterministic(ScalarGrid),
}

impl ParamSource {
    pub fn mean(&self) -> &ScalarGrid {
        match self {
            ParamSource::Probabilistic(f) => f.mean(),
            ParamSource::Deterministic(g) => g,
        }
    }
}

/// Per-parameter distributions over the five terrain maps.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldPrior {
    pub sources: BTreeMap<TerrainParam, ParamSource>,
    pub origin: [f64; 2],
}

/// Independent seed for each parameter's draws.
pub fn param_seed(seed: u64, param: TerrainParam) -> u64 {
    seed ^ (param.index() + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn nonnegative(param: TerrainParam) -> bool {
    matches!(param, TerrainParam::Stiffness | TerrainParam::Damping | TerrainParam::Friction)
}

impl WorldPrior {
    fn source(&self, param: TerrainParam) -> Result<&ParamSource> {
        self.sources.get(&param).ok_or(ForecastError::MissingParam(param))
    }

    fn build(&self, mut map: impl FnMut(TerrainParam, &ParamSource) -> Result<ScalarGrid>) -> Result<WorldModelSample> {
        let mut grids = Vec::with_capacity(5);
        for param in TerrainParam::ALL {
            let mut g = map(param, self.source(param)?)?;
            if nonnegative(param) && g.values().iter().any(|v| *v < 0.0) {
                g = g.map(|v| v.max(0.0)).map_err(FieldError::from)?;
            }
            grids.push(g);
        }
        let maps: [ScalarGrid; 5] = grids.try_into().expect("five parameters");
        Ok(WorldModelSample::from_maps(maps, self.origin)?)
    }

    /// World built from every source's mean.
    pub fn mean_world(&self) -> Result<WorldModelSample> {
        self.build(|_, s| Ok(s.mean().clone()))
    }

    /// Draw `index` under `seed`. Probabilistic maps are sampled, deterministic
    /// ones passed through; stiffness, damping and friction are clipped at zero.
    pub fn sample(&self, seed: u64, index: u64) -> Result<WorldModelSample> {
        self.build(|param, s| match s {
            ParamSource::Probabilistic(f) => Ok(covfield::sample_one(f, param_seed(seed, param), index)?),
            ParamSource::Deterministic(g) => Ok(g.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub samples: usize,
    pub variance_floor: f64,
    pub physics: PhysicsConfig,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            physics: PhysicsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSample {
    pub index: usize,
    pub reason: String,
}

/// Per-step, per-axis Gaussian fit to Monte Carlo position samples.
///
/// Step `t` in `0..horizon` describes the position after `t + 1` control
/// intervals; the shared initial state is not included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDistribution {
    pub horizon: usize,
    pub mean: Vec<[f64; 3]>,
    pub variance: Vec<[f64; 3]>,
    pub variance_floor: f64,
    /// True when at least one variance was raised to the floor.
    pub floor_active: bool,
    /// Surviving sample trajectories in increasing sample index.
    #[serde(skip)]
    pub samples: Vec<Vec<[f64; 3]>>,
    pub sample_indices: Vec<usize>,
    pub failed: Vec<FailedSample>,
}

impl TrajectoryDistribution {
    /// Fits the per-(t, d) sample mean and unbiased variance. Values are
    /// reduced in sorted order, so the fit does not depend on sample order.
    pub fn from_samples(samples: Vec<Vec<[f64; 3]>>, variance_floor: f64) -> Result<Self> {
        if !(variance_floor > 0.0 && variance_floor.is_finite()) {
            return Err(ForecastError::BadFloor(variance_floor));
        }
        let m = samples.len();
        if m < 2 {
            return Err(ForecastError::TooFewSamples(m));
        }
        let horizon = samples[0].len();
        for (index, s) in samples.iter().enumerate() {
            if s.len() != horizon {
                return Err(ForecastError::RaggedSamples {
                    index,
                    expected: horizon,
                    got: s.len(),
                });
            }
        }
        let mut mean = vec![[0.0; 3]; horizon];
        let mut variance = vec![[0.0; 3]; horizon];
        let mut floor_active = false;
        let mut column = vec![0.0; m];
        for t in 0..horizon {
            for d in 0..3 {
                for (c, s) in column.iter_mut().zip(&samples) {
                    *c = s[t][d];
                }
                column.sort_by(f64::total_cmp);
                let mu = column.iter().sum::<f64>() / m as f64;
                let var = column.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (m - 1) as f64;
                if var < variance_floor {
                    floor_active = true;
                }
                mean[t][d] = mu;
                variance[t][d] = var.max(variance_floor);
            }
        }
        Ok(Self {
            horizon,
            mean,
            variance,
            variance_floor,
            floor_active,
            sample_indices: (0..m).collect(),
            samples,
            failed: Vec::new(),
        })
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Raw samples as `sample,t,x,y,z` rows, `t` counting control steps from 1.
    pub fn write_samples_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sample,t,x,y,z")?;
        for (idx, s) in self.sample_indices.iter().zip(&self.samples) {
            for (t, p) in s.iter().enumerate() {
                writeln!(w, "{idx},{},{},{},{}", t + 1, p[0], p[1], p[2])?;
            }
        }
        Ok(())
    }
}

/// Reads the `sample,t,x,y,z` format written by
/// [`TrajectoryDistribution::write_samples_csv`], returning samples in the
/// order they first appear. Each sample must list `t = 1, 2, ...` in order.
pub fn read_samples_csv<R: Read>(r: R) -> Result<Vec<Vec<[f64; 3]>>> {
    let mut samples: Vec<Vec<[f64; 3]>> = Vec::new();
    let mut slot: BTreeMap<u64, usize> = BTreeMap::new();
    let mut header_seen = false;
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| ForecastError::Format(format!("line {}: {what}", lineno + 1));
        if !header_seen {
            if line.replace(' ', "") != "sample,t,x,y,z" {
                return Err(bad("expected header sample,t,x,y,z"));
            }
            header_seen = true;
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let idx: u64 = cells[0].parse().map_err(|_| bad("bad sample index"))?;
        let t: usize = cells[1].parse().map_err(|_| bad("bad step"))?;
        let mut p = [0.0; 3];
        for (v, c) in p.iter_mut().zip(&cells[2..]) {
            *v = c.parse().map_err(|_| bad("bad coordinate"))?;
        }
        let next = samples.len();
        let k = *slot.entry(idx).or_insert(next);
        if k == samples.len() {
            samples.push(Vec::new());
        }
        if t != samples[k].len() + 1 {
            return Err(bad(&format!("sample {idx}: expected step {}, got {t}", samples[k].len() + 1)));
        }
        samples[k].push(p);
    }
    if !header_seen {
        return Err(ForecastError::Format("empty file".into()));
    }
    Ok(samples)
}

/// Positions after each control step, dropping the initial state.
pub fn forecast_positions(traj: &physics::Trajectory) -> Vec<[f64; 3]> {
    traj.positions().into_iter().skip(1).collect()
}

/// Samples `cfg.samples` worlds, rolls each out, and fits the per-step
/// Gaussians. Rollouts that fail or leave the map are excluded and listed.
pub fn mc_forecast(
    prior: &WorldPrior,
    state0: &RobotState,
    body: &RigidBodyModel,
    controls: &ControlSequence,
    cfg: &ForecastConfig,
    seed: u64,
) -> Result<TrajectoryDistribution> {
    if cfg.samples < 2 {
        return Err(ForecastError::TooFewSamples(cfg.samples));
    }
    cfg.physics.validate()?;
    controls.validate()?;
    let outcomes: Vec<Result<Vec<[f64; 3]>>> = (0..cfg.samples)
        .into_par_iter()
        .map(|m| {
            let world = prior.sample(seed, m as u64)?;
            let traj = physics::rollout(state0, &world, body, controls, &cfg.physics)?;
            match traj.truncated_at {
                Some(t) => Err(ForecastError::Physics(PhysicsError::World(format!(
                    "left the map at step {t}"
                )))),
                None => Ok(forecast_positions(&traj)),
            }
        })
        .collect();

    let mut samples = Vec::with_capacity(cfg.samples);
    let mut indices = Vec::with_capacity(cfg.samples);
    let mut failed = Vec::new();
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(s) => {
                samples.push(s);
                indices.push(index);
            }
            Err(ForecastError::Physics(e)) => failed.push(FailedSample {
                index,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    if samples.len() < 2 {
        return Err(ForecastError::TooFewSurvivors {
            survived: samples.len(),
            first_failure: failed.first().map(|f| f.reason.clone()).unwrap_or_default(),
        });
    }
    let mut dist = TrajectoryDistribution::from_samples(samples, cfg.variance_floor)?;
    dist.sample_indices = indices;
    dist.failed = failed;
    Ok(dist)
}

/// `sum_t sum_d (gt - mu)^2 / (2 var) + 0.5 ln var`.
pub fn traj_nll(dist: &TrajectoryDistribution, gt: &[[f64; 3]]) -> Result<f64> {
    if gt.len() != dist.horizon {
        return Err(ForecastError::HorizonMismatch {
            expected: dist.horizon,
            got: gt.len(),
        });
    }
    let mut total = 0.0;
    for ((g, mu), var) in gt.iter().zip(&dist.mean).zip(&dist.variance) {
        for d in 0..3 {
            total += (g[d] - mu[d]).powi(2) / (2.0 * var[d]) + 0.5 * var[d].ln();
        }
    }
    Ok(total)
}
