//! Seeded scenario generation: terrain, material maps, planted uncertainty,
//! field-of-view masks, bodies and control scripts.
//!
//! The robot starts at world `(0, 0)` heading along `+x`, at the center of
//! grid cell `robot_cell`.

mod noise;

pub use noise::{fractal, value_noise};

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covfield::{clamp_log_variance, FieldError, GaussianField};
use crate::grid::{gaussian_kernel, GridError, Kernel, ScalarGrid};
use crate::nll::FovMask;
use crate::param::TerrainParam;
use crate::physics::{self, Control, ControlSequence, PhysicsError, RigidBodyModel, RobotState, WorldModelSample};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("scenario file: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerrainStyle {
    Flat,
    Ramp,
    Bumps,
    Ridged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn lerp(&self, t: f64) -> f64 {
        self.min + (self.max - self.min) * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FovSpec {
    /// Full opening angle in degrees.
    pub angle_deg: f64,
    /// Meters.
    pub range: f64,
    /// Boresight direction in degrees from `+x`.
    pub heading_deg: f64,
}

impl Default for FovSpec {
    fn default() -> Self {
        Self {
            angle_deg: 90.0,
            range: 4.0,
            heading_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BodySpec {
    pub length: f64,
    pub width: f64,
    pub nx: usize,
    pub ny: usize,
    pub mass: f64,
}

impl Default for BodySpec {
    fn default() -> Self {
        Self {
            length: 0.8,
            width: 0.5,
            nx: 3,
            ny: 2,
            mass: 40.0,
        }
    }
}

/// Forward speed and yaw rate `yaw_rate + weave_amplitude sin(2 pi t / weave_period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlScript {
    pub speed: f64,
    pub yaw_rate: f64,
    pub weave_amplitude: f64,
    pub weave_period: f64,
}

impl Default for ControlScript {
    fn default() -> Self {
        Self {
            speed: 0.8,
            yaw_rate: 0.0,
            weave_amplitude: 0.3,
            weave_period: 3.0,
        }
    }
}

/// Planted uncertainty of the supervised height maps: the standard deviation
/// grows linearly with distance from the robot, from `near_std` to `far_std`
/// at the farthest cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintySpec {
    pub near_std: f64,
    pub far_std: f64,
    pub kernel_size: usize,
    pub kernel_bandwidth: f64,
}

impl Default for UncertaintySpec {
    fn default() -> Self {
        Self {
            near_std: 0.02,
            far_std: 0.08,
            kernel_size: 5,
            kernel_bandwidth: 0.5,
        }
    }
}

impl UncertaintySpec {
    pub fn kernel(&self) -> Result<Kernel> {
        Ok(gaussian_kernel(self.kernel_size, self.kernel_bandwidth)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub style: TerrainStyle,
    /// Height gain per meter along `+x` for the ramp style.
    pub ramp_slope: f64,
    /// Peak height deviation of the bumps and ridged styles, meters.
    pub relief: f64,
    /// Largest noise feature size, meters.
    pub wavelength: f64,
    pub octaves: u32,
    /// Vegetation layered on top of the support surface in `geom`, meters.
    pub vegetation: f64,
    pub stiffness: Range,
    pub damping: Range,
    pub friction: Range,
    /// `[row, col]`; defaults to the middle row, a quarter of the way across.
    pub robot_cell: Option<[usize; 2]>,
    pub fov: FovSpec,
    pub body: BodySpec,
    pub controls: ControlScript,
    pub horizon: usize,
    pub dt: f64,
    pub uncertainty: UncertaintySpec,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            rows: 64,
            cols: 64,
            cell_size: 0.1,
            style: TerrainStyle::Bumps,
            ramp_slope: 0.1,
            relief: 0.15,
            wavelength: 2.0,
            octaves: 3,
            vegetation: 0.0,
            stiffness: Range::new(1.5e4, 4e4),
            damping: Range::new(800.0, 1500.0),
            friction: Range::new(0.5, 1.0),
            robot_cell: None,
            fov: FovSpec::default(),
            body: BodySpec::default(),
            controls: ControlScript::default(),
            horizon: 40,
            dt: 0.1,
            uncertainty: UncertaintySpec::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.rows < 2 || self.cols < 2 {
            return bad(format!("grid must be at least 2x2, got {}x{}", self.rows, self.cols));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return bad(format!("cell_size must be positive, got {}", self.cell_size));
        }
        for (name, r, strict) in [
            ("stiffness", self.stiffness, true),
            ("damping", self.damping, false),
            ("friction", self.friction, false),
        ] {
            let low_ok = if strict { r.min > 0.0 } else { r.min >= 0.0 };
            if !(low_ok && r.max >= r.min && r.max.is_finite()) {
                return bad(format!("{name} range [{}, {}] is not physically valid", r.min, r.max));
            }
        }
        if !(self.fov.angle_deg > 0.0 && self.fov.angle_deg <= 360.0) {
            return bad(format!("fov angle must lie in (0, 360], got {}", self.fov.angle_deg));
        }
        if !(self.fov.range > 0.0 && self.fov.range.is_finite()) {
            return bad("fov range must be positive".into());
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.wavelength > 0.0 && self.relief >= 0.0 && self.vegetation >= 0.0) {
            return bad("wavelength must be positive, relief and vegetation non-negative".into());
        }
        let u = &self.uncertainty;
        if !(u.near_std > 0.0 && u.far_std > 0.0) {
            return bad("uncertainty standard deviations must be positive".into());
        }
        let [r, c] = self.robot_cell();
        if r >= self.rows || c >= self.cols {
            return bad(format!("robot cell ({r}, {c}) lies outside the grid"));
        }
        Ok(())
    }

    pub fn robot_cell(&self) -> [usize; 2] {
        self.robot_cell.unwrap_or([self.rows / 2, self.cols / 4])
    }

    /// World coordinates of the grid corner, placing the robot cell's center at the origin.
    pub fn origin(&self) -> [f64; 2] {
        let [r, c] = self.robot_cell();
        [-(c as f64 + 0.5) * self.cell_size, -(r as f64 + 0.5) * self.cell_size]
    }

    /// World `(x, y)` of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let o = self.origin();
        (o[0] + (col as f64 + 0.5) * self.cell_size, o[1] + (row as f64 + 0.5) * self.cell_size)
    }

    fn grid(&self, f: impl FnMut(usize, usize) -> f64) -> Result<ScalarGrid> {
        Ok(ScalarGrid::from_fn(self.rows, self.cols, self.cell_size, f)?)
    }

    fn noise01(&self, stream: u64, x: f64, y: f64) -> f64 {
        0.5 * (fractal(self.seed.wrapping_mul(31).wrapping_add(stream), x / self.wavelength, y / self.wavelength, self.octaves) + 1.0)
    }

    pub fn body(&self) -> Result<RigidBodyModel> {
        let b = &self.body;
        Ok(RigidBodyModel::rectangular(b.length, b.width, b.nx, b.ny, b.mass)?)
    }

    pub fn controls(&self) -> Result<ControlSequence> {
        let c = &self.controls;
        let steps = (0..self.horizon)
            .map(|t| {
                let time = t as f64 * self.dt;
                let weave = if c.weave_period > 0.0 {
                    c.weave_amplitude * (2.0 * std::f64::consts::PI * time / c.weave_period).sin()
                } else {
                    0.0
                };
                Control {
                    v_c: [c.speed, 0.0, 0.0],
                    omega_c: [0.0, 0.0, c.yaw_rate + weave],
                }
            })
            .collect();
        let seq = ControlSequence { steps, dt: self.dt };
        seq.validate()?;
        Ok(seq)
    }

    /// At rest at the origin, just above the support surface of `world`.
    pub fn initial_state(&self, world: &WorldModelSample) -> Result<RobotState> {
        let (h, _) = physics::terrain_sample(world.height(), world.origin(), 0.0, 0.0)?;
        Ok(RobotState::at_rest(Vector3::new(0.0, 0.0, h + 0.01)))
    }
}

/// Ground truth for one scenario.
#[derive(Debug, Clone)]
pub struct GeneratedWorld {
    pub truth: WorldModelSample,
    /// Generating fields of the supervised maps (geom and height): mean equal
    /// to the truth map, planted variance growing with range.
    pub fields: BTreeMap<TerrainParam, GaussianField>,
}

pub fn gen_world(spec: &ScenarioSpec) -> Result<GeneratedWorld> {
    spec.validate()?;
    let height = spec.grid(|r, c| {
        let (x, y) = spec.cell_center(r, c);
        match spec.style {
            TerrainStyle::Flat => 0.0,
            TerrainStyle::Ramp => spec.ramp_slope * x,
            TerrainStyle::Bumps => spec.relief * (2.0 * spec.noise01(0, x, y) - 1.0),
            TerrainStyle::Ridged => spec.relief * (1.0 - (2.0 * spec.noise01(0, x, y) - 1.0).abs()),
        }
    })?;
    let geom = if spec.vegetation > 0.0 {
        let veg: Vec<f64> = (0..spec.rows * spec.cols)
            .map(|i| {
                let (x, y) = spec.cell_center(i / spec.cols, i % spec.cols);
                spec.vegetation * spec.noise01(1, 2.0 * x, 2.0 * y)
            })
            .collect();
        height.with_values(height.values().iter().zip(&veg).map(|(h, v)| h + v).collect())?
    } else {
        height.clone()
    };
    let material = |stream: u64, range: Range| {
        spec.grid(|r, c| {
            let (x, y) = spec.cell_center(r, c);
            range.lerp(spec.noise01(stream, x, y))
        })
    };
    let truth = WorldModelSample::new(
        geom.clone(),
        height.clone(),
        material(2, spec.stiffness)?,
        material(3, spec.damping)?,
        material(4, spec.friction)?,
        spec.origin(),
    )?;

    let logv = planted_log_variance(spec)?;
    let kernel = spec.uncertainty.kernel()?;
    let mut fields = BTreeMap::new();
    fields.insert(TerrainParam::Geom, GaussianField::new(geom, logv.clone(), kernel.clone())?);
    fields.insert(TerrainParam::Height, GaussianField::new(height, logv, kernel)?);
    Ok(GeneratedWorld { truth, fields })
}

/// `log sigma^2` with `sigma` growing linearly in distance from the robot.
pub fn planted_log_variance(spec: &ScenarioSpec) -> Result<ScalarGrid> {
    let u = &spec.uncertainty;
    let dist = |r: usize, c: usize| {
        let (x, y) = spec.cell_center(r, c);
        x.hypot(y)
    };
    let far = [(0, 0), (0, spec.cols - 1), (spec.rows - 1, 0), (spec.rows - 1, spec.cols - 1)]
        .iter()
        .map(|&(r, c)| dist(r, c))
        .fold(0.0, f64::max);
    spec.grid(|r, c| {
        let std = u.near_std + (u.far_std - u.near_std) * dist(r, c) / far;
        clamp_log_variance(2.0 * std.ln())
    })
}

/// Cells whose centers lie within the wedge of `spec.fov` anchored at the robot cell.
pub fn gen_fov_mask(spec: &ScenarioSpec) -> Result<FovMask> {
    spec.validate()?;
    let [r0, c0] = spec.robot_cell();
    let half = spec.fov.angle_deg.to_radians() / 2.0;
    let heading = spec.fov.heading_deg.to_radians();
    let range = spec.fov.range;
    let cs = spec.cell_size;
    Ok(FovMask::from_fn(spec.rows, spec.cols, |r, c| {
        let dx = (c as f64 - c0 as f64) * cs;
        let dy = (r as f64 - r0 as f64) * cs;
        if dx == 0.0 && dy == 0.0 {
            return true;
        }
        if dx.hypot(dy) > range {
            return false;
        }
        if spec.fov.angle_deg >= 360.0 {
            return true;
        }
        let mut off = dy.atan2(dx) - heading;
        off = (off + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
        off.abs() <= half
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(style: TerrainStyle) -> ScenarioSpec {
        ScenarioSpec {
            style,
            seed: 17,
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn flat_style_is_zero() {
        let w = gen_world(&spec(TerrainStyle::Flat)).unwrap();
        assert!(w.truth.geom().values().iter().all(|v| *v == 0.0));
        assert!(w.truth.height().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ramp_style_is_linear_in_x() {
        let s = ScenarioSpec {
            ramp_slope: 0.1,
            ..spec(TerrainStyle::Ramp)
        };
        let w = gen_world(&s).unwrap();
        for r in 0..s.rows {
            for c in 0..s.cols {
                let (x, _) = s.cell_center(r, c);
                assert!((w.truth.geom().get(r, c) - 0.1 * x).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_world() {
        for style in [TerrainStyle::Bumps, TerrainStyle::Ridged] {
            let a = gen_world(&spec(style)).unwrap();
            let b = gen_world(&spec(style)).unwrap();
            assert_eq!(a.truth, b.truth);
            assert_eq!(a.fields, b.fields);
            let c = gen_world(&ScenarioSpec { seed: 18, ..spec(style) }).unwrap();
            assert_ne!(a.truth, c.truth);
        }
    }

    #[test]
    fn planted_variance_grows_with_range() {
        let s = spec(TerrainStyle::Bumps);
        let w = gen_world(&s).unwrap();
        let v = w.fields[&TerrainParam::Height].variance();
        let [r0, c0] = s.robot_cell();
        let near = v[r0 * s.cols + c0];
        let far = v[s.cols - 1];
        assert!((near.sqrt() - s.uncertainty.near_std).abs() < 1e-12);
        assert!(far > 4.0 * near);
    }

    #[test]
    fn full_circle_with_long_range_covers_grid() {
        let s = ScenarioSpec {
            fov: FovSpec {
                angle_deg: 360.0,
                range: 100.0,
                heading_deg: 0.0,
            },
            ..ScenarioSpec::default()
        };
        assert_eq!(gen_fov_mask(&s).unwrap().count(), s.rows * s.cols);
    }

    #[test]
    fn sliver_wedge_follows_boresight() {
        let s = ScenarioSpec {
            fov: FovSpec {
                angle_deg: 1e-6,
                range: 100.0,
                heading_deg: 0.0,
            },
            ..ScenarioSpec::default()
        };
        let mask = gen_fov_mask(&s).unwrap();
        let [r0, c0] = s.robot_cell();
        for r in 0..s.rows {
            for c in 0..s.cols {
                assert_eq!(mask.get(r, c), r == r0 && c >= c0, "({r}, {c})");
            }
        }
    }

    #[test]
    fn wedge_area_matches_angle() {
        for angle in [30.0, 90.0, 180.0, 270.0] {
            let s = ScenarioSpec {
                rows: 128,
                cols: 128,
                robot_cell: Some([64, 64]),
                fov: FovSpec {
                    angle_deg: angle,
                    range: 6.0,
                    heading_deg: 20.0,
                },
                ..ScenarioSpec::default()
            };
            let wedge = gen_fov_mask(&s).unwrap().count() as f64;
            let disk = gen_fov_mask(&ScenarioSpec {
                fov: FovSpec { angle_deg: 360.0, ..s.fov },
                ..s.clone()
            })
            .unwrap()
            .count() as f64;
            let frac = wedge / disk;
            assert!((frac / (angle / 360.0) - 1.0).abs() <= 0.05, "{angle}: {frac}");
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let base = ScenarioSpec::default();
        for bad in [
            ScenarioSpec { horizon: 0, ..base.clone() },
            ScenarioSpec { stiffness: Range::new(0.0, 1.0), ..base.clone() },
            ScenarioSpec { friction: Range::new(1.0, 0.5), ..base.clone() },
            ScenarioSpec { fov: FovSpec { angle_deg: 0.0, ..base.fov }, ..base.clone() },
            ScenarioSpec { robot_cell: Some([64, 0]), ..base.clone() },
        ] {
            assert!(matches!(gen_world(&bad), Err(SynthError::Invalid(_))));
        }
    }

    #[test]
    fn spec_json_round_trip_with_defaults() {
        let s: ScenarioSpec = serde_json::from_str(r#"{"seed": 4, "style": "ridged"}"#).unwrap();
        assert_eq!(s.seed, 4);
        assert_eq!(s.style, TerrainStyle::Ridged);
        assert_eq!(s.rows, ScenarioSpec::default().rows);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<ScenarioSpec>(&text).unwrap(), s);
    }

    #[test]
    fn default_scenario_rolls_out_on_map() {
        let s = spec(TerrainStyle::Bumps);
        let w = gen_world(&s).unwrap();
        let traj = physics::rollout(
            &s.initial_state(&w.truth).unwrap(),
            &w.truth,
            &s.body().unwrap(),
            &s.controls().unwrap(),
            &physics::PhysicsConfig::default(),
        )
        .unwrap();
        assert_eq!(traj.truncated_at, None);
        assert_eq!(traj.horizon(), s.horizon);
        assert!(traj.states.last().unwrap().x.x > 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn materials_stay_in_declared_ranges(seed in any::<u64>(), style in 0usize..4) {
            let style = [TerrainStyle::Flat, TerrainStyle::Ramp, TerrainStyle::Bumps, TerrainStyle::Ridged][style];
            let s = ScenarioSpec { seed, style, rows: 24, cols: 24, ..ScenarioSpec::default() };
            let w = gen_world(&s).unwrap();
            for (g, r) in [(w.truth.stiffness(), s.stiffness), (w.truth.damping(), s.damping), (w.truth.friction(), s.friction)] {
                prop_assert!(g.values().iter().all(|v| *v >= r.min && *v <= r.max));
            }
        }
    }
}
