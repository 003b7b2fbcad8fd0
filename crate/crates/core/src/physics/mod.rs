//! Mass-point rigid body on heightmap terrain.
//!
//! The body is a set of point masses rigidly attached to a frame whose origin
//! is the center of mass. Each point feels gravity and, when it is at or below
//! the support height, a spring-damper normal force plus a logistic traction
//! force. The state evolves by
//!
//! ```text
//! x' = v,   v' = (1/M) sum f_i,   R' = [w] R,   w' = J_w^{-1} sum r_i x f_i
//! ```
//!
//! with `r_i = R p_i` and `J_w = R J R^T` the world-frame inertia.

mod io;
mod world;

pub use io::{read_trajectory_csv, write_trajectory_csv};
pub use world::{terrain_sample, Bilinear, WorldModelSample};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridError;

pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("query point ({x:.4}, {y:.4}) lies outside the grid extent")]
    OutOfExtent { x: f64, y: f64 },
    #[error("simulation blow-up at step {step}: {detail}")]
    BlowUp { step: usize, detail: String },
    #[error("invalid body: {0}")]
    Body(String),
    #[error("invalid world: {0}")]
    World(String),
    #[error("invalid controls: {0}")]
    Controls(String),
    #[error("invalid physics config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("malformed trajectory file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PhysicsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub x: Vector3<f64>,
    /// Body-to-world rotation.
    pub r: Matrix3<f64>,
    pub v: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl RobotState {
    pub fn at_rest(x: Vector3<f64>) -> Self {
        Self {
            x,
            r: Matrix3::identity(),
            v: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.r.iter()).chain(self.v.iter()).chain(self.omega.iter()).all(|v| v.is_finite())
    }

    /// `||R^T R - I||_F`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.r.transpose() * self.r - Matrix3::identity()).norm()
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.r)
    }
}

/// Nearest rotation to `m` in the Frobenius norm.
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (mut u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    if (u * v_t).determinant() < 0.0 {
        let mut col = u.column_mut(2);
        col *= -1.0;
    }
    u * v_t
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidBodyModel {
    points: Vec<(Vector3<f64>, f64)>,
    mass: f64,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
    gravity: Vector3<f64>,
}

impl RigidBodyModel {
    /// Body with an explicitly supplied inertia tensor. Point positions are
    /// taken relative to the center of mass, which must be at the origin.
    pub fn with_inertia(points: Vec<(Vector3<f64>, f64)>, inertia: Matrix3<f64>, gravity: Vector3<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(PhysicsError::Body("at least one mass point is required".into()));
        }
        if points.iter().any(|(p, m)| !(*m > 0.0 && m.is_finite()) || p.iter().any(|c| !c.is_finite())) {
            return Err(PhysicsError::Body("point masses must be positive and positions finite".into()));
        }
        if gravity.iter().any(|g| !g.is_finite()) {
            return Err(PhysicsError::Body("gravity must be finite".into()));
        }
        let mass: f64 = points.iter().map(|(_, m)| m).sum();
        let com = points.iter().fold(Vector3::zeros(), |acc, (p, m)| acc + p * *m) / mass;
        let extent = points.iter().map(|(p, _)| p.norm()).fold(1.0, f64::max);
        if com.norm() > 1e-9 * extent {
            return Err(PhysicsError::Body(format!("center of mass {com:?} is not at the body origin")));
        }
        if (inertia - inertia.transpose()).norm() > 1e-9 * inertia.norm() {
            return Err(PhysicsError::Body("inertia must be symmetric".into()));
        }
        let inertia_inv = inertia
            .cholesky()
            .ok_or_else(|| PhysicsError::Body("inertia must be positive definite".into()))?
            .inverse();
        Ok(Self {
            points,
            mass,
            inertia,
            inertia_inv,
            gravity,
        })
    }

    /// Body whose inertia is computed from the points, after shifting them so
    /// their center of mass sits at the origin.
    pub fn from_points(points: Vec<(Vector3<f64>, f64)>, gravity: Vector3<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(PhysicsError::Body("at least one mass point is required".into()));
        }
        let mass: f64 = points.iter().map(|(_, m)| m).sum();
        let com = points.iter().fold(Vector3::zeros(), |acc, (p, m)| acc + p * *m) / mass;
        let points: Vec<_> = points.into_iter().map(|(p, m)| (p - com, m)).collect();
        let inertia = points.iter().fold(Matrix3::zeros(), |acc, (p, m)| {
            acc + (Matrix3::identity() * p.norm_squared() - p * p.transpose()) * *m
        });
        Self::with_inertia(points, inertia, gravity)
    }

    /// `nx x ny` uniform point masses spread over a `length x width`
    /// footprint in the body x-y plane.
    pub fn rectangular(length: f64, width: f64, nx: usize, ny: usize, total_mass: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(PhysicsError::Body("a rectangular layout needs at least 2x2 points".into()));
        }
        if !(length > 0.0 && width > 0.0) {
            return Err(PhysicsError::Body("footprint must have positive length and width".into()));
        }
        let m = total_mass / (nx * ny) as f64;
        let mut points = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                let px = -0.5 * length + length * i as f64 / (nx - 1) as f64;
                let py = -0.5 * width + width * j as f64 / (ny - 1) as f64;
                points.push((Vector3::new(px, py, 0.0), m));
            }
        }
        Self::from_points(points, Vector3::new(0.0, 0.0, -STANDARD_GRAVITY))
    }

    pub fn points(&self) -> &[(Vector3<f64>, f64)] {
        &self.points
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn inertia(&self) -> &Matrix3<f64> {
        &self.inertia
    }

    pub fn gravity(&self) -> &Vector3<f64> {
        &self.gravity
    }

    pub fn gravity_magnitude(&self) -> f64 {
        self.gravity.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    /// Commanded linear velocity, body frame.
    pub v_c: [f64; 3],
    /// Commanded angular velocity, body frame.
    pub omega_c: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    pub steps: Vec<Control>,
    pub dt: f64,
}

impl ControlSequence {
    pub fn constant(control: Control, horizon: usize, dt: f64) -> Result<Self> {
        let seq = Self {
            steps: vec![control; horizon],
            dt,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(PhysicsError::Controls(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps.iter().any(|c| c.v_c.iter().chain(&c.omega_c).any(|v| !v.is_finite())) {
            return Err(PhysicsError::Controls("commands must be finite".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Kick-drift-kick velocity Verlet; exact for constant forces.
    #[default]
    Leapfrog,
    SemiImplicitEuler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    /// Largest integration step; each control interval is split evenly.
    pub dt: f64,
    pub integrator: Integrator,
    /// Slope of the logistic traction law, s/m.
    pub kappa: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            integrator: Integrator::Leapfrog,
            kappa: 10.0,
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(PhysicsError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(PhysicsError::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        Ok(())
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-point terrain properties at the point's current position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactPatch {
    pub height: f64,
    pub normal: Vector3<f64>,
    pub stiffness: f64,
    pub damping: f64,
    pub friction: f64,
}

impl ContactPatch {
    pub fn lookup(world: &WorldModelSample, p: &Vector3<f64>) -> Result<Self> {
        let (height, normal) = world.height_and_normal(p.x, p.y)?;
        let w = world.weights(p.x, p.y)?;
        Ok(Self {
            height,
            normal,
            stiffness: w.apply(world.stiffness().values()),
            damping: w.apply(world.damping().values()),
            friction: w.apply(world.friction().values()),
        })
    }
}

/// Net world-frame force on one mass point.
///
/// `p` and `p_dot` are the point's world position and velocity, `r` the body
/// rotation, `u` the commanded forward speed of this point.
#[allow(clippy::too_many_arguments)]
pub fn contact_force(
    p: &Vector3<f64>,
    p_dot: &Vector3<f64>,
    mass: f64,
    patch: &ContactPatch,
    r: &Matrix3<f64>,
    u: f64,
    gravity: &Vector3<f64>,
    kappa: f64,
) -> Vector3<f64> {
    let mut f = gravity * mass;
    if p.z <= patch.height {
        let n = patch.normal;
        f += n * (patch.stiffness * (patch.height - p.z)) - n * (patch.damping * p_dot.dot(&n));
        let body_v = r.transpose() * p_dot;
        let scale = patch.friction * mass * gravity.norm();
        let f_long = scale * (logistic(kappa * (u - body_v.x)) - 0.5);
        let f_lat = scale * (logistic(-kappa * body_v.y) - 0.5);
        f += r * Vector3::new(f_long, f_lat, 0.0);
    }
    f
}

/// Time derivative of `(v, w)` at a state.
#[allow(clippy::too_many_arguments)]
fn accelerations(
    x: &Vector3<f64>,
    r: &Matrix3<f64>,
    v: &Vector3<f64>,
    omega: &Vector3<f64>,
    world: &WorldModelSample,
    body: &RigidBodyModel,
    control: &Control,
    kappa: f64,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if x.iter().chain(r.iter()).chain(v.iter()).chain(omega.iter()).any(|c| !c.is_finite()) {
        return Err(PhysicsError::BlowUp {
            step: 0,
            detail: format!("non-finite intermediate state x = {:?}, v = {:?}", x.as_slice(), v.as_slice()),
        });
    }
    let mut force = Vector3::zeros();
    let mut torque = Vector3::zeros();
    for (p_body, m) in &body.points {
        let arm = r * p_body;
        let p = x + arm;
        let p_dot = v + omega.cross(&arm);
        let patch = ContactPatch::lookup(world, &p)?;
        let u = control.v_c[0] - control.omega_c[2] * p_body.y;
        let f = contact_force(&p, &p_dot, *m, &patch, r, u, &body.gravity, kappa);
        force += f;
        torque += arm.cross(&f);
    }
    let inv_world = r * body.inertia_inv * r.transpose();
    Ok((force / body.mass, inv_world * torque))
}

fn rotate(r: &Matrix3<f64>, omega: &Vector3<f64>, dt: f64) -> Matrix3<f64> {
    project_to_rotation(&(Rotation3::new(omega * dt).into_inner() * r))
}

/// Advances the state by `dt` with the configured integrator.
pub fn step(
    state: &RobotState,
    world: &WorldModelSample,
    body: &RigidBodyModel,
    control: &Control,
    dt: f64,
    cfg: &PhysicsConfig,
) -> Result<RobotState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(PhysicsError::Config(format!("dt must be positive, got {dt}")));
    }
    let acc = |x: &Vector3<f64>, r: &Matrix3<f64>, v: &Vector3<f64>, w: &Vector3<f64>| {
        accelerations(x, r, v, w, world, body, control, cfg.kappa)
    };
    let s = state;
    let next = match cfg.integrator {
        Integrator::SemiImplicitEuler => {
            let (a, alpha) = acc(&s.x, &s.r, &s.v, &s.omega)?;
            let v = s.v + a * dt;
            let omega = s.omega + alpha * dt;
            RobotState {
                x: s.x + v * dt,
                r: rotate(&s.r, &omega, dt),
                v,
                omega,
            }
        }
        Integrator::Leapfrog => {
            let (a0, alpha0) = acc(&s.x, &s.r, &s.v, &s.omega)?;
            let v_half = s.v + a0 * (0.5 * dt);
            let w_half = s.omega + alpha0 * (0.5 * dt);
            let x = s.x + v_half * dt;
            let r = rotate(&s.r, &w_half, dt);
            let (a1, alpha1) = acc(&x, &r, &v_half, &w_half)?;
            RobotState {
                x,
                r,
                v: v_half + a1 * (0.5 * dt),
                omega: w_half + alpha1 * (0.5 * dt),
            }
        }
        Integrator::Rk4 => {
            let deriv = |x: &Vector3<f64>, r: &Matrix3<f64>, v: &Vector3<f64>, w: &Vector3<f64>| {
                acc(x, r, v, w).map(|(a, alpha)| (*v, skew(w) * r, a, alpha))
            };
            let k1 = deriv(&s.x, &s.r, &s.v, &s.omega)?;
            let h = 0.5 * dt;
            let k2 = deriv(&(s.x + k1.0 * h), &(s.r + k1.1 * h), &(s.v + k1.2 * h), &(s.omega + k1.3 * h))?;
            let k3 = deriv(&(s.x + k2.0 * h), &(s.r + k2.1 * h), &(s.v + k2.2 * h), &(s.omega + k2.3 * h))?;
            let k4 = deriv(&(s.x + k3.0 * dt), &(s.r + k3.1 * dt), &(s.v + k3.2 * dt), &(s.omega + k3.3 * dt))?;
            let c = dt / 6.0;
            RobotState {
                x: s.x + (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * c,
                r: project_to_rotation(&(s.r + (k1.1 + k2.1 * 2.0 + k3.1 * 2.0 + k4.1) * c)),
                v: s.v + (k1.2 + k2.2 * 2.0 + k3.2 * 2.0 + k4.2) * c,
                omega: s.omega + (k1.3 + k2.3 * 2.0 + k3.3 * 2.0 + k4.3) * c,
            }
        }
    };
    if !next.is_finite() {
        return Err(PhysicsError::BlowUp {
            step: 0,
            detail: format!("non-finite state after dt = {dt} from x = {:?}, v = {:?}", s.x.as_slice(), s.v.as_slice()),
        });
    }
    Ok(next)
}

/// States at control boundaries: `states[0]` is the initial state and
/// `states[t]` the state after `t` control intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<RobotState>,
    /// Control step at which a mass point left the map, ending the rollout.
    pub truncated_at: Option<usize>,
}

impl Trajectory {
    /// Number of control steps simulated.
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.states.iter().map(|s| [s.x.x, s.x.y, s.x.z]).collect()
    }
}

/// Integrates through every control interval, splitting each into the fewest
/// equal substeps no longer than `cfg.dt`.
pub fn rollout(
    state0: &RobotState,
    world: &WorldModelSample,
    body: &RigidBodyModel,
    controls: &ControlSequence,
    cfg: &PhysicsConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    controls.validate()?;
    let substeps = (controls.dt / cfg.dt - 1e-9).ceil().max(1.0) as usize;
    let h = controls.dt / substeps as f64;
    let mut states = Vec::with_capacity(controls.horizon() + 1);
    states.push(*state0);
    let mut s = *state0;
    for (t, control) in controls.steps.iter().enumerate() {
        for _ in 0..substeps {
            s = match step(&s, world, body, control, h, cfg) {
                Ok(next) => next,
                Err(PhysicsError::OutOfExtent { .. }) => {
                    return Ok(Trajectory {
                        dt: controls.dt,
                        states,
                        truncated_at: Some(t + 1),
                    })
                }
                Err(PhysicsError::BlowUp { detail, .. }) => return Err(PhysicsError::BlowUp { step: t + 1, detail }),
                Err(e) => return Err(e),
            };
        }
        states.push(s);
    }
    Ok(Trajectory {
        dt: controls.dt,
        states,
        truncated_at: None,
    })
}

/// Kinetic, gravitational and elastic energy of the body on `world`.
pub fn mechanical_energy(state: &RobotState, world: &WorldModelSample, body: &RigidBodyModel) -> Result<f64> {
    let j_world = state.r * body.inertia * state.r.transpose();
    let mut e = 0.5 * body.mass * state.v.norm_squared() + 0.5 * state.omega.dot(&(j_world * state.omega));
    for (p_body, m) in &body.points {
        let p = state.x + state.r * p_body;
        e -= m * body.gravity.dot(&p);
        let patch = ContactPatch::lookup(world, &p)?;
        if p.z <= patch.height {
            e += 0.5 * patch.stiffness * (patch.height - p.z).powi(2);
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests;
