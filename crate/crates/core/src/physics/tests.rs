use super::*;
use crate::grid::ScalarGrid;
use proptest::prelude::*;

const G: f64 = STANDARD_GRAVITY;

fn flat(k: f64, d: f64, mu: f64) -> WorldModelSample {
    WorldModelSample::flat(40, 40, 0.1, [-2.0, -2.0], k, d, mu).unwrap()
}

fn point_body(m: f64) -> RigidBodyModel {
    RigidBodyModel::with_inertia(vec![(Vector3::zeros(), m)], Matrix3::identity(), Vector3::new(0.0, 0.0, -G)).unwrap()
}

fn box_body() -> RigidBodyModel {
    RigidBodyModel::rectangular(0.8, 0.5, 2, 2, 40.0).unwrap()
}

fn world_with_height(height: ScalarGrid, k: f64, d: f64, mu: f64) -> WorldModelSample {
    let (rows, cols) = height.shape();
    let c = height.cell_size();
    WorldModelSample::new(
        height.clone(),
        height,
        ScalarGrid::filled(rows, cols, c, k).unwrap(),
        ScalarGrid::filled(rows, cols, c, d).unwrap(),
        ScalarGrid::filled(rows, cols, c, mu).unwrap(),
        [-2.0, -2.0],
    )
    .unwrap()
}

fn still(horizon: usize, dt: f64) -> ControlSequence {
    ControlSequence::constant(Control::default(), horizon, dt).unwrap()
}

fn cfg(dt: f64) -> PhysicsConfig {
    PhysicsConfig {
        dt,
        ..PhysicsConfig::default()
    }
}

#[test]
fn flat_grid_samples_constant_and_vertical_normal() {
    let g = ScalarGrid::filled(5, 7, 0.5, 1.25).unwrap();
    for (x, y) in [(0.0, 0.0), (0.3, 2.4), (3.49, 1.1)] {
        let (v, n) = terrain_sample(&g, [0.0, 0.0], x, y).unwrap();
        assert_eq!(v, 1.25);
        assert_eq!(n, Vector3::new(0.0, 0.0, 1.0));
    }
}

#[test]
fn ramp_normal_matches_plane_gradient() {
    let alpha = 0.3;
    let origin = [-1.0, 0.5];
    let g = ScalarGrid::from_fn(10, 10, 0.2, |_, c| alpha * (origin[0] + (c as f64 + 0.5) * 0.2)).unwrap();
    let (v, n) = terrain_sample(&g, origin, 0.05, 1.4).unwrap();
    assert!((v - alpha * 0.05).abs() < 1e-12);
    let expected = Vector3::new(-alpha, 0.0, 1.0).normalize();
    assert!((n - expected).norm() < 1e-12);
}

#[test]
fn cell_center_query_returns_cell_value() {
    let g = ScalarGrid::from_fn(4, 6, 0.5, |r, c| (r * 6 + c) as f64).unwrap();
    for r in 0..4 {
        for c in 0..6 {
            let (v, _) = terrain_sample(&g, [1.0, 2.0], 1.0 + (c as f64 + 0.5) * 0.5, 2.0 + (r as f64 + 0.5) * 0.5).unwrap();
            assert!((v - g.get(r, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn out_of_extent_query_names_coordinate() {
    let g = ScalarGrid::zeros(4, 4, 1.0).unwrap();
    let err = terrain_sample(&g, [0.0, 0.0], 4.5, 1.0).unwrap_err();
    assert!(matches!(err, PhysicsError::OutOfExtent { x, .. } if x == 4.5));
    assert!(err.to_string().contains("4.5"));
}

fn patch(height: f64, k: f64, d: f64, mu: f64) -> ContactPatch {
    ContactPatch {
        height,
        normal: Vector3::z(),
        stiffness: k,
        damping: d,
        friction: mu,
    }
}

#[test]
fn no_contact_feels_only_gravity() {
    let gravity = Vector3::new(0.0, 0.0, -G);
    let f = contact_force(
        &Vector3::new(0.0, 0.0, 0.1),
        &Vector3::new(1.0, 0.0, 0.0),
        2.0,
        &patch(0.0, 1e4, 10.0, 1.0),
        &Matrix3::identity(),
        1.0,
        &gravity,
        10.0,
    );
    assert_eq!(f, Vector3::new(0.0, 0.0, -2.0 * G));
}

#[test]
fn static_penetration_adds_spring_force() {
    let gravity = Vector3::new(0.0, 0.0, -G);
    let delta = 0.01;
    let f = contact_force(
        &Vector3::new(0.0, 0.0, -delta),
        &Vector3::zeros(),
        3.0,
        &patch(0.0, 5e3, 100.0, 0.0),
        &Matrix3::identity(),
        0.0,
        &gravity,
        10.0,
    );
    assert!((f - Vector3::new(0.0, 0.0, -3.0 * G + 5e3 * delta)).norm() < 1e-12);
}

#[test]
fn matched_speed_gives_zero_traction() {
    let gravity = Vector3::new(0.0, 0.0, -G);
    let r = Rotation3::from_euler_angles(0.0, 0.0, 0.8).into_inner();
    let v_body = Vector3::new(0.7, 0.0, 0.0);
    let f = contact_force(&Vector3::zeros(), &(r * v_body), 1.0, &patch(0.0, 0.0, 0.0, 0.9), &r, 0.7, &gravity, 10.0);
    assert!((f - gravity).norm() < 1e-12);
}

#[test]
fn free_fall_follows_parabola() {
    let body = point_body(1.0);
    let world = flat(1e4, 10.0, 0.5);
    let mut s0 = RobotState::at_rest(Vector3::new(0.0, 0.0, 10.0));
    s0.v.z = 1.5;
    let traj = rollout(&s0, &world, &body, &still(1000, 1e-3), &cfg(1e-3)).unwrap();
    for (i, s) in traj.states.iter().enumerate() {
        let t = i as f64 * 1e-3;
        let z = 10.0 + 1.5 * t - 0.5 * G * t * t;
        assert!((s.x.z - z).abs() < 1e-3, "t = {t}");
    }
}

#[test]
fn semi_implicit_euler_free_fall_has_first_order_bias() {
    let body = point_body(1.0);
    let world = flat(1e4, 10.0, 0.5);
    let s0 = RobotState::at_rest(Vector3::new(0.0, 0.0, 10.0));
    let c = PhysicsConfig {
        integrator: Integrator::SemiImplicitEuler,
        ..cfg(1e-3)
    };
    let traj = rollout(&s0, &world, &body, &still(1000, 1e-3), &c).unwrap();
    let bias = (10.0 - 0.5 * G) - traj.states[1000].x.z;
    assert!((bias - 0.5 * G * 1e-3).abs() < 1e-9);
}

fn damped_closed_form(m: f64, k: f64, d: f64, t: f64) -> f64 {
    let y0 = m * G / k;
    let w0 = (k / m).sqrt();
    let zeta = d / (2.0 * (k * m).sqrt());
    let wd = w0 * (1.0 - zeta * zeta).sqrt();
    let y = (-zeta * w0 * t).exp() * (y0 * (wd * t).cos() + zeta * w0 * y0 / wd * (wd * t).sin());
    -y0 + y
}

#[test]
fn single_contact_matches_damped_oscillator() {
    let (m, k, d) = (2.0, 2000.0, 20.0);
    let body = point_body(m);
    let world = flat(k, d, 0.0);
    let traj = rollout(&RobotState::at_rest(Vector3::zeros()), &world, &body, &still(5000, 1e-4), &cfg(1e-4)).unwrap();
    let amplitude = m * G / k;
    for (i, s) in traj.states.iter().enumerate() {
        let expected = damped_closed_form(m, k, d, i as f64 * 1e-4);
        assert!((s.x.z - expected).abs() <= 0.01 * amplitude, "step {i}");
    }
}

#[test]
fn resting_body_stays_at_equilibrium() {
    let body = box_body();
    let k = 2e4;
    let world = flat(k, 500.0, 0.8);
    let delta = 10.0 * G / k;
    let s0 = RobotState::at_rest(Vector3::new(0.1, -0.2, -delta));
    let traj = rollout(&s0, &world, &body, &still(100, 1e-3), &cfg(1e-3)).unwrap();
    for s in &traj.states {
        assert!(s.omega.norm() < 1e-9);
        assert!((s.x - s0.x).norm() < 1e-6);
    }
}

#[test]
fn settles_to_static_penetration() {
    let body = box_body();
    let k = 2e4;
    let world = flat(k, 1500.0, 0.8);
    let traj = rollout(
        &RobotState::at_rest(Vector3::new(0.0, 0.0, 0.05)),
        &world,
        &body,
        &still(60, 0.05),
        &cfg(1e-3),
    )
    .unwrap();
    let delta = 10.0 * G / k;
    let end = traj.states.last().unwrap();
    assert!((-end.x.z - delta).abs() <= 0.01 * delta, "z = {}", end.x.z);
}

#[test]
fn zero_horizon_returns_initial_state() {
    let s0 = RobotState::at_rest(Vector3::new(0.0, 0.0, 0.3));
    let traj = rollout(&s0, &flat(1e4, 100.0, 0.5), &box_body(), &still(0, 0.1), &cfg(1e-3)).unwrap();
    assert_eq!(traj.states, vec![s0]);
    assert_eq!(traj.horizon(), 0);
}

fn bumpy(k: f64, d: f64, mu: f64) -> WorldModelSample {
    let h = ScalarGrid::from_fn(40, 40, 0.1, |r, c| 0.05 * (0.4 * r as f64).sin() * (0.3 * c as f64).cos()).unwrap();
    world_with_height(h, k, d, mu)
}

fn drive(v: f64, w: f64, horizon: usize, dt: f64) -> ControlSequence {
    ControlSequence::constant(
        Control {
            v_c: [v, 0.0, 0.0],
            omega_c: [0.0, 0.0, w],
        },
        horizon,
        dt,
    )
    .unwrap()
}

#[test]
fn rollouts_are_bit_identical() {
    let world = bumpy(2e4, 800.0, 0.7);
    let s0 = RobotState::at_rest(Vector3::new(-0.5, 0.0, 0.1));
    let c = drive(0.5, 0.3, 30, 0.05);
    let a = rollout(&s0, &world, &box_body(), &c, &cfg(1e-3)).unwrap();
    let b = rollout(&s0, &world, &box_body(), &c, &cfg(1e-3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forward_speed_converges_monotonically_to_command() {
    let k = 2e4;
    let world = flat(k, 1500.0, 1.0);
    let s0 = RobotState::at_rest(Vector3::new(-1.5, 0.0, -10.0 * G / k));
    let traj = rollout(&s0, &world, &box_body(), &drive(1.0, 0.0, 50, 0.05), &cfg(1e-3)).unwrap();
    let gaps: Vec<f64> = traj.states.iter().skip(4).map(|s| (s.v.x - 1.0).abs()).collect();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{gaps:?}");
    assert!(gaps.last().unwrap() < &0.05);
}

#[test]
fn leaving_the_map_truncates() {
    let k = 2e4;
    let world = WorldModelSample::flat(10, 10, 0.1, [-0.5, -0.5], k, 1500.0, 1.0).unwrap();
    let body = RigidBodyModel::rectangular(0.2, 0.2, 2, 2, 4.0).unwrap();
    let s0 = RobotState::at_rest(Vector3::new(0.0, 0.0, -G / k));
    let traj = rollout(&s0, &world, &body, &drive(2.0, 0.0, 40, 0.05), &cfg(1e-3)).unwrap();
    let t = traj.truncated_at.expect("must leave the map");
    assert_eq!(traj.states.len(), t);
    assert!(t < 40);
}

#[test]
fn unstable_step_reports_blow_up_with_step() {
    let world = flat(1e4, 1e6, 0.0);
    let mut s0 = RobotState::at_rest(Vector3::new(0.0, 0.0, -0.01));
    s0.v.z = -1e305;
    let err = rollout(&s0, &world, &point_body(1.0), &still(5, 0.01), &cfg(1e-3)).unwrap_err();
    match err {
        PhysicsError::BlowUp { step, .. } => assert_eq!(step, 1),
        other => panic!("{other}"),
    }
}

#[test]
fn support_below_everything_is_free_fall() {
    let h = ScalarGrid::filled(40, 40, 0.1, -100.0).unwrap();
    let world = world_with_height(h, 1e4, 100.0, 1.0);
    let mut s0 = RobotState::at_rest(Vector3::new(0.0, 0.0, 0.0));
    s0.v = Vector3::new(0.2, -0.1, 0.0);
    let traj = rollout(&s0, &world, &box_body(), &drive(1.0, 0.5, 20, 0.05), &cfg(1e-3)).unwrap();
    for (i, s) in traj.states.iter().enumerate() {
        let t = i as f64 * 0.05;
        let expected = Vector3::new(0.2 * t, -0.1 * t, -0.5 * G * t * t);
        assert!((s.x - expected).norm() < 1e-9, "t = {t}");
        assert!(s.omega.norm() < 1e-12);
    }
}

#[test]
fn energy_never_increases_without_traction() {
    let world = flat(2e4, 400.0, 0.0);
    let body = box_body();
    let mut s = RobotState::at_rest(Vector3::new(0.0, 0.0, -0.02));
    s.r = Rotation3::from_euler_angles(0.02, -0.03, 0.4).into_inner();
    s.v = Vector3::new(0.3, 0.1, 0.0);
    s.omega = Vector3::new(0.1, 0.0, 0.2);
    let c = cfg(1e-4);
    let control = Control::default();
    let mut e = mechanical_energy(&s, &world, &body).unwrap();
    for i in 0..5000 {
        s = step(&s, &world, &body, &control, 1e-4, &c).unwrap();
        let e_next = mechanical_energy(&s, &world, &body).unwrap();
        assert!(e_next <= e + 1e-6, "step {i}: {e} -> {e_next}");
        e = e_next;
    }
}

#[test]
fn halving_dt_converges_at_least_linearly() {
    let world = bumpy(2e4, 800.0, 0.7);
    let s0 = RobotState::at_rest(Vector3::new(-1.0, -0.3, 0.0));
    let c = drive(0.6, 0.2, 40, 0.05);
    let end = |dt: f64| rollout(&s0, &world, &box_body(), &c, &cfg(dt)).unwrap().states.last().unwrap().x;
    let (a, b, d) = (end(1e-3), end(5e-4), end(2.5e-4));
    let order = ((a - b).norm() / (b - d).norm()).log2();
    assert!(order >= 1.0, "measured order {order}");
}

#[test]
fn body_construction_validates() {
    let g = Vector3::new(0.0, 0.0, -G);
    assert!(RigidBodyModel::from_points(vec![], g).is_err());
    assert!(RigidBodyModel::from_points(vec![(Vector3::zeros(), 1.0)], g).is_err());
    assert!(RigidBodyModel::with_inertia(vec![(Vector3::x(), 1.0)], Matrix3::identity(), g).is_err());
    assert!(RigidBodyModel::with_inertia(vec![(Vector3::zeros(), -1.0)], Matrix3::identity(), g).is_err());
    let b = box_body();
    assert!((b.mass() - 40.0).abs() < 1e-12);
    assert_eq!(b.points().len(), 4);
    assert!(RigidBodyModel::rectangular(1.0, 1.0, 1, 3, 5.0).is_err());
}

#[test]
fn world_validates_shapes_and_signs() {
    let z = ScalarGrid::zeros(3, 3, 0.1).unwrap();
    let neg = ScalarGrid::filled(3, 3, 0.1, -1.0).unwrap();
    assert!(WorldModelSample::new(z.clone(), z.clone(), neg, z.clone(), z.clone(), [0.0, 0.0]).is_err());
    let other = ScalarGrid::zeros(3, 4, 0.1).unwrap();
    assert!(WorldModelSample::new(z.clone(), other, z.clone(), z.clone(), z.clone(), [0.0, 0.0]).is_err());
    let coarse = ScalarGrid::zeros(3, 3, 0.2).unwrap();
    assert!(WorldModelSample::new(z.clone(), z.clone(), coarse, z.clone(), z, [0.0, 0.0]).is_err());
}

#[test]
fn controls_validate() {
    assert!(ControlSequence::constant(Control::default(), 3, 0.0).is_err());
    let bad = Control {
        v_c: [f64::NAN, 0.0, 0.0],
        omega_c: [0.0; 3],
    };
    assert!(ControlSequence::constant(bad, 3, 0.1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rotation_stays_orthonormal(
        wx in -3.0f64..3.0, wy in -3.0f64..3.0, wz in -3.0f64..3.0,
        v in 0.0f64..1.0, turn in -1.0f64..1.0,
        integrator in prop_oneof![Just(Integrator::Leapfrog), Just(Integrator::SemiImplicitEuler), Just(Integrator::Rk4)],
    ) {
        let world = bumpy(2e4, 800.0, 0.7);
        let mut s0 = RobotState::at_rest(Vector3::new(0.0, 0.0, 0.05));
        s0.omega = Vector3::new(wx, wy, wz);
        let c = PhysicsConfig { integrator, ..cfg(1e-3) };
        let traj = rollout(&s0, &world, &box_body(), &drive(v, turn, 10, 0.05), &c).unwrap();
        for s in &traj.states {
            prop_assert!(s.orthogonality_error() <= 1e-6);
            prop_assert!((s.r.determinant() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn projection_returns_rotation(m in proptest::array::uniform9(-2.0f64..2.0)) {
        let m = Matrix3::from_row_slice(&m);
        prop_assume!(m.determinant().abs() > 1e-3);
        let r = project_to_rotation(&m);
        prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }
}
