//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use terrain_uq::experiment::{run_compare, run_fit_experiment, CompareConfig, FitExperimentConfig};
use terrain_uq::forecast::{traj_nll, TrajectoryDistribution};
use terrain_uq::grid::{gaussian_kernel, Kernel};
use terrain_uq::metrics::{ecpe, energy_score, DEFAULT_LEVELS};
use terrain_uq::oracle::{self, OracleConfig};
use terrain_uq::physics::{
    rollout, Control, ControlSequence, PhysicsConfig, RigidBodyModel, RobotState, WorldModelSample,
};
use terrain_uq::{GaussianField, ScalarGrid};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn grow(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size > layout.size() {
                grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Runs `f`, returning its result and the peak bytes allocated above the
/// level at entry.
fn peak_extra<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (out, PEAK.load(Ordering::Relaxed).saturating_sub(base))
}

type Criterion<'a> = (&'static str, Option<u64>, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    passed: bool,
    detail: String,
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = f();
    let elapsed = start.elapsed();
    out.detail.push_str(&format!("; {:.2} s", elapsed.as_secs_f64()));
    if let Some(limit) = limit {
        if elapsed > limit {
            out.passed = false;
            out.detail.push_str(&format!(" exceeds {} s", limit.as_secs()));
        }
    }
    out
}

fn from_check(c: &oracle::CheckResult) -> Outcome {
    Outcome {
        passed: c.passed,
        detail: format!("{}: {:.3e} vs {:.1e} ({})", c.name, c.measured, c.tolerance, c.detail),
    }
}

fn criterion_1(cfg: &OracleConfig) -> Outcome {
    from_check(&oracle::check_nll_equivalence(cfg))
}

fn criterion_2(cfg: &OracleConfig) -> Outcome {
    from_check(&oracle::check_matvec_equivalence(cfg))
}

fn criterion_3(cfg: &OracleConfig) -> Outcome {
    from_check(&oracle::check_gradients(cfg))
}

fn criterion_4(cfg: &OracleConfig) -> Outcome {
    from_check(&oracle::check_cg_budget(cfg))
}

fn criterion_5() -> Outcome {
    let (run, extra) = peak_extra(|| oracle::scalability_run(128, 128, 5));
    let run = match run {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let limit = 50 * 1024 * 1024;
    let convs_ok = run.convolutions == 2 * run.cg_iterations as u64 + 1;
    Outcome {
        passed: run.elapsed < Duration::from_secs(1) && extra < limit && convs_ok,
        detail: format!(
            "128x128 NLL in {:.1} ms, {} CG iterations, {} convolutions, peak extra memory {:.2} MB (limit 50 MB); \
             a dense covariance would need {} bytes ({:.2} GB)",
            run.elapsed.as_secs_f64() * 1e3,
            run.cg_iterations,
            run.convolutions,
            extra as f64 / (1024.0 * 1024.0),
            run.dense_covariance_bytes,
            run.dense_covariance_bytes as f64 / 1e9
        ),
    }
}

fn criterion_6() -> Outcome {
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let inst = oracle::random_instance(&mut rng, 4, 4, gaussian_kernel(5, 1.0).unwrap(), false);
    let frob = oracle::sampling_covariance_error(&inst.field, 62, draws);

    let mean = ScalarGrid::zeros(8, 8, 0.1).unwrap();
    let sc = GaussianField::with_constant_variance(mean, 1.0, gaussian_kernel(5, 1.0).unwrap()).unwrap();
    let indep = sc.with_kernel(Kernel::identity()).unwrap();
    let (i, j) = (3 * 8 + 3, 3 * 8 + 4);
    let (sc_emp, sc_true) = oracle::neighbor_correlation(&sc, 63, draws, i, j);
    let (ind_emp, _) = oracle::neighbor_correlation(&indep, 63, draws, i, j);
    Outcome {
        passed: frob <= 0.05 && (sc_emp - sc_true).abs() <= 0.05 && ind_emp.abs() <= 0.02,
        detail: format!(
            "Frobenius rel err {frob:.4} (<= 0.05); SC neighbor corr {sc_emp:.4} vs analytic {sc_true:.4} (<= 0.05); \
             Indep neighbor corr {ind_emp:.4} (<= 0.02)"
        ),
    }
}

const G: f64 = 9.81;

fn flat_world(k: f64, d: f64, mu: f64) -> WorldModelSample {
    WorldModelSample::flat(40, 40, 0.1, [-2.0, -2.0], k, d, mu).unwrap()
}

fn still(horizon: usize, dt: f64) -> ControlSequence {
    ControlSequence::constant(Control::default(), horizon, dt).unwrap()
}

fn physics_cfg(dt: f64) -> PhysicsConfig {
    PhysicsConfig {
        dt,
        ..PhysicsConfig::default()
    }
}

fn point_body(m: f64) -> RigidBodyModel {
    RigidBodyModel::with_inertia(vec![(Vector3::zeros(), m)], Matrix3::identity(), Vector3::new(0.0, 0.0, -G)).unwrap()
}

fn criterion_7() -> Outcome {
    // Free fall from 10 m with an upward kick, far above the ground.
    let mut s0 = RobotState::at_rest(Vector3::new(0.0, 0.0, 10.0));
    s0.v.z = 1.5;
    let traj = rollout(&s0, &flat_world(1e4, 10.0, 0.5), &point_body(1.0), &still(1000, 1e-3), &physics_cfg(1e-3)).unwrap();
    let fall = traj
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = i as f64 * 1e-3;
            (s.x.z - (10.0 + 1.5 * t - 0.5 * G * t * t)).abs()
        })
        .fold(0.0, f64::max);

    // One contact point released at the surface: an underdamped oscillator
    // settling to -m g / k.
    let (m, k, d) = (2.0, 2000.0, 20.0);
    let traj = rollout(
        &RobotState::at_rest(Vector3::zeros()),
        &flat_world(k, d, 0.0),
        &point_body(m),
        &still(5000, 1e-4),
        &physics_cfg(1e-4),
    )
    .unwrap();
    let y0 = m * G / k;
    let w0 = (k / m).sqrt();
    let zeta = d / (2.0 * (k * m).sqrt());
    let wd = w0 * (1.0 - zeta * zeta).sqrt();
    let oscillator = traj
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = i as f64 * 1e-4;
            let z = -y0 + (-zeta * w0 * t).exp() * (y0 * (wd * t).cos() + zeta * w0 * y0 / wd * (wd * t).sin());
            (s.x.z - z).abs() / y0
        })
        .fold(0.0, f64::max);

    // A 40 kg box on four points settling from 5 cm above the ground.
    let body = RigidBodyModel::rectangular(0.8, 0.5, 2, 2, 40.0).unwrap();
    let k = 2e4;
    let traj = rollout(
        &RobotState::at_rest(Vector3::new(0.0, 0.0, 0.05)),
        &flat_world(k, 1500.0, 0.8),
        &body,
        &still(60, 0.05),
        &physics_cfg(1e-3),
    )
    .unwrap();
    let delta = 10.0 * G / k;
    let penetration = (-traj.states.last().unwrap().x.z - delta).abs() / delta;

    Outcome {
        passed: fall <= 1e-3 && oscillator <= 0.01 && penetration <= 0.01,
        detail: format!(
            "free fall max err {fall:.2e} m (<= 1e-3); damped contact max rel err {oscillator:.2e} (<= 1e-2); \
             static penetration rel err {penetration:.2e} (<= 1e-2)"
        ),
    }
}

fn criterion_8() -> Outcome {
    match run_fit_experiment(&FitExperimentConfig::default(), 0) {
        Ok(run) => {
            let r = &run.report;
            Outcome {
                passed: r.fov_mean_relative_error <= 0.10 && r.ofov_max_relative_deviation <= 0.05,
                detail: format!(
                    "FoV mean rel variance err {:.4} over {} cells (<= 0.10); oFoV max deviation from prior {:.2e} over {} cells (<= 0.05)",
                    r.fov_mean_relative_error, r.fov_cells, r.ofov_max_relative_deviation, r.ofov_cells
                ),
            }
        }
        Err(e) => Outcome {
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn criterion_9() -> Outcome {
    let report = match run_compare(&CompareConfig::default(), 0) {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let row = |m: &str| report.table.iter().find(|r| r.method == m).expect("method row");
    let (det, indep, sc) = (row("Det"), row("Indep"), row("SC"));
    let (sc_es, ind_es) = (sc.energy_score.unwrap_or(f64::NAN), indep.energy_score.unwrap_or(f64::NAN));
    let (sc_ecpe, ind_ecpe) = (sc.ecpe.unwrap_or(f64::NAN), indep.ecpe.unwrap_or(f64::NAN));
    Outcome {
        passed: sc_es <= ind_es && sc_ecpe <= ind_ecpe && sc.ate <= 1.05 * det.ate,
        detail: format!(
            "{} scenarios: ES SC {sc_es:.4} vs Indep {ind_es:.4}; ECPE SC {sc_ecpe:.4} vs Indep {ind_ecpe:.4}; \
             ATE SC {:.4} vs 1.05 x Det {:.4}",
            sc.scenarios,
            sc.ate,
            1.05 * det.ate
        ),
    }
}

fn criterion_10() -> Outcome {
    let y = vec![[0.0, 0.0, 0.0]];
    let es = energy_score(&[y.clone(), vec![[2.0, 0.0, 0.0]]], &y).unwrap();

    let dist = |mean: Vec<[f64; 3]>, variance: Vec<[f64; 3]>| TrajectoryDistribution {
        horizon: mean.len(),
        mean,
        variance,
        variance_floor: 1e-8,
        floor_active: false,
        samples: Vec::new(),
        sample_indices: Vec::new(),
        failed: Vec::new(),
    };
    // One step, one informative axis: residual 1 at variance 2; the other
    // axes have zero residual at unit variance.
    let nll = traj_nll(&dist(vec![[1.0, 0.0, 0.0]], vec![[2.0, 1.0, 1.0]]), &[[0.0, 0.0, 0.0]]).unwrap();
    let nll_expected = 0.25 + 0.5 * 2f64.ln();

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let horizon = 3334;
    let mut mean = Vec::with_capacity(horizon);
    let mut variance = Vec::with_capacity(horizon);
    let mut gt = Vec::with_capacity(horizon);
    let unit = Normal::new(0.0, 1.0).unwrap();
    for t in 0..horizon {
        let mu = [t as f64 * 0.01, -0.5, 0.2];
        let sd = [0.1 + 0.001 * t as f64, 0.5, 2.0];
        mean.push(mu);
        variance.push([sd[0] * sd[0], sd[1] * sd[1], sd[2] * sd[2]]);
        gt.push([0, 1, 2].map(|d| mu[d] + sd[d] * unit.sample(&mut rng)));
    }
    let calibrated = ecpe(&dist(mean, variance), &gt, &DEFAULT_LEVELS).unwrap();

    Outcome {
        passed: (es - 0.5).abs() < 1e-12 && (nll - nll_expected).abs() < 1e-12 && calibrated <= 0.02,
        detail: format!(
            "energy score hand case {es} (= 0.5); trajectory NLL hand case {nll:.4} (= {nll_expected:.4}); \
             calibrated ECPE {calibrated:.4} over {} cells (<= 0.02)",
            3 * horizon
        ),
    }
}

fn main() {
    let oracle_cfg = OracleConfig::default();
    let criteria: Vec<Criterion> = vec![
        ("dense-oracle NLL equivalence", Some(10), Box::new(|| criterion_1(&oracle_cfg))),
        ("matvec oracle", None, Box::new(|| criterion_2(&oracle_cfg))),
        ("gradient correctness", Some(30), Box::new(|| criterion_3(&oracle_cfg))),
        ("CG budget", None, Box::new(|| criterion_4(&oracle_cfg))),
        ("scalability", None, Box::new(criterion_5)),
        ("sampling law", None, Box::new(criterion_6)),
        ("physics closed forms", None, Box::new(criterion_7)),
        ("desk-scale MLE fit", Some(120), Box::new(criterion_8)),
        ("method ordering over 20 scenarios", Some(300), Box::new(criterion_9)),
        ("metric hand cases", None, Box::new(criterion_10)),
    ];
    let mut failures = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let out = timed(limit.map(Duration::from_secs), run);
        if !out.passed {
            failures += 1;
        }
        let verdict = if out.passed { "PASS" } else { "FAIL" };
        println!("[{verdict}] {:>2}. {name}: {}", i + 1, out.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
