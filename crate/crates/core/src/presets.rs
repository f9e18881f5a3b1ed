//! Reference scenes, parameters and generators shared by tests, benchmarks and the CLI.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::dynamics::{PhysParams, VineState};
use crate::engine::{rollout, EngineError, RolloutConfig, Trajectory};
use crate::fit::{Trial, TrajectoryDataset};
use crate::io::{self, DatasetManifest, TrialEntry};
use crate::qpdiff::QpProblem;
use crate::scene::{Obstacle, Scene};
use crate::stiffness::Stiffness;

pub const SCENES: [&str; 3] = ["free", "wall", "clutter"];

/// Parameters of the reference vine: 5 cm links growing at 0.4 m/s.
pub fn reference_params() -> PhysParams {
    PhysParams {
        mass_kg: 0.1,
        inertia_kgm2: 0.01,
        damping_nms: 0.05,
        growth_mps: 0.4,
        dt_s: 0.01,
        d_segment_m: 0.05,
        collision_radius_m: None,
        activation_m: None,
        stiffness: Stiffness::linear(2.0),
    }
}

/// Reference parameters with the wrinkling model at 5 kPa in a 3 cm tube.
pub fn wrinkling_params(eps: f64) -> PhysParams {
    PhysParams {
        stiffness: Stiffness::wrinkling_fixed(5000.0, 0.03, eps),
        ..reference_params()
    }
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Obstacle {
    Obstacle::rect([x0, y0], [x1, y1]).expect("valid rectangle")
}

/// `free`: open plane. `wall`: a wall met at an oblique angle. `clutter`: six obstacles.
pub fn scene(name: &str) -> Option<Scene> {
    let bounds = [-1.0, -1.0, 2.0, 1.0];
    let s = match name {
        "free" => Scene::open([0.0, 0.0, 0.0], bounds),
        "wall" => Scene::new(vec![rect(0.2, -0.5, 0.3, 0.5)], [0.0, 0.0, 0.3], bounds).ok()?,
        "clutter" => {
            let tri = Obstacle::new(vec![[0.30, 0.12], [0.40, 0.05], [0.38, 0.20]]).expect("convex");
            let hex = Obstacle::new(
                (0..6)
                    .map(|i| {
                        let a = i as f64 * std::f64::consts::PI / 3.0;
                        [0.45 + 0.04 * a.cos(), -0.12 + 0.04 * a.sin()]
                    })
                    .collect(),
            )
            .expect("convex");
            let obstacles = vec![
                rect(0.12, 0.06, 0.18, 0.12),
                rect(0.15, -0.14, 0.22, -0.07),
                tri,
                rect(0.28, -0.04, 0.33, 0.01),
                hex,
                rect(0.50, 0.02, 0.56, 0.10),
            ];
            Scene::new(obstacles, [0.0, 0.0, 0.0], bounds).ok()?
        }
        _ => return None,
    };
    Some(s)
}

/// Launch heading offsets used by the scripted scene runs.
pub const SCRIPTED_ANGLES: [f64; 3] = [-0.15, 0.05, 0.2];

/// Straight three-link vine at the scene base, turned by `angle`.
pub fn initial_state(scene: &Scene, angle: f64, capacity: usize) -> VineState {
    let [x, y, t] = scene.base;
    VineState::new_straight([x, y, t + angle], 3, 0.05, 0.01, capacity).expect("valid initial state")
}

/// Bent four-link chains at rest, used as fitting trials.
pub const FIT_HEADINGS: [[f64; 4]; 3] = [[0.0, 0.4, -0.3, 0.5], [0.0, -0.5, 0.2, 0.6], [0.0, 0.3, 0.7, -0.2]];

fn synthetic_trajectories(params: &PhysParams, steps: usize) -> Result<Vec<Trajectory>, EngineError> {
    let scene = scene("free").expect("preset");
    let d = params.d_segment_m;
    FIT_HEADINGS
        .iter()
        .map(|h| {
            let s0 = VineState::from_headings([0.0, 0.0], h, d, 0.2 * d, 4).expect("valid chain");
            let config = RolloutConfig {
                steps,
                max_links: 20,
                ..Default::default()
            };
            rollout(&s0, params, &scene, &config)
        })
        .collect()
}

/// Simulated tracking data: one trial per entry of [`FIT_HEADINGS`], recorded every step.
pub fn synthetic_dataset(params: &PhysParams, steps: usize) -> Result<TrajectoryDataset, EngineError> {
    let scene = scene("free").expect("preset");
    let trials = synthetic_trajectories(params, steps)?
        .iter()
        .enumerate()
        .map(|(i, traj)| Trial::from_trajectory(format!("synthetic#{i}"), traj, &scene, params.dt_s))
        .collect();
    Ok(TrajectoryDataset { trials })
}

/// Writes [`synthetic_dataset`] to `dir` as a trajectory CSV, a scene file and a dataset
/// manifest; returns the manifest path. The last trial is marked as held out.
pub fn write_synthetic_dataset(params: &PhysParams, steps: usize, dir: &Path) -> Result<PathBuf, Box<dyn std::error::Error>> {
    let trajectories = synthetic_trajectories(params, steps)?;
    std::fs::write(dir.join("scene.json"), scene("free").expect("preset").to_json())?;
    let mut w = io::trajectory_writer(std::fs::File::create(dir.join("trajectories.csv"))?)?;
    for (i, t) in trajectories.iter().enumerate() {
        io::write_trajectory(&mut w, i, t)?;
    }
    w.flush()?;
    let manifest = DatasetManifest {
        trials: (0..trajectories.len())
            .map(|i| TrialEntry {
                csv: "trajectories.csv".into(),
                trial_id: i,
                scene: "scene.json".into(),
                frame_interval_s: params.dt_s,
                d_segment_m: params.d_segment_m,
                holdout: i + 1 == trajectories.len(),
            })
            .collect(),
    };
    let path = dir.join("dataset.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// A QP with a known optimum, built backwards from the KKT conditions.
#[derive(Debug, Clone)]
pub struct PlantedQp {
    pub problem: QpProblem,
    pub z: Vec<f64>,
    pub nu: Vec<f64>,
    pub mu: Vec<f64>,
}

/// Random strictly convex QP with `n` variables, `m_eq` equalities and `m_ineq` inequalities.
///
/// About half the inequalities are active with multipliers in `[0.1, 1]`, the rest have slack
/// in `[0.1, 1]`, so the instance is strictly complementary. `Q` has eigenvalues in `[1, cond]`.
pub fn planted_qp<R: Rng>(rng: &mut R, n: usize, m_eq: usize, m_ineq: usize, cond: f64) -> PlantedQp {
    use nalgebra::{DMatrix, DVector};
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let basis = a.qr().q();
    let eig = DVector::from_fn(n, |i, _| {
        if n == 1 {
            1.0
        } else {
            cond.powf(i as f64 / (n - 1) as f64)
        }
    });
    let q = &basis * DMatrix::from_diagonal(&eig) * basis.transpose();
    let q = (&q + q.transpose()) * 0.5;
    let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let rows = |m: usize, rng: &mut R| -> Vec<Vec<f64>> {
        (0..m).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    };
    let a_eq = rows(m_eq, rng);
    let g = rows(m_ineq, rng);
    let dot = |r: &[f64]| r.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
    let b_eq: Vec<f64> = a_eq.iter().map(|r| dot(r)).collect();
    let nu: Vec<f64> = (0..m_eq).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut mu = vec![0.0; m_ineq];
    let mut h = vec![0.0; m_ineq];
    for i in 0..m_ineq {
        if rng.gen_bool(0.5) && i < n.saturating_sub(m_eq) {
            mu[i] = rng.gen_range(0.1..1.0);
            h[i] = dot(&g[i]);
        } else {
            h[i] = dot(&g[i]) + rng.gen_range(0.1..1.0);
        }
    }
    // stationarity: Q z + lin + A' nu + G' mu = 0
    let lin: Vec<f64> = (0..n)
        .map(|j| {
            let qz: f64 = (0..n).map(|k| q[(j, k)] * z[k]).sum();
            let an: f64 = (0..m_eq).map(|i| a_eq[i][j] * nu[i]).sum();
            let gm: f64 = (0..m_ineq).map(|i| g[i][j] * mu[i]).sum();
            -(qz + an + gm)
        })
        .collect();
    let problem = QpProblem::new(q, DVector::from_vec(lin))
        .with_eq(
            DMatrix::from_fn(m_eq, n, |i, j| a_eq[i][j]),
            DVector::from_vec(b_eq),
        )
        .with_ineq(DMatrix::from_fn(m_ineq, n, |i, j| g[i][j]), DVector::from_vec(h));
    PlantedQp { problem, z, nu, mu }
}
