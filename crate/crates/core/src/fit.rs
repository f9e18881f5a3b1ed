//! Parameter identification: wrinkling criterion from bending measurements, the pressure
//! polynomial, and gradient-based fitting of simulator parameters to tracked trajectories.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::Real;
use crate::dynamics::{ParamId, PhysParams, VineState, INERTIA_MIN, MASS_MIN};
use crate::engine::{loss_gradient, EngineError, RolloutConfig, TrajectoryLoss};
use crate::io::{self, DatasetManifest, Frame, IoError, MomentRecord};
use crate::scene::Scene;
use crate::stiffness::{wrinkling_magnitude, Stiffness};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("data uninformative: {0}")]
    Uninformative(String),
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

// ---------------------------------------------------------------------------------------------
// Bending-moment data

/// Smallest sample count accepted per pressure group.
pub const MIN_GROUP_SIZE: usize = 10;
const EPS_LO: f64 = 1e-4;
const EPS_HI: f64 = 0.999;
const EPS_GRID: usize = 1000;
const EPS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentDataset {
    pub records: Vec<MomentRecord>,
}

impl MomentDataset {
    pub fn from_csv<R: std::io::Read>(reader: R, context: &str) -> Result<Self, FitError> {
        Ok(MomentDataset {
            records: io::read_moments(reader, context)?,
        })
    }

    /// Records grouped by pressure, ascending.
    pub fn groups(&self) -> Vec<(f64, Vec<MomentRecord>)> {
        let mut map: BTreeMap<u64, Vec<MomentRecord>> = BTreeMap::new();
        for r in &self.records {
            // positive finite floats order like their bit patterns
            map.entry(r.pressure_pa.to_bits()).or_default().push(*r);
        }
        map.into_iter().map(|(k, v)| (f64::from_bits(k), v)).collect()
    }
}

fn check_group(group: &[MomentRecord]) -> Result<f64, FitError> {
    let Some(first) = group.first() else {
        return Err(FitError::Invalid("empty pressure group".into()));
    };
    let p = first.pressure_pa;
    if !(p > 0.0 && p.is_finite()) {
        return Err(FitError::Invalid(format!("pressure {p} must be > 0")));
    }
    if group.iter().any(|r| r.pressure_pa != p) {
        return Err(FitError::Invalid("group mixes pressures".into()));
    }
    if group.len() < MIN_GROUP_SIZE {
        return Err(FitError::Invalid(format!(
            "pressure {p} Pa has {} samples, need {MIN_GROUP_SIZE}",
            group.len()
        )));
    }
    if let Some(r) = group.iter().find(|r| !(0.0..=PI).contains(&r.theta_rad) || !r.moment_nm.is_finite()) {
        return Err(FitError::Invalid(format!(
            "sample (theta {}, moment {}) out of range",
            r.theta_rad, r.moment_nm
        )));
    }
    Ok(p)
}

/// Minimizes `f` over the sorted `grid`, then refines by golden-section search between the
/// neighbours of the best grid point. Ties go to the smaller argument.
pub fn minimize_scalar(f: impl Fn(f64) -> f64, grid: &[f64], tol: f64) -> (f64, f64) {
    assert!(!grid.is_empty(), "empty grid");
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let (x, fx) = if fc <= fd { (c, fc) } else { (d, fd) };
    if fx < values[best] {
        (x, fx)
    } else {
        (grid[best], values[best])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsFit {
    pub pressure_pa: f64,
    pub eps_crit: f64,
    /// Sum of squared moment residuals at the optimum.
    pub sse: f64,
    pub samples: usize,
}

/// Sum of squared residuals of the wrinkling model with criterion `eps`.
pub fn eps_objective(group: &[MomentRecord], full: f64, eps: f64) -> f64 {
    group
        .iter()
        .map(|r| (r.moment_nm - wrinkling_magnitude(r.theta_rad, full, eps)).powi(2))
        .sum()
}

fn eps_grid() -> Vec<f64> {
    let (l0, l1) = (EPS_LO.ln(), EPS_HI.ln());
    (0..EPS_GRID)
        .map(|i| (l0 + (l1 - l0) * i as f64 / (EPS_GRID - 1) as f64).exp())
        .collect()
}

/// Least-squares wrinkling criterion for one pressure group.
pub fn fit_eps_crit(group: &[MomentRecord], tube_radius: f64) -> Result<EpsFit, FitError> {
    let p = check_group(group)?;
    if !(tube_radius > 0.0 && tube_radius.is_finite()) {
        return Err(FitError::Invalid(format!("tube radius {tube_radius} must be > 0")));
    }
    let full = PI * p * tube_radius.powi(3);
    let grid = eps_grid();
    let values: Vec<f64> = grid.iter().map(|&e| eps_objective(group, full, e)).collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo <= 1e-12 * hi.abs() || hi == 0.0 {
        return Err(FitError::Uninformative(format!(
            "objective is flat in eps_crit at {p} Pa"
        )));
    }
    let (eps, sse) = minimize_scalar(|e| eps_objective(group, full, e), &grid, EPS_TOL);
    Ok(EpsFit {
        pressure_pa: p,
        eps_crit: eps,
        sse,
        samples: group.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    /// `c0 + c1 P + c2 P^2 + c3 P^3`.
    pub coeffs: [f64; 4],
    pub residuals: Vec<f64>,
    pub residual_norm: f64,
}

pub fn eval_cubic(c: &[f64; 4], p: f64) -> f64 {
    c[0] + p * (c[1] + p * (c[2] + p * c[3]))
}

/// Ordinary least-squares cubic through `(pressure, eps_crit)` pairs.
///
/// Solved in centred, scaled pressure for conditioning and converted back to monomials.
pub fn fit_eps_polynomial(pairs: &[(f64, f64)]) -> Result<PolyFit, FitError> {
    if pairs.iter().any(|(p, e)| !p.is_finite() || !e.is_finite()) {
        return Err(FitError::Invalid("non-finite pressure or eps".into()));
    }
    let mut distinct: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(FitError::RankDeficient(format!(
            "{} distinct pressures, a cubic needs 4",
            distinct.len()
        )));
    }
    let m = pairs.len();
    let mu = pairs.iter().map(|p| p.0).sum::<f64>() / m as f64;
    let s = pairs.iter().fold(0.0f64, |a, p| a.max((p.0 - mu).abs()));
    let a = DMatrix::from_fn(m, 4, |i, j| ((pairs[i].0 - mu) / s).powi(j as i32));
    let y = DVector::from_iterator(m, pairs.iter().map(|p| p.1));
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-12 * smax {
        return Err(FitError::RankDeficient("design matrix is singular".into()));
    }
    let b = svd
        .solve(&y, 1e-14 * smax)
        .map_err(|e| FitError::RankDeficient(e.to_string()))?;
    // sum_j b_j ((P - mu) / s)^j expanded in powers of P
    let mut coeffs = [0.0; 4];
    let binom = [[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
    for j in 0..4 {
        let scale = b[j] / s.powi(j as i32);
        for (i, c) in coeffs.iter_mut().enumerate().take(j + 1) {
            *c += scale * binom[j][i] * (-mu).powi((j - i) as i32);
        }
    }
    let residuals: Vec<f64> = pairs.iter().map(|&(p, e)| e - eval_cubic(&coeffs, p)).collect();
    let residual_norm = residuals.iter().map(|r| r * r).sum::<f64>().sqrt();
    Ok(PolyFit {
        coeffs,
        residuals,
        residual_norm,
    })
}

// ---------------------------------------------------------------------------------------------
// Tracked trajectories

/// One tracked trial with its scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub name: String,
    pub scene: Scene,
    pub frame_interval: f64,
    pub d_segment: f64,
    pub frames: Vec<Frame>,
    pub holdout: bool,
}

impl Trial {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: String| Err(FitError::Invalid(format!("{}: {m}", self.name)));
        if !(self.frame_interval > 0.0 && self.frame_interval.is_finite()) {
            return bad("frame interval must be > 0".into());
        }
        if !(self.d_segment > 0.0 && self.d_segment.is_finite()) {
            return bad("link spacing must be > 0".into());
        }
        for w in self.frames.windows(2) {
            if w[1].time <= w[0].time {
                return bad(format!("frames not time-ordered at step {}", w[1].step));
            }
            if w[1].n() < w[0].n() {
                return bad(format!("link count decreases at step {}", w[1].step));
            }
        }
        if let Some(f) = self.frames.iter().find(|f| f.n() < 2) {
            return bad(format!("step {} tracks fewer than 2 links", f.step));
        }
        Ok(())
    }
}

impl Trial {
    /// Wraps a simulated trajectory as tracked data (headings included).
    pub fn from_trajectory(name: impl Into<String>, traj: &crate::engine::Trajectory, scene: &Scene, frame_interval: f64) -> Self {
        let frames = traj
            .states
            .iter()
            .zip(&traj.steps)
            .zip(&traj.times)
            .map(|((s, &step), &time)| Frame {
                step,
                time,
                xy: s.positions(),
                theta: Some(s.q[..s.n].iter().map(|q| q[2]).collect()),
            })
            .collect();
        Trial {
            name: name.into(),
            scene: scene.clone(),
            frame_interval,
            d_segment: traj.states[0].d_segment,
            frames,
            holdout: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryDataset {
    pub trials: Vec<Trial>,
}

impl TrajectoryDataset {
    /// Loads every trial listed in a manifest; paths resolve relative to the manifest.
    pub fn load(manifest_path: &Path) -> Result<Self, FitError> {
        let manifest: DatasetManifest = io::read_json(manifest_path)?;
        let mut csvs: BTreeMap<std::path::PathBuf, BTreeMap<usize, Vec<Frame>>> = BTreeMap::new();
        let mut trials = Vec::with_capacity(manifest.trials.len());
        for entry in &manifest.trials {
            let csv_path = manifest.resolve(manifest_path, &entry.csv);
            if !csvs.contains_key(&csv_path) {
                let text = io::read_file(&csv_path)?;
                let parsed = io::read_trajectory(text.as_bytes(), &csv_path.display().to_string())?;
                csvs.insert(csv_path.clone(), parsed);
            }
            let frames = csvs[&csv_path].get(&entry.trial_id).cloned().ok_or_else(|| {
                FitError::Invalid(format!("{}: no trial_id {}", csv_path.display(), entry.trial_id))
            })?;
            let scene_path = manifest.resolve(manifest_path, &entry.scene);
            let scene: Scene = io::read_json(&scene_path)?;
            trials.push(Trial {
                name: format!("{}#{}", entry.csv.display(), entry.trial_id),
                scene,
                frame_interval: entry.frame_interval_s,
                d_segment: entry.d_segment_m,
                frames,
                holdout: entry.holdout,
            });
        }
        let ds = TrajectoryDataset { trials };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        self.trials.iter().try_for_each(Trial::validate)
    }
}

fn wrap(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Link headings of an observed frame: the tracked column when present, otherwise rebuilt from
/// the joint geometry, starting from the base heading.
///
/// Adjacent centres satisfy `p_{k+1} - p_k = h (dir theta_k + dir theta_{k+1})`, which gives
/// each heading from the previous one; the tip is placed along the line from its joint.
pub fn observed_headings(frame: &Frame, base_heading: f64, d_segment: f64) -> Vec<f64> {
    if let Some(t) = &frame.theta {
        return t.clone();
    }
    let n = frame.n();
    let h = 0.5 * d_segment;
    let mut theta = vec![base_heading; n];
    for k in 1..n - 1 {
        let (a, b) = (frame.xy[k - 1], frame.xy[k]);
        let prev = theta[k - 1];
        let u = [(b[0] - a[0]) / h - prev.cos(), (b[1] - a[1]) / h - prev.sin()];
        theta[k] = prev + wrap(u[1].atan2(u[0]) - prev);
    }
    let prev = theta[n - 2];
    let a = frame.xy[n - 2];
    let w = [frame.xy[n - 1][0] - a[0] - h * prev.cos(), frame.xy[n - 1][1] - a[1] - h * prev.sin()];
    let r = w[0].hypot(w[1]);
    theta[n - 1] = if r < 1e-12 * d_segment {
        prev
    } else {
        // a tip shorter than a half-length sits behind its joint
        let forward = w[0] * prev.cos() + w[1] * prev.sin() >= 0.0;
        let ang = if forward { w[1].atan2(w[0]) } else { (-w[1]).atan2(-w[0]) };
        prev + wrap(ang - prev)
    };
    theta
}

/// Simulator state for an observed frame, with finite-difference velocities from `prev`.
pub fn observed_state(
    frame: &Frame,
    prev: &Frame,
    base_heading: f64,
    d_segment: f64,
    frame_interval: f64,
) -> Result<VineState, String> {
    let n = frame.n();
    if prev.n() != n {
        return Err(format!("link count changes {} -> {n}", prev.n()));
    }
    let th = observed_headings(frame, base_heading, d_segment);
    let th_prev = observed_headings(prev, base_heading, d_segment);
    let q: Vec<[f64; 3]> = frame.xy.iter().zip(&th).map(|(p, &t)| [p[0], p[1], t]).collect();
    let mut v: Vec<[f64; 3]> = (0..n)
        .map(|k| {
            [
                (frame.xy[k][0] - prev.xy[k][0]) / frame_interval,
                (frame.xy[k][1] - prev.xy[k][1]) / frame_interval,
                wrap(th[k] - th_prev[k]) / frame_interval,
            ]
        })
        .collect();
    v[0] = [0.0; 3];
    let h = 0.5 * d_segment;
    let a = q[n - 2];
    let w = [q[n - 1][0] - a[0] - h * a[2].cos(), q[n - 1][1] - a[1] - h * a[2].sin()];
    let axial = w[0] * q[n - 1][2].cos() + w[1] * q[n - 1][2].sin();
    let tip_length = (h + axial).clamp(crate::engine::MIN_TIP_FRACTION * d_segment, d_segment);
    let state = VineState {
        n,
        q,
        v,
        d_segment,
        tip_length,
        growth_halted: false,
        degenerate: false,
    };
    state.validate().map_err(|e| e.to_string())?;
    Ok(state)
}

/// Squared (x, y) error of the last recorded state against a tracked frame.
struct OneStepLoss<'a> {
    target: &'a [[f64; 2]],
}

impl TrajectoryLoss for OneStepLoss<'_> {
    fn eval<T: Real>(&self, states: &[VineState<T>]) -> T {
        let last = states.last().expect("at least the initial state");
        let mut acc = T::zero();
        for (q, t) in last.q.iter().zip(self.target) {
            acc += (q[0] - t[0]).square() + (q[1] - t[1]).square();
        }
        acc
    }
}

/// One teacher-forced prediction: step from `state`, compare with `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub trial: usize,
    pub step: usize,
    pub state: VineState,
    pub target: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFrame {
    pub trial: String,
    pub step: usize,
    pub reason: String,
}

/// Usable prediction samples of a trial; frames next to a link-count change are skipped.
pub fn trial_samples(trial: &Trial, index: usize) -> (Vec<Sample>, Vec<SkippedFrame>) {
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let base = trial.scene.base[2];
    for i in 1..trial.frames.len().saturating_sub(1) {
        let (prev, cur, next) = (&trial.frames[i - 1], &trial.frames[i], &trial.frames[i + 1]);
        let skip = |reason: String| SkippedFrame {
            trial: trial.name.clone(),
            step: cur.step,
            reason,
        };
        if next.n() != cur.n() {
            skipped.push(skip(format!("link count changes {} -> {} in the predicted step", cur.n(), next.n())));
            continue;
        }
        match observed_state(cur, prev, base, trial.d_segment, trial.frame_interval) {
            Ok(state) => samples.push(Sample {
                trial: index,
                step: cur.step,
                state,
                target: next.xy.clone(),
            }),
            Err(reason) => skipped.push(skip(reason)),
        }
    }
    (samples, skipped)
}

/// Steps per frame: the frame interval must be a whole multiple of `dt_s`.
fn substeps(params: &PhysParams, frame_interval: f64) -> Result<usize, FitError> {
    let r = frame_interval / params.dt_s;
    let k = r.round();
    if k < 1.0 || (r - k).abs() > 1e-6 * k {
        return Err(FitError::Invalid(format!(
            "frame interval {frame_interval} s is not a whole multiple of dt {} s",
            params.dt_s
        )));
    }
    Ok(k as usize)
}

struct SampleEval {
    loss: f64,
    grads: Vec<f64>,
}

fn eval_sample(
    sample: &Sample,
    trial: &Trial,
    params: &PhysParams,
    wrt: &[ParamId],
    velocity: Option<&[[f64; 3]]>,
) -> Result<SampleEval, FitError> {
    let steps = substeps(params, trial.frame_interval)?;
    let config = RolloutConfig {
        steps,
        dt: None,
        batch: 1,
        max_links: sample.state.n,
        seed: 0,
        record_every: steps,
        insert_links: false,
    };
    let mut state = sample.state.clone();
    if let Some(v) = velocity {
        state.v[..v.len()].copy_from_slice(v);
    }
    let loss = OneStepLoss { target: &sample.target };
    let r = loss_gradient(&state, params, &trial.scene, &config, &loss, wrt)?;
    Ok(SampleEval {
        loss: r.loss,
        grads: r.grads,
    })
}

/// Loss of one trial and the number of predicted link positions it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialLoss {
    pub loss: f64,
    pub frames_used: usize,
    pub points: usize,
    pub skipped: Vec<SkippedFrame>,
    pub warnings: Vec<String>,
}

impl TrialLoss {
    pub fn mse(&self) -> f64 {
        if self.points == 0 {
            0.0
        } else {
            self.loss / self.points as f64
        }
    }
}

/// Sum over frames of the squared one-step (x, y) prediction error, in m^2.
pub fn trajectory_loss(params: &PhysParams, trial: &Trial) -> Result<TrialLoss, FitError> {
    trial.validate()?;
    let (samples, skipped) = trial_samples(trial, 0);
    let mut warnings = Vec::new();
    if samples.is_empty() {
        warnings.push(format!("{}: no usable frames", trial.name));
    }
    let evals: Vec<Result<SampleEval, FitError>> = samples
        .par_iter()
        .map(|s| eval_sample(s, trial, params, &[], None))
        .collect();
    let mut loss = 0.0;
    for e in evals {
        loss += e?.loss;
    }
    Ok(TrialLoss {
        loss,
        frames_used: samples.len(),
        points: samples.iter().map(|s| s.state.n).sum(),
        skipped,
        warnings,
    })
}

// ---------------------------------------------------------------------------------------------
// Optimizer

/// Loss (m²) below which growth is treated as noise rather than divergence.
pub const DIVERGENCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub lr_physical: f64,
    pub lr_neural: f64,
    /// Decoupled weight decay, applied to neural weights only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Parameters to fit; `None` selects [`default_fit_set`].
    pub params: Option<Vec<ParamId>>,
    /// Treat each frame's initial velocities as free variables (finite-difference initialised).
    pub free_velocities: bool,
    /// Abort once the loss stays above `divergence_factor * initial` this many iterations
    /// (the initial loss is floored at [`DIVERGENCE_FLOOR`], so a start at the optimum is not
    /// mistaken for divergence).
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    /// Relative error bound of the first-iteration finite-difference check.
    pub fd_tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            iterations: 2000,
            lr_physical: 1e-2,
            lr_neural: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            params: None,
            free_velocities: false,
            divergence_factor: 1e3,
            divergence_patience: 50,
            fd_tolerance: 1e-3,
        }
    }
}

/// Parameters fitted by default: damping, growth and the stiffness model.
///
/// Mass and inertia stay fixed. Scaling mass, inertia, stiffness and damping together leaves
/// every prediction unchanged, and because link translation is tied to rotation the mass alone
/// barely anchors that scale; fixing both makes the rest identifiable.
pub fn default_fit_set(params: &PhysParams) -> Vec<ParamId> {
    params
        .param_ids()
        .into_iter()
        .filter(|id| !matches!(id, ParamId::Mass | ParamId::Inertia))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdCheck {
    pub param: ParamId,
    pub analytic: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMse {
    pub trial: String,
    pub holdout: bool,
    pub frames: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: String,
    pub fitted: Vec<ParamId>,
    pub initial_params: PhysParams,
    /// Best-loss parameters.
    pub params: PhysParams,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_iteration: usize,
    /// Training loss of every visited iterate; entry 0 is the initial parameters.
    pub loss_history: Vec<f64>,
    pub trial_mse: Vec<TrialMse>,
    pub optimizer: OptimizerConfig,
    pub fd_check: Vec<FdCheck>,
    pub skipped_frames: Vec<SkippedFrame>,
    pub warnings: Vec<String>,
    pub diverged: bool,
}

/// How a fitted parameter is represented inside the optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    /// `x = ln(max(p, floor))`; updates are relative and positivity is automatic.
    Log { floor: f64 },
    /// Neural weight, decayed.
    Neural,
}

fn coord_of(params: &PhysParams, id: ParamId) -> Coord {
    match id {
        ParamId::Mass => Coord::Log { floor: MASS_MIN },
        ParamId::Inertia => Coord::Log { floor: INERTIA_MIN },
        ParamId::Damping | ParamId::Growth => Coord::Log { floor: 1e-9 },
        ParamId::Stiffness(_) => match params.stiffness {
            Stiffness::Linear(_) => Coord::Log { floor: 1e-9 },
            Stiffness::Wrinkling(_) => Coord::Log { floor: 1e-4 },
            Stiffness::Mlp(_) => Coord::Neural,
        },
        ParamId::InitialVelocity { .. } => Coord::Neural,
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One AdamW update of `x` with per-coordinate learning rate and decay.
    fn step(&mut self, x: &mut [f64], g: &[f64], lr: &[f64], decay: &[f64], cfg: &OptimizerConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            x[i] -= lr[i] * (mhat / (vhat.sqrt() + cfg.epsilon) + decay[i] * x[i]);
        }
    }
}

struct Problem<'a> {
    dataset: &'a TrajectoryDataset,
    samples: Vec<Sample>,
    fitted: Vec<ParamId>,
}

struct Evaluation {
    loss: f64,
    grads: Vec<f64>,
    /// Gradient with respect to each sample's free velocities (links 1.., flattened).
    velocity_grads: Vec<Vec<f64>>,
    failures: Vec<String>,
}

fn velocity_ids(n: usize) -> Vec<ParamId> {
    (1..n)
        .flat_map(|link| (0..3).map(move |axis| ParamId::InitialVelocity { link, axis }))
        .collect()
}

impl Problem<'_> {
    fn evaluate(&self, params: &PhysParams, velocities: Option<&[Vec<[f64; 3]>]>, gradient: bool) -> Evaluation {
        let free = velocities.is_some();
        let results: Vec<Result<SampleEval, FitError>> = self
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let trial = &self.dataset.trials[s.trial];
                let mut wrt = if gradient { self.fitted.clone() } else { Vec::new() };
                if gradient && free {
                    wrt.extend(velocity_ids(s.state.n));
                }
                eval_sample(s, trial, params, &wrt, velocities.map(|v| v[i].as_slice()))
            })
            .collect();
        let mut out = Evaluation {
            loss: 0.0,
            grads: vec![0.0; self.fitted.len()],
            velocity_grads: Vec::with_capacity(self.samples.len()),
            failures: Vec::new(),
        };
        let k = self.fitted.len();
        for (s, r) in self.samples.iter().zip(results) {
            match r {
                Ok(e) => {
                    out.loss += e.loss;
                    if gradient {
                        for (g, x) in out.grads.iter_mut().zip(&e.grads[..k]) {
                            *g += x;
                        }
                        out.velocity_grads.push(e.grads[k..].to_vec());
                    } else {
                        out.velocity_grads.push(Vec::new());
                    }
                }
                Err(err) => {
                    out.failures.push(format!("{} step {}: {err}", self.dataset.trials[s.trial].name, s.step));
                    out.velocity_grads.push(vec![0.0; if gradient && free { 3 * (s.state.n - 1) } else { 0 }]);
                }
            }
        }
        out
    }
}

fn to_coords(params: &PhysParams, fitted: &[ParamId], coords: &[Coord]) -> Vec<f64> {
    fitted
        .iter()
        .zip(coords)
        .map(|(id, c)| {
            let p = params.get(*id).expect("fitted parameter exists");
            match c {
                Coord::Log { floor } => p.max(*floor).ln(),
                Coord::Neural => p,
            }
        })
        .collect()
}

fn from_coords(base: &PhysParams, fitted: &[ParamId], coords: &[Coord], x: &[f64]) -> PhysParams {
    let mut p = base.clone();
    for ((id, c), &xi) in fitted.iter().zip(coords).zip(x) {
        let value = match c {
            Coord::Log { floor } => xi.exp().max(*floor),
            Coord::Neural => xi,
        };
        p.set(*id, value);
    }
    p.project();
    p
}

fn fd_check(problem: &Problem, params: &PhysParams, analytic: &[f64], velocities: Option<&[Vec<[f64; 3]>]>, tol: f64) -> Vec<FdCheck> {
    problem
        .fitted
        .iter()
        .enumerate()
        .filter(|(_, id)| !matches!(id, ParamId::InitialVelocity { .. }))
        .take(3)
        .map(|(i, &id)| {
            let p0 = params.get(id).expect("fitted parameter exists");
            let h = 1e-6 * p0.abs().max(1e-3);
            let at = |v: f64| {
                let mut p = params.clone();
                p.set(id, v);
                problem.evaluate(&p, velocities, false).loss
            };
            let fd = (at(p0 + h) - at(p0 - h)) / (2.0 * h);
            let ad = analytic[i];
            let scale = ad.abs().max(fd.abs());
            let rel_error = if scale < 1e-12 { 0.0 } else { (ad - fd).abs() / scale };
            FdCheck {
                param: id,
                analytic: ad,
                finite_difference: fd,
                rel_error,
                passed: rel_error <= tol,
            }
        })
        .collect()
}

/// Fits simulator parameters to the non-held-out trials with AdamW on the one-step loss.
///
/// Physical scalars move in log space (relative steps, positivity built in) and are clamped to
/// their valid ranges after each update; neural weights move in their own units with decoupled
/// weight decay. Returns the best-loss iterate.
pub fn fit_parameters(
    dataset: &TrajectoryDataset,
    initial: &PhysParams,
    config: &OptimizerConfig,
) -> Result<FitReport, FitError> {
    dataset.validate()?;
    let max_links = dataset
        .trials
        .iter()
        .flat_map(|t| t.frames.iter().map(Frame::n))
        .max()
        .unwrap_or(2);
    initial
        .validate(max_links.max(2))
        .map_err(|e| FitError::Invalid(e.to_string()))?;
    let fitted = config.params.clone().unwrap_or_else(|| default_fit_set(initial));
    for id in &fitted {
        if initial.get(*id).is_none() {
            return Err(FitError::Invalid(format!("cannot fit {id:?}")));
        }
    }

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    for (i, t) in dataset.trials.iter().enumerate() {
        substeps(initial, t.frame_interval)?;
        let (s, k) = trial_samples(t, i);
        if s.is_empty() {
            warnings.push(format!("{}: no usable frames", t.name));
        }
        skipped.extend(k);
        if !t.holdout {
            samples.extend(s);
        }
    }
    if samples.is_empty() {
        return Err(FitError::Uninformative("no usable frames in the training trials".into()));
    }
    let problem = Problem {
        dataset,
        samples,
        fitted: fitted.clone(),
    };
    let coords: Vec<Coord> = fitted.iter().map(|id| coord_of(initial, *id)).collect();
    let lr: Vec<f64> = coords
        .iter()
        .map(|c| match c {
            Coord::Log { .. } => config.lr_physical,
            Coord::Neural => config.lr_neural,
        })
        .collect();
    let decay: Vec<f64> = coords
        .iter()
        .map(|c| if *c == Coord::Neural { config.weight_decay } else { 0.0 })
        .collect();

    let mut velocities: Option<Vec<Vec<[f64; 3]>>> = config
        .free_velocities
        .then(|| problem.samples.iter().map(|s| s.state.v[..s.state.n].to_vec()).collect());
    let mut vel_adam = Adam::new(velocities.as_ref().map_or(0, |v| v.iter().map(|x| 3 * (x.len() - 1)).sum()));

    let mut x = to_coords(initial, &fitted, &coords);
    let mut adam = Adam::new(x.len());
    let mut params = initial.clone();
    let mut history = Vec::with_capacity(config.iterations + 1);
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut above = 0usize;
    let mut diverged = false;
    let mut checks = Vec::new();

    for it in 0..=config.iterations {
        let need_grad = it < config.iterations;
        let eval = problem.evaluate(&params, velocities.as_deref(), need_grad);
        if !eval.failures.is_empty() {
            warnings.push(format!("iteration {it}: {} frames failed, first: {}", eval.failures.len(), eval.failures[0]));
        }
        if !eval.loss.is_finite() {
            warnings.push(format!("iteration {it}: non-finite loss, stopping"));
            diverged = true;
            break;
        }
        history.push(eval.loss);
        if eval.loss < best.0 {
            best = (eval.loss, params.clone(), it);
        }
        if eval.loss > config.divergence_factor * history[0].max(DIVERGENCE_FLOOR) {
            above += 1;
            if above >= config.divergence_patience {
                diverged = true;
                break;
            }
        } else {
            above = 0;
        }
        if !need_grad {
            break;
        }
        if it == 0 {
            checks = fd_check(&problem, &params, &eval.grads, velocities.as_deref(), config.fd_tolerance);
            if let Some(c) = checks.iter().find(|c| !c.passed) {
                warnings.push(format!(
                    "finite-difference check failed for {:?}: analytic {} vs {}",
                    c.param, c.analytic, c.finite_difference
                ));
            }
        }
        // chain rule into optimizer coordinates
        let g: Vec<f64> = eval
            .grads
            .iter()
            .zip(&fitted)
            .zip(&coords)
            .map(|((g, id), c)| match c {
                Coord::Log { .. } => g * params.get(*id).expect("fitted"),
                Coord::Neural => *g,
            })
            .collect();
        adam.step(&mut x, &g, &lr, &decay, config);
        for (xi, c) in x.iter_mut().zip(&coords) {
            if let Coord::Log { floor } = c {
                *xi = xi.max(floor.ln());
            }
        }
        params = from_coords(initial, &fitted, &coords, &x);
        x = to_coords(&params, &fitted, &coords);

        if let Some(vel) = velocities.as_mut() {
            let mut flat: Vec<f64> = vel.iter().flat_map(|v| v[1..].iter().flatten().copied()).collect();
            let g: Vec<f64> = eval.velocity_grads.concat();
            let lr = vec![config.lr_physical; flat.len()];
            let decay = vec![0.0; flat.len()];
            vel_adam.step(&mut flat, &g, &lr, &decay, config);
            let mut it = flat.into_iter();
            for v in vel.iter_mut() {
                for link in v[1..].iter_mut() {
                    for c in link.iter_mut() {
                        *c = it.next().expect("sized");
                    }
                }
            }
        }
    }

    let (best_loss, best_params, best_iteration) = best;
    let mut trial_mse = Vec::with_capacity(dataset.trials.len());
    for t in &dataset.trials {
        let l = trajectory_loss(&best_params, t)?;
        trial_mse.push(TrialMse {
            trial: t.name.clone(),
            holdout: t.holdout,
            frames: l.frames_used,
            mse: l.mse(),
        });
    }
    Ok(FitReport {
        model: initial.stiffness.name().to_string(),
        fitted,
        initial_params: initial.clone(),
        params: best_params,
        initial_loss: history.first().copied().unwrap_or(f64::NAN),
        best_loss,
        best_iteration,
        loss_history: history,
        trial_mse,
        optimizer: config.clone(),
        fd_check: checks,
        skipped_frames: skipped,
        warnings,
        diverged,
    })
}
