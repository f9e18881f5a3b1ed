//! Time stepping, link insertion, batched rollouts and gradients through rollouts.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{Real, Tape, Var};
use crate::dynamics::{
    build_projection_problem, build_step_problem, constraint_violation, distal_jacobian, distal_residual, revolute_residual, Coeffs, ParamId, PhysParams, VineState,
};
use crate::qpdiff::{DenseQp, QpDump, QpError, QpScalar, QpSettings, QpStatus};
use crate::rng;
use crate::scene::{vine_contacts, Scene};

/// Fraction of `d_segment` a freshly inserted tip starts with when the overflow is zero.
pub const MIN_TIP_FRACTION: f64 = 1e-6;
/// Constraint violation (relative to `d_segment`) that triggers a position projection.
pub const PROJECTION_TOL: f64 = 1e-6;
const MAX_PROJECTIONS: usize = 4;
/// Drift (relative to `d_segment`) that the projection must get below.
const MAX_DRIFT: f64 = 1e-4;
/// Largest per-step link rotation (rad) the linearized step trusts. With the base pinned, any
/// runaway translation shows up as rotation too.
pub const MAX_STEP_ROTATION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("step {step}: {reason}")]
    Step {
        step: usize,
        reason: String,
        dump: Box<QpDump>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub steps: usize,
    /// Overrides the params file's `dt_s`.
    pub dt: Option<f64>,
    pub batch: usize,
    pub max_links: usize,
    pub seed: u64,
    pub record_every: usize,
    /// Disable to keep the topology fixed (used when fitting single steps).
    pub insert_links: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            steps: 100,
            dt: None,
            batch: 1,
            max_links: 40,
            seed: 0,
            record_every: 1,
            insert_links: true,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.batch < 1 || self.max_links < 2 || self.record_every < 1 {
            return Err(EngineError::Invalid("need batch >= 1, max_links >= 2, record_every >= 1".into()));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(EngineError::Invalid("dt must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// What happened during one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub status: QpStatus,
    pub iterations: usize,
    pub contacts: usize,
    pub active_contacts: usize,
    /// Growth row had to be relaxed (tip blocked).
    pub stalled: bool,
    pub inserted: bool,
    /// `max |c(q)|` after the step.
    pub revolute_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Step index of every snapshot (0 for the initial state).
    pub steps: Vec<usize>,
    pub states: Vec<VineState>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn last(&self) -> &VineState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

fn qp_settings() -> QpSettings {
    QpSettings::default()
}

fn dump_of<T: Real>(qp: &DenseQp<T>, sol: Option<crate::qpdiff::QpSolution>, err: Option<String>) -> Box<QpDump> {
    Box::new(QpDump {
        problem: qp.values(),
        solution: sol,
        error: err,
    })
}

/// Moves equality row `row` into the inequalities as `a' v <= b`.
fn relax_row<T: Real>(qp: &DenseQp<T>, row: usize) -> DenseQp<T> {
    let n = qp.n;
    let mut out = qp.clone();
    let a_row: Vec<T> = out.a_eq.drain(row * n..(row + 1) * n).collect();
    let b = out.b_eq.remove(row);
    out.g_ineq.extend(a_row);
    out.h_ineq.push(b);
    out
}

fn step_too_large<T: Real>(z: &[T], dt: f64) -> bool {
    z.chunks(3).any(|v| v[2].value().abs() * dt > MAX_STEP_ROTATION)
}

/// One step over any differentiable scalar. Failing steps leave the input untouched.
pub fn step_generic<T: QpScalar>(
    state: &VineState<T>,
    coeffs: &Coeffs<T>,
    scene: &Scene,
    u: T,
) -> Result<(VineState<T>, StepDiagnostics), (String, Box<QpDump>)> {
    let n = state.n;
    let dt = coeffs.dt;
    let values = state.values();
    let contacts: Vec<_> = vine_contacts(&values, scene, coeffs.radius, coeffs.activation)
        .into_iter()
        .filter(|c| c.link >= 1)
        .collect();
    let u = if state.growth_halted { T::zero() } else { u };
    let problem = build_step_problem(state, coeffs, scene, &contacts, u);
    let settings = qp_settings();

    let mut stalled = false;
    let mut qp = problem.qp;
    let mut result = T::qp_layer(&qp, None, &settings);
    let infeasible = match &result {
        Ok((_, sol, _)) => sol.status == QpStatus::Infeasible,
        Err(QpError::NotSolved(QpStatus::Infeasible)) => true,
        _ => false,
    };
    // A feasible step can still demand absurd rotations when a straight chain pushes head-on
    // into an obstacle; such steps are treated like infeasible ones.
    let excessive = |z: &[T]| step_too_large(z, dt);
    let too_large = matches!(&result, Ok((z, sol, _)) if sol.status == QpStatus::Solved && excessive(z));
    if infeasible || too_large {
        // Tip pushing head-on into an obstacle: allow growth to fall short of u.
        stalled = true;
        qp = relax_row(&qp, problem.growth_row);
        result = T::qp_layer(&qp, None, &settings);
        if let Ok((z, sol, _)) = &result {
            if sol.status == QpStatus::Solved && excessive(z) {
                let reason = "step exceeds the linearization bounds even with growth relaxed".to_string();
                return Err((reason.clone(), dump_of(&qp, Some(sol.clone()), Some(reason))));
            }
        }
    }
    let (z, sol, _) = match result {
        Ok(r) => r,
        Err(e) => return Err((e.to_string(), dump_of(&qp, None, Some(e.to_string())))),
    };
    if sol.status != QpStatus::Solved {
        let reason = format!("QP finished with status {:?}", sol.status);
        return Err((reason.clone(), dump_of(&qp, Some(sol), Some(reason))));
    }

    let mut next = state.clone();
    for link in 1..n {
        for axis in 0..3 {
            let vel = z[3 * (link - 1) + axis];
            next.v[link][axis] = vel;
            next.q[link][axis] = state.q[link][axis] + vel * dt;
        }
    }
    next.v[0] = [T::zero(); 3];
    // tip_length advances by the realized axial growth
    let r_ax = distal_residual(&state.q, n, state.d_segment, state.tip_length)[0];
    let [axial, _] = distal_jacobian(&state.q, n, state.d_segment);
    let mut rate = T::zero();
    for (j, g) in axial {
        rate += g * next.v[j / 3][j % 3];
    }
    let grown = state.tip_length + r_ax + rate * dt;
    let floor = MIN_TIP_FRACTION * state.d_segment;
    next.degenerate = state.degenerate || grown.value() < floor;
    next.tip_length = if grown.value() < floor { T::cst(floor) } else { grown };

    // Post-stabilization: pull positions back onto the joint manifold when linearization
    // error exceeds the projection tolerance.
    let mut rebook = false;
    for _ in 0..MAX_PROJECTIONS {
        if constraint_violation(&next) <= PROJECTION_TOL * next.d_segment {
            break;
        }
        let values = next.values();
        let contacts: Vec<_> = vine_contacts(&values, scene, coeffs.radius, coeffs.activation)
            .into_iter()
            .filter(|c| c.link >= 1)
            .collect();
        let proj = build_projection_problem(&next, coeffs, scene, &contacts);
        let mut proj_qp = proj.qp;
        let mut solved = T::qp_layer(&proj_qp, None, &settings);
        if matches!(&solved, Ok((_, sol, _)) if sol.status == QpStatus::Infeasible) {
            // Tip wedged between contacts: let it fall short of its booked length.
            proj_qp = relax_row(&proj_qp, proj.growth_row);
            solved = T::qp_layer(&proj_qp, None, &settings);
            rebook = true;
        }
        match solved {
            Ok((delta, sol, _)) if sol.status == QpStatus::Solved => {
                // velocities follow the corrected displacement, so v = (q' - q) / dt holds
                for link in 1..n {
                    for axis in 0..3 {
                        let d = delta[3 * (link - 1) + axis];
                        next.q[link][axis] += d;
                        next.v[link][axis] += d * (1.0 / dt);
                    }
                }
            }
            Ok((_, sol, _)) => {
                let reason = format!("position projection finished with status {:?}", sol.status);
                return Err((reason.clone(), dump_of(&proj_qp, Some(sol), Some(reason))));
            }
            Err(e) => return Err((e.to_string(), dump_of(&proj_qp, None, Some(e.to_string())))),
        }
    }
    if constraint_violation(&next) > MAX_DRIFT * next.d_segment {
        let reason = format!("joint drift {:.3e} m persists after projection", constraint_violation(&next));
        return Err((reason.clone(), dump_of(&qp, Some(sol), Some(reason))));
    }
    if rebook {
        stalled = true;
        next.tip_length += distal_residual(&next.q, n, next.d_segment, next.tip_length)[0];
    }

    let res = revolute_residual(&next.q, n, next.d_segment);
    let m_ineq = sol.mu.len();
    let contact_rows = if stalled { m_ineq - 1 } else { m_ineq };
    let diag = StepDiagnostics {
        status: sol.status,
        iterations: sol.iterations,
        contacts: contacts.len(),
        active_contacts: sol.active_set.iter().filter(|&&i| i < contact_rows).count(),
        stalled,
        inserted: false,
        revolute_residual: res.iter().fold(0.0f64, |m, r| m.max(r.value().abs())),
    };
    Ok((next, diag))
}

/// Plain `f64` step with the params' own `dt`.
pub fn step(
    state: &VineState,
    params: &PhysParams,
    scene: &Scene,
    u: f64,
) -> Result<(VineState, StepDiagnostics), EngineError> {
    step_generic(state, &params.coeffs_f64(), scene, u).map_err(|(reason, dump)| EngineError::Step {
        step: 0,
        reason,
        dump,
    })
}

/// Outcome of [`maybe_add_link`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insertion {
    None,
    Inserted,
    /// Capacity reached; growth is halted from now on.
    Halted,
}

/// Promotes the tip to a full link once it has grown to `d_segment`.
///
/// The former tip is pulled back along its axis to exactly one half-length past its joint, and
/// a new tip with the same heading and velocity is placed the overflow length beyond it.
pub fn maybe_add_link<T: Real>(state: &mut VineState<T>) -> Insertion {
    let d = state.d_segment;
    if state.tip_length.value() < d || state.growth_halted {
        return Insertion::None;
    }
    let n = state.n;
    if n + 1 > state.capacity() {
        state.growth_halted = true;
        if state.tip_length.value() > d {
            state.tip_length = T::cst(d);
        }
        return Insertion::Halted;
    }
    let h = 0.5 * d;
    let prev = state.q[n - 2];
    let joint = [prev[0] + prev[2].cos() * h, prev[1] + prev[2].sin() * h];
    let heading = state.q[n - 1][2];
    let e = [heading.cos(), heading.sin()];
    let snapped = [joint[0] + e[0] * h, joint[1] + e[1] * h, heading];
    let overflow = state.tip_length - d;
    let new_len = if overflow.value() > MIN_TIP_FRACTION * d {
        overflow
    } else {
        T::cst(MIN_TIP_FRACTION * d)
    };
    state.q[n - 1] = snapped;
    state.q[n] = [snapped[0] + e[0] * new_len, snapped[1] + e[1] * new_len, heading];
    state.v[n] = state.v[n - 1];
    state.tip_length = new_len;
    state.n = n + 1;
    Insertion::Inserted
}

fn coeffs_for(params: &PhysParams, config: &RolloutConfig) -> PhysParams {
    let mut p = params.clone();
    if let Some(dt) = config.dt {
        p.dt_s = dt;
    }
    p
}

fn prepare(initial: &VineState, params: &PhysParams, config: &RolloutConfig) -> Result<(VineState, PhysParams), EngineError> {
    config.validate()?;
    initial.validate().map_err(|e| EngineError::Invalid(e.to_string()))?;
    if initial.n > config.max_links {
        return Err(EngineError::Invalid(format!(
            "initial state has {} links, max_links is {}",
            initial.n, config.max_links
        )));
    }
    let params = coeffs_for(params, config);
    params.validate(config.max_links).map_err(|e| EngineError::Invalid(e.to_string()))?;
    Ok((initial.clone().with_capacity(config.max_links), params))
}

struct Runner {
    state: VineState,
    coeffs: Coeffs<f64>,
    u: f64,
    insert: bool,
    traj: Trajectory,
    failed: Option<EngineError>,
}

impl Runner {
    fn new(state: VineState, params: &PhysParams, insert: bool) -> Self {
        Runner {
            traj: Trajectory {
                times: vec![0.0],
                steps: vec![0],
                states: vec![state.clone()],
                diagnostics: Vec::new(),
            },
            state,
            coeffs: params.coeffs_f64(),
            u: params.growth_mps,
            insert,
            failed: None,
        }
    }
}

fn advance(runner: &mut Runner, scene: &Scene, k: usize, record_every: usize) {
    if runner.failed.is_some() {
        return;
    }
    match step_generic(&runner.state, &runner.coeffs, scene, runner.u) {
        Ok((mut next, mut diag)) => {
            if runner.insert {
                diag.inserted = maybe_add_link(&mut next) == Insertion::Inserted;
            }
            runner.state = next;
            runner.traj.diagnostics.push(diag);
            if (k + 1).is_multiple_of(record_every) {
                runner.traj.times.push((k + 1) as f64 * runner.coeffs.dt);
                runner.traj.steps.push(k + 1);
                runner.traj.states.push(runner.state.clone());
            }
        }
        Err((reason, dump)) => runner.failed = Some(EngineError::Step { step: k, reason, dump }),
    }
}

/// Runs `config.steps` steps (each followed by a possible link insertion).
pub fn rollout(
    initial: &VineState,
    params: &PhysParams,
    scene: &Scene,
    config: &RolloutConfig,
) -> Result<Trajectory, EngineError> {
    let (state, params) = prepare(initial, params, config)?;
    let mut runner = Runner::new(state, &params, config.insert_links);
    for k in 0..config.steps {
        advance(&mut runner, scene, k, config.record_every);
        if let Some(e) = runner.failed.take() {
            return Err(e);
        }
    }
    Ok(runner.traj)
}

/// Worker count: explicit request, else `VINESIM_WORKERS`, else the available parallelism.
pub fn resolve_workers(requested: Option<usize>) -> usize {
    requested
        .or_else(|| std::env::var("VINESIM_WORKERS").ok().and_then(|v| v.parse().ok()))
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
        .max(1)
}

#[derive(Debug)]
pub struct BatchRollout {
    pub trajectories: Vec<Result<Trajectory, EngineError>>,
    /// Wall-clock milliseconds of every lockstep iteration (all elements advanced once).
    pub iteration_ms: Vec<f64>,
}

impl BatchRollout {
    pub fn mean_iteration_ms(&self) -> f64 {
        if self.iteration_ms.is_empty() {
            0.0
        } else {
            self.iteration_ms.iter().sum::<f64>() / self.iteration_ms.len() as f64
        }
    }
}

/// Advances independent vines in lockstep. `params` holds one shared entry or one per element.
pub fn rollout_batch(
    initials: &[VineState],
    params: &[PhysParams],
    scene: &Scene,
    config: &RolloutConfig,
    workers: Option<usize>,
) -> Result<BatchRollout, EngineError> {
    config.validate()?;
    if params.len() != 1 && params.len() != initials.len() {
        return Err(EngineError::Invalid(format!(
            "{} parameter sets for {} vines",
            params.len(),
            initials.len()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_workers(workers))
        .build()
        .map_err(|e| EngineError::Invalid(e.to_string()))?;

    let mut runners: Vec<Result<Runner, EngineError>> = initials
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = if params.len() == 1 { &params[0] } else { &params[i] };
            prepare(s, p, config).map(|(s, p)| Runner::new(s, &p, config.insert_links))
        })
        .collect();

    let mut iteration_ms = Vec::with_capacity(config.steps);
    for k in 0..config.steps {
        let start = Instant::now();
        pool.install(|| {
            runners.par_iter_mut().for_each(|r| {
                if let Ok(r) = r {
                    advance(r, scene, k, config.record_every);
                }
            })
        });
        iteration_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let trajectories = runners
        .into_iter()
        .map(|r| {
            r.and_then(|mut r| match r.failed.take() {
                Some(e) => Err(e),
                None => Ok(r.traj),
            })
        })
        .collect();
    Ok(BatchRollout {
        trajectories,
        iteration_ms,
    })
}

/// Straight initial vines with launch headings drawn uniformly from `angle_range` around the
/// base heading, one named stream per trial.
#[allow(clippy::too_many_arguments)]
pub fn launch_states(
    base: [f64; 3],
    n: usize,
    d_segment: f64,
    tip_length: f64,
    capacity: usize,
    count: usize,
    seed: u64,
    angle_range: [f64; 2],
) -> Result<Vec<VineState>, EngineError> {
    (0..count)
        .map(|trial| {
            let mut rng = rng::stream(seed, "launch", trial as u64);
            let a = rng.gen_range(angle_range[0]..=angle_range[1]);
            VineState::new_straight([base[0], base[1], base[2] + a], n, d_segment, tip_length, capacity)
                .map_err(|e| EngineError::Invalid(e.to_string()))
        })
        .collect()
}

/// Scalar objective over recorded states.
pub trait TrajectoryLoss {
    fn eval<T: Real>(&self, states: &[VineState<T>]) -> T;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    /// Aligned with the requested parameter list.
    pub grads: Vec<f64>,
    /// A link insertion happened inside the window; its timing was treated as fixed.
    pub topology_changed: bool,
    pub final_state: VineState,
}

/// Loss of a rollout and its gradient with respect to `wrt`, by reverse accumulation through
/// every step (QP nodes use the implicit KKT adjoint).
pub fn loss_gradient<L: TrajectoryLoss>(
    initial: &VineState,
    params: &PhysParams,
    scene: &Scene,
    config: &RolloutConfig,
    loss: &L,
    wrt: &[ParamId],
) -> Result<LossGradient, EngineError> {
    let (state, params) = prepare(initial, params, config)?;
    for id in wrt {
        let ok = match *id {
            ParamId::InitialVelocity { link, axis } => link >= 1 && link < state.n && axis < 3,
            other => params.get(other).is_some(),
        };
        if !ok {
            return Err(EngineError::Invalid(format!("cannot differentiate with respect to {id:?}")));
        }
    }
    let tape = Tape::new();
    let mut vars: HashMap<ParamId, Var<'_>> = HashMap::new();
    let mut lift = |id: ParamId, v: f64| -> Var<'_> {
        if wrt.contains(&id) {
            *vars.entry(id).or_insert_with(|| tape.var(v))
        } else {
            Var::constant(v)
        }
    };
    let coeffs = params.coeffs(&mut lift);
    let u = coeffs.growth;
    let mut current = state.lift(|link, axis, v| lift(ParamId::InitialVelocity { link, axis }, v));

    let mut recorded = vec![current.clone()];
    let mut topology_changed = false;
    for k in 0..config.steps {
        let (mut next, _) = step_generic(&current, &coeffs, scene, u).map_err(|(reason, dump)| EngineError::Step {
            step: k,
            reason,
            dump,
        })?;
        if config.insert_links && maybe_add_link(&mut next) == Insertion::Inserted {
            topology_changed = true;
        }
        current = next;
        if (k + 1) % config.record_every == 0 {
            recorded.push(current.clone());
        }
    }
    let value = loss.eval(&recorded);
    let grad = tape.gradient(value);
    let grads = wrt
        .iter()
        .map(|id| vars.get(id).map_or(0.0, |v| grad.wrt(*v)))
        .collect();
    Ok(LossGradient {
        loss: value.value(),
        grads,
        topology_changed,
        final_state: current.values(),
    })
}

/// Total length change of each step and the growth it should match.
pub fn length_increments(traj: &Trajectory) -> Vec<f64> {
    traj.states.windows(2).map(|w| w[1].length() - w[0].length()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stiffness::Stiffness;

    fn params(u: f64) -> PhysParams {
        PhysParams {
            mass_kg: 0.1,
            inertia_kgm2: 0.01,
            damping_nms: 0.05,
            growth_mps: u,
            dt_s: 0.01,
            d_segment_m: 0.05,
            collision_radius_m: None,
            activation_m: None,
            stiffness: Stiffness::linear(2.0),
        }
    }

    fn open() -> Scene {
        Scene::open([0.0; 3], [-2.0, -2.0, 2.0, 2.0])
    }

    #[test]
    fn rest_is_fixed_point() {
        let s = VineState::new_straight([0.0; 3], 5, 0.05, 0.02, 10).unwrap();
        let (next, diag) = step(&s, &params(0.0), &open(), 0.0).unwrap();
        assert_eq!(diag.status, QpStatus::Solved);
        for (a, b) in s.q.iter().zip(&next.q) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-15);
            }
        }
        assert!((next.tip_length - s.tip_length).abs() < 1e-15);
    }

    #[test]
    fn insertion_rules() {
        let mut s = VineState::new_straight([0.0; 3], 3, 0.05, 0.025, 5).unwrap();
        assert_eq!(maybe_add_link(&mut s), Insertion::None);
        let mut s = VineState::new_straight([0.0; 3], 3, 0.05, 0.05, 5).unwrap();
        assert_eq!(maybe_add_link(&mut s), Insertion::Inserted);
        assert_eq!(s.n, 4);
        assert!((s.tip_length - 0.05 * MIN_TIP_FRACTION).abs() < 1e-18);
        assert!(revolute_residual(&s.q, 4, 0.05).iter().all(|r| r.abs() < 1e-9));
        let mut s = VineState::new_straight([0.0; 3], 3, 0.05, 0.05, 3).unwrap();
        assert_eq!(maybe_add_link(&mut s), Insertion::Halted);
        assert!(s.growth_halted && s.n == 3);
    }

    #[test]
    fn zero_steps_keeps_initial_state() {
        let s = VineState::new_straight([0.0; 3], 3, 0.05, 0.02, 10).unwrap();
        let cfg = RolloutConfig {
            steps: 0,
            ..Default::default()
        };
        let t = rollout(&s, &params(0.3), &open(), &cfg).unwrap();
        assert_eq!(t.states.len(), 1);
        assert_eq!(t.times, vec![0.0]);
    }

    #[test]
    fn workers_resolution() {
        assert_eq!(resolve_workers(Some(3)), 3);
        assert_eq!(resolve_workers(Some(0)), 1);
    }
}
