//! Vine state in maximal coordinates, constraint residuals and the per-step QP.
//!
//! Link 0 is the pinned base. Full links have their centres `d_segment` apart, with the joint
//! midway; the distal (tip) link is joined to its neighbour only through the growth row, its
//! centre separation tracking `tip_length`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::Real;
use crate::qpdiff::DenseQp;
use crate::scene::{distance_and_normal, Contact, Scene};
use crate::stiffness::{moment, Stiffness, StiffnessError, StiffnessModel};

/// Separation below which the distal pair axis is considered degenerate.
pub const MIN_SEPARATION: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("invalid vine state: {0}")]
    Invalid(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Stiffness(#[from] StiffnessError),
}

/// Planar vine configuration; `q` and `v` are padded to `capacity` links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VineState<T = f64> {
    pub n: usize,
    pub q: Vec<[T; 3]>,
    pub v: Vec<[T; 3]>,
    pub d_segment: f64,
    pub tip_length: T,
    /// Set once an insertion was refused for lack of capacity; growth stops.
    #[serde(default)]
    pub growth_halted: bool,
    /// Set when the distal pair separation had to be clamped.
    #[serde(default)]
    pub degenerate: bool,
}

impl VineState<f64> {
    /// Straight vine along the base heading, at rest.
    pub fn new_straight(
        base: [f64; 3],
        n: usize,
        d_segment: f64,
        tip_length: f64,
        capacity: usize,
    ) -> Result<Self, StateError> {
        if n < 2 || capacity < n {
            return Err(StateError::Invalid(format!("need 2 <= n <= capacity, got n = {n}, capacity = {capacity}")));
        }
        if !(d_segment > 0.0 && d_segment.is_finite()) {
            return Err(StateError::Invalid("d_segment must be positive".into()));
        }
        let (s, c) = base[2].sin_cos();
        let mut q = vec![[0.0; 3]; capacity];
        for (k, qk) in q.iter_mut().enumerate().take(n - 1) {
            let r = k as f64 * d_segment;
            *qk = [base[0] + r * c, base[1] + r * s, base[2]];
        }
        let r = (n - 2) as f64 * d_segment + tip_length;
        q[n - 1] = [base[0] + r * c, base[1] + r * s, base[2]];
        let state = VineState {
            n,
            q,
            v: vec![[0.0; 3]; capacity],
            d_segment,
            tip_length,
            growth_halted: false,
            degenerate: false,
        };
        state.validate()?;
        Ok(state)
    }

    /// Chain at rest with the given absolute link headings (`headings[0]` is the base heading).
    pub fn from_headings(
        base: [f64; 2],
        headings: &[f64],
        d_segment: f64,
        tip_length: f64,
        capacity: usize,
    ) -> Result<Self, StateError> {
        let n = headings.len();
        if n < 2 || capacity < n {
            return Err(StateError::Invalid(format!("need 2 <= n <= capacity, got n = {n}, capacity = {capacity}")));
        }
        let h = 0.5 * d_segment;
        let mut q = vec![[0.0; 3]; capacity];
        q[0] = [base[0], base[1], headings[0]];
        for k in 1..n {
            let prev = q[k - 1];
            let joint = [prev[0] + h * prev[2].cos(), prev[1] + h * prev[2].sin()];
            let arm = if k == n - 1 { tip_length - h } else { h };
            q[k] = [joint[0] + arm * headings[k].cos(), joint[1] + arm * headings[k].sin(), headings[k]];
        }
        let state = VineState {
            n,
            q,
            v: vec![[0.0; 3]; capacity],
            d_segment,
            tip_length,
            growth_halted: false,
            degenerate: false,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<(), StateError> {
        let bad = |m: String| Err(StateError::Invalid(m));
        if self.n < 2 {
            return bad(format!("n = {} < 2", self.n));
        }
        if self.q.len() != self.v.len() || self.q.len() < self.n {
            return bad("state arrays shorter than n".into());
        }
        if !(self.tip_length > 0.0 && self.tip_length <= self.d_segment * (1.0 + 1e-9)) {
            return bad(format!("tip_length {} outside (0, d_segment]", self.tip_length));
        }
        let finite = self.q[..self.n].iter().chain(&self.v[..self.n]).flatten().all(|x| x.is_finite());
        if !finite {
            return bad("non-finite coordinates".into());
        }
        Ok(())
    }

    /// Lifts every coordinate into `T` (as constants unless `lift` records them).
    pub fn lift<T: Real>(&self, mut lift: impl FnMut(usize, usize, f64) -> T) -> VineState<T> {
        VineState {
            n: self.n,
            q: self.q.iter().map(|p| [T::cst(p[0]), T::cst(p[1]), T::cst(p[2])]).collect(),
            v: self
                .v
                .iter()
                .enumerate()
                .map(|(k, w)| [lift(k, 0, w[0]), lift(k, 1, w[1]), lift(k, 2, w[2])])
                .collect(),
            d_segment: self.d_segment,
            tip_length: T::cst(self.tip_length),
            growth_halted: self.growth_halted,
            degenerate: self.degenerate,
        }
    }

    /// Grows or shrinks the padding.
    pub fn with_capacity(mut self, capacity: usize) -> Self {
        let cap = capacity.max(self.n);
        self.q.resize(cap, [0.0; 3]);
        self.v.resize(cap, [0.0; 3]);
        self
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.q[..self.n].iter().map(|p| [p[0], p[1]]).collect()
    }
}

impl<T: Real> VineState<T> {
    pub fn capacity(&self) -> usize {
        self.q.len()
    }

    pub fn values(&self) -> VineState<f64> {
        let val = |a: &[T; 3]| [a[0].value(), a[1].value(), a[2].value()];
        VineState {
            n: self.n,
            q: self.q.iter().map(val).collect(),
            v: self.v.iter().map(val).collect(),
            d_segment: self.d_segment,
            tip_length: self.tip_length.value(),
            growth_halted: self.growth_halted,
            degenerate: self.degenerate,
        }
    }

    /// Centre-line length from the base centre to the tip centre: `(n - 2) d + tip_length`.
    pub fn length(&self) -> T {
        self.tip_length + (self.n - 2) as f64 * self.d_segment
    }

    pub fn tip(&self) -> [T; 3] {
        self.q[self.n - 1]
    }

    /// Distance between the tip centre and its neighbour.
    pub fn separation(&self) -> T {
        let a = self.q[self.n - 2];
        let b = self.q[self.n - 1];
        ((b[0] - a[0]).square() + (b[1] - a[1]).square()).sqrt()
    }
}

fn dir<T: Real>(theta: T) -> [T; 2] {
    [theta.cos(), theta.sin()]
}

/// Joint mismatch for every full pair `(k, k + 1)`, `k = 0..n-2`, two rows per pair.
pub fn revolute_residual<T: Real>(q: &[[T; 3]], n: usize, d_segment: f64) -> Vec<T> {
    let h = 0.5 * d_segment;
    let mut r = Vec::with_capacity(2 * n.saturating_sub(2));
    for k in 0..n.saturating_sub(2) {
        let (a, b) = (q[k], q[k + 1]);
        let (da, db) = (dir(a[2]), dir(b[2]));
        r.push(a[0] + da[0] * h - b[0] + db[0] * h);
        r.push(a[1] + da[1] * h - b[1] + db[1] * h);
    }
    r
}

/// Sparse matrix in coordinate form.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplets<T> {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, T)>,
}

impl<T: Real> Triplets<T> {
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.cols]; self.rows];
        for &(i, j, v) in &self.entries {
            m[i][j] += v.value();
        }
        m
    }
}

/// Analytic Jacobian of [`revolute_residual`] over all `3 n` coordinates.
pub fn revolute_jacobian<T: Real>(q: &[[T; 3]], n: usize, d_segment: f64) -> Triplets<T> {
    let h = 0.5 * d_segment;
    let pairs = n.saturating_sub(2);
    let mut entries = Vec::with_capacity(10 * pairs);
    for k in 0..pairs {
        let (ta, tb) = (q[k][2], q[k + 1][2]);
        let (rx, ry) = (2 * k, 2 * k + 1);
        let (a, b) = (3 * k, 3 * (k + 1));
        entries.push((rx, a, T::cst(1.0)));
        entries.push((ry, a + 1, T::cst(1.0)));
        entries.push((rx, a + 2, -ta.sin() * h));
        entries.push((ry, a + 2, ta.cos() * h));
        entries.push((rx, b, T::cst(-1.0)));
        entries.push((ry, b + 1, T::cst(-1.0)));
        entries.push((rx, b + 2, -tb.sin() * h));
        entries.push((ry, b + 2, tb.cos() * h));
    }
    Triplets {
        rows: 2 * pairs,
        cols: 3 * n,
        entries,
    }
}

/// Rate at which the distal pair separates, and whether the separation was clamped.
pub fn growth_rate<T: Real>(q: &[[T; 3]], v: &[[T; 3]], n: usize) -> (T, bool) {
    let (a, b) = (q[n - 2], q[n - 1]);
    let (va, vb) = (v[n - 2], v[n - 1]);
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let s = (dx.square() + dy.square()).sqrt();
    let degenerate = s.value() < MIN_SEPARATION;
    let s = if degenerate { T::cst(MIN_SEPARATION) } else { s };
    ((dx * (vb[0] - va[0]) + dy * (vb[1] - va[1])) / s, degenerate)
}

/// Tip placement error `[axial, lateral]` relative to its joint with link `n-2`.
///
/// The tip pivots about that joint `J` and its centre sits `tip_length - h` along its own
/// heading: `p_tip = J + (tip_length - h) dir(theta_tip)`. For a full-length tip this is the
/// ordinary revolute condition.
pub fn distal_residual<T: Real>(q: &[[T; 3]], n: usize, d_segment: f64, tip_length: T) -> [T; 2] {
    let h = 0.5 * d_segment;
    let (a, b) = (q[n - 2], q[n - 1]);
    let w = [b[0] - a[0] - a[2].cos() * h, b[1] - a[1] - a[2].sin() * h];
    let (t, nt) = (dir(b[2]), [-b[2].sin(), b[2].cos()]);
    [w[0] * t[0] + w[1] * t[1] - (tip_length - h), w[0] * nt[0] + w[1] * nt[1]]
}

/// Largest joint or tip placement error.
pub fn constraint_violation<T: Real>(state: &VineState<T>) -> f64 {
    let r = revolute_residual(&state.q, state.n, state.d_segment);
    let t = distal_residual(&state.q, state.n, state.d_segment, state.tip_length);
    r.iter().chain(&t).fold(0.0f64, |m, x| m.max(x.value().abs()))
}

/// Gradients of the two [`distal_residual`] rows as `(coordinate, value)` lists over `3 n`.
pub fn distal_jacobian<T: Real>(q: &[[T; 3]], n: usize, d_segment: f64) -> [Vec<(usize, T)>; 2] {
    let h = 0.5 * d_segment;
    let (a, b) = (q[n - 2], q[n - 1]);
    let w = [b[0] - a[0] - a[2].cos() * h, b[1] - a[1] - a[2].sin() * h];
    let (t, nt) = (dir(b[2]), [-b[2].sin(), b[2].cos()]);
    let na = [-a[2].sin() * h, a[2].cos() * h];
    let (ia, ib) = (3 * (n - 2), 3 * (n - 1));
    let row = |e: [T; 2], dtheta: T| {
        vec![
            (ia, -e[0]),
            (ia + 1, -e[1]),
            (ia + 2, -(na[0] * e[0] + na[1] * e[1])),
            (ib, e[0]),
            (ib + 1, e[1]),
            (ib + 2, dtheta),
        ]
    };
    [
        row(t, w[0] * nt[0] + w[1] * nt[1]),
        row(nt, -(w[0] * t[0] + w[1] * t[1])),
    ]
}

/// Parameter handles for differentiation and fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamId {
    Mass,
    Inertia,
    Damping,
    Growth,
    /// Entry `i` of [`Stiffness::params`].
    Stiffness(usize),
    /// Initial velocity component (`axis` 0..3 = x, y, theta).
    InitialVelocity { link: usize, axis: usize },
}

/// Physical and numerical parameters, serialized as the params file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysParams {
    pub mass_kg: f64,
    pub inertia_kgm2: f64,
    pub damping_nms: f64,
    pub growth_mps: f64,
    pub dt_s: f64,
    pub d_segment_m: f64,
    /// Defaults to `d_segment / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collision_radius_m: Option<f64>,
    /// Gap below which contact rows are generated; defaults to `d_segment`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_m: Option<f64>,
    pub stiffness: Stiffness,
}

/// Lower bounds used when projecting fitted parameters.
pub const MASS_MIN: f64 = 1e-6;
pub const INERTIA_MIN: f64 = 1e-9;

impl PhysParams {
    pub fn radius(&self) -> f64 {
        self.collision_radius_m.unwrap_or(0.5 * self.d_segment_m)
    }

    pub fn activation(&self) -> f64 {
        self.activation_m.unwrap_or(self.d_segment_m)
    }

    pub fn validate(&self, max_links: usize) -> Result<(), StateError> {
        let checks = [
            (self.mass_kg > 0.0, "mass_kg must be > 0"),
            (self.inertia_kgm2 > 0.0, "inertia_kgm2 must be > 0"),
            (self.damping_nms >= 0.0, "damping_nms must be >= 0"),
            (self.growth_mps >= 0.0, "growth_mps must be >= 0"),
            (self.dt_s > 0.0, "dt_s must be > 0"),
            (self.d_segment_m > 0.0, "d_segment_m must be > 0"),
            (self.radius() > 0.0, "collision_radius_m must be > 0"),
            (self.activation() >= 0.0, "activation_m must be >= 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(StateError::Params(msg.into()));
            }
        }
        let scalars = [
            self.mass_kg,
            self.inertia_kgm2,
            self.damping_nms,
            self.growth_mps,
            self.dt_s,
            self.d_segment_m,
        ];
        if scalars.iter().any(|x| !x.is_finite()) {
            return Err(StateError::Params("parameters must be finite".into()));
        }
        self.stiffness.validate(max_links.saturating_sub(1))?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn get(&self, id: ParamId) -> Option<f64> {
        match id {
            ParamId::Mass => Some(self.mass_kg),
            ParamId::Inertia => Some(self.inertia_kgm2),
            ParamId::Damping => Some(self.damping_nms),
            ParamId::Growth => Some(self.growth_mps),
            ParamId::Stiffness(i) => self.stiffness.params().get(i).copied(),
            ParamId::InitialVelocity { .. } => None,
        }
    }

    /// Sets a physical parameter; initial velocities are not stored here and are ignored.
    pub fn set(&mut self, id: ParamId, value: f64) {
        match id {
            ParamId::Mass => self.mass_kg = value,
            ParamId::Inertia => self.inertia_kgm2 = value,
            ParamId::Damping => self.damping_nms = value,
            ParamId::Growth => self.growth_mps = value,
            ParamId::Stiffness(i) => {
                let mut p = self.stiffness.params();
                p[i] = value;
                self.stiffness.set_params(&p);
            }
            ParamId::InitialVelocity { .. } => {}
        }
    }

    /// Every physical parameter handle, in a fixed order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::Mass, ParamId::Inertia, ParamId::Damping, ParamId::Growth];
        ids.extend((0..self.stiffness.params().len()).map(ParamId::Stiffness));
        ids
    }

    /// Clamps into the physical ranges.
    pub fn project(&mut self) {
        self.mass_kg = self.mass_kg.max(MASS_MIN);
        self.inertia_kgm2 = self.inertia_kgm2.max(INERTIA_MIN);
        self.damping_nms = self.damping_nms.max(0.0);
        self.growth_mps = self.growth_mps.max(0.0);
        self.stiffness.project();
    }

    /// Coefficients over `T`; `lift` decides which parameters become tape variables.
    pub fn coeffs<T: Real>(&self, mut lift: impl FnMut(ParamId, f64) -> T) -> Coeffs<T> {
        Coeffs {
            mass: lift(ParamId::Mass, self.mass_kg),
            inertia: lift(ParamId::Inertia, self.inertia_kgm2),
            damping: lift(ParamId::Damping, self.damping_nms),
            growth: lift(ParamId::Growth, self.growth_mps),
            stiffness: self.stiffness.lift(|i, v| lift(ParamId::Stiffness(i), v)),
            dt: self.dt_s,
            d_segment: self.d_segment_m,
            radius: self.radius(),
            activation: self.activation(),
        }
    }

    pub fn coeffs_f64(&self) -> Coeffs<f64> {
        self.coeffs(|_, v| v)
    }
}

/// Parameters ready for evaluation over `T`.
#[derive(Debug, Clone)]
pub struct Coeffs<T> {
    pub mass: T,
    pub inertia: T,
    pub damping: T,
    pub growth: T,
    pub stiffness: StiffnessModel<T>,
    pub dt: f64,
    pub d_segment: f64,
    pub radius: f64,
    pub activation: f64,
}

/// Generalized forces on all `3 n` coordinates: joint torques only (planar, no gravity).
pub fn assemble_forces<T: Real>(state: &VineState<T>, coeffs: &Coeffs<T>) -> Vec<T> {
    let n = state.n;
    let mut f = vec![T::zero(); 3 * n];
    for k in 0..n - 1 {
        let alpha = state.q[k + 1][2] - state.q[k][2];
        let alpha_dot = state.v[k + 1][2] - state.v[k][2];
        let tau = moment(&coeffs.stiffness, k, alpha, alpha_dot, coeffs.damping);
        f[3 * (k + 1) + 2] += tau;
        f[3 * k + 2] -= tau;
    }
    f
}

/// What a QP row constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RowKind {
    Revolute { pair: usize, axis: usize },
    TipAlignment,
    Growth,
    Contact { link: usize, obstacle: usize },
}

/// Velocity QP for one step. Decision variables are the velocities of links `1..n`
/// (the base is pinned), three per link.
#[derive(Debug, Clone)]
pub struct StepProblem<T> {
    pub qp: DenseQp<T>,
    pub eq_rows: Vec<RowKind>,
    pub ineq_rows: Vec<RowKind>,
    /// Index of the growth row among the equality rows.
    pub growth_row: usize,
}

impl<T> StepProblem<T> {
    /// Column of coordinate `axis` of link `link` (link >= 1).
    pub fn col(link: usize, axis: usize) -> usize {
        3 * (link - 1) + axis
    }
}

/// Assembles the velocity QP
///
/// ```text
///   min 1/2 v'Mv - v'(M v_k + F dt)
///   s.t. J v = -c(q)/dt                  (full joints)
///        D_lat v = -r_lat/dt             (tip stays on its axis through the joint)
///        D_ax v = u - r_ax/dt            (growth along the tip axis)
///        -grad(phi)' v <= phi/dt         (contacts)
/// ```
///
/// `contacts` selects the (link, obstacle) pairs; gaps and normals are re-evaluated in `T`.
pub fn build_step_problem<T: Real>(
    state: &VineState<T>,
    coeffs: &Coeffs<T>,
    scene: &Scene,
    contacts: &[Contact],
    u: T,
) -> StepProblem<T> {
    let forces = assemble_forces(state, coeffs);
    let lin = |link: usize, axis: usize, m: T| -(m * state.v[link][axis] + forces[3 * link + axis] * coeffs.dt);
    assemble(state, coeffs, scene, contacts, u, coeffs.dt, lin)
}

/// Mass-weighted position correction `delta` that restores the joint and tip constraints:
///
/// ```text
///   min 1/2 delta' M delta   s.t.  J delta = -c(q),  D delta = -r(q),  -grad(phi)' delta <= phi
/// ```
pub fn build_projection_problem<T: Real>(
    state: &VineState<T>,
    coeffs: &Coeffs<T>,
    scene: &Scene,
    contacts: &[Contact],
) -> StepProblem<T> {
    assemble(state, coeffs, scene, contacts, T::zero(), 1.0, |_, _, _| T::zero())
}

fn assemble<T: Real>(
    state: &VineState<T>,
    coeffs: &Coeffs<T>,
    scene: &Scene,
    contacts: &[Contact],
    u: T,
    dt: f64,
    linear: impl Fn(usize, usize, T) -> T,
) -> StepProblem<T> {
    let n = state.n;
    let dim = 3 * (n - 1);

    let mut q = vec![T::zero(); dim * dim];
    let mut lin = vec![T::zero(); dim];
    for link in 1..n {
        for axis in 0..3 {
            let c = StepProblem::<T>::col(link, axis);
            let m = if axis == 2 { coeffs.inertia } else { coeffs.mass };
            q[c * dim + c] = m;
            lin[c] = linear(link, axis, m);
        }
    }

    let mut a_eq = Vec::new();
    let mut b_eq = Vec::new();
    let mut eq_rows = Vec::new();
    let res = revolute_residual(&state.q, n, state.d_segment);
    let jac = revolute_jacobian(&state.q, n, state.d_segment);
    let pairs = n.saturating_sub(2);
    let mut rows = vec![vec![T::zero(); dim]; 2 * pairs];
    for &(i, j, v) in &jac.entries {
        if j >= 3 {
            rows[i][j - 3] = v;
        }
    }
    for (i, row) in rows.into_iter().enumerate() {
        a_eq.extend(row);
        b_eq.push(-res[i] / dt);
        eq_rows.push(RowKind::Revolute { pair: i / 2, axis: i % 2 });
    }

    let dres = distal_residual(&state.q, n, state.d_segment, state.tip_length);
    let [axial, lateral] = distal_jacobian(&state.q, n, state.d_segment);
    let dense = |entries: Vec<(usize, T)>| {
        let mut row = vec![T::zero(); dim];
        for (j, v) in entries {
            if j >= 3 {
                row[j - 3] = v;
            }
        }
        row
    };
    a_eq.extend(dense(lateral));
    b_eq.push(-dres[1] / dt);
    eq_rows.push(RowKind::TipAlignment);
    let growth_row = eq_rows.len();
    a_eq.extend(dense(axial));
    b_eq.push(u - dres[0] / dt);
    eq_rows.push(RowKind::Growth);

    let mut g_ineq = Vec::new();
    let mut h_ineq = Vec::new();
    let mut ineq_rows = Vec::new();
    for c in contacts.iter().filter(|c| c.link >= 1 && c.link < n) {
        let p = state.q[c.link];
        let (dist, normal) = distance_and_normal([p[0], p[1]], &scene.obstacles[c.obstacle]);
        let mut row = vec![T::zero(); dim];
        row[StepProblem::<T>::col(c.link, 0)] = -normal[0];
        row[StepProblem::<T>::col(c.link, 1)] = -normal[1];
        g_ineq.extend(row);
        h_ineq.push((dist - coeffs.radius) / dt);
        ineq_rows.push(RowKind::Contact {
            link: c.link,
            obstacle: c.obstacle,
        });
    }

    StepProblem {
        qp: DenseQp {
            n: dim,
            q,
            lin,
            a_eq,
            b_eq,
            g_ineq,
            h_ineq,
        },
        eq_rows,
        ineq_rows,
        growth_row,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qpdiff::{solve, QpStatus};
    use crate::stiffness::Stiffness;

    pub(crate) fn params(k: f64) -> PhysParams {
        PhysParams {
            mass_kg: 0.1,
            inertia_kgm2: 0.01,
            damping_nms: 0.05,
            growth_mps: 0.0,
            dt_s: 0.01,
            d_segment_m: 0.05,
            collision_radius_m: None,
            activation_m: None,
            stiffness: Stiffness::linear(k),
        }
    }

    fn state(n: usize) -> VineState {
        VineState::new_straight([0.0, 0.0, 0.0], n, 0.05, 0.03, 10).unwrap()
    }

    #[test]
    fn straight_chain_has_zero_residual() {
        let s = state(5);
        assert!(revolute_residual(&s.q, 5, 0.05).iter().all(|r| r.abs() < 1e-15));
        assert!(revolute_residual(&s.q, 2, 0.05).is_empty());
    }

    #[test]
    fn displaced_link_residual() {
        let mut s = state(4);
        s.q[1][0] += 0.01;
        let r = revolute_residual(&s.q, 4, 0.05);
        assert!((r[0] + 0.01).abs() < 1e-15 && r[1].abs() < 1e-15);
        assert!((r[2] - 0.01).abs() < 1e-15 && r[3].abs() < 1e-15);
    }

    #[test]
    fn right_angle_chain() {
        // link 0 along +x, link 1 along +y, link 2 back along -x
        let q = vec![
            [0.0, 0.0, 0.0],
            [0.025, 0.025, std::f64::consts::FRAC_PI_2],
            [0.0, 0.05, std::f64::consts::PI],
            [-0.04, 0.05, 3.0],
        ];
        let r = revolute_residual(&q, 4, 0.05);
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|x| x.abs() < 1e-15), "{r:?}");
    }

    #[test]
    fn jacobian_simple_entries() {
        let s = state(3);
        let j = revolute_jacobian(&s.q, 3, 0.05).to_dense();
        assert_eq!(j[0][0], 1.0);
        assert_eq!(j[0][3], -1.0);
        assert_eq!(j[0][2], 0.0);
    }

    #[test]
    fn growth_rate_examples() {
        let q = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let v = [[0.0; 3], [1.0, 1.0, 0.0]];
        assert_eq!(growth_rate(&q, &v, 2), (1.0, false));
        let v = [[0.0; 3], [0.0, 2.0, 0.0]];
        assert_eq!(growth_rate(&q, &v, 2).0, 0.0);
        let v = [[0.0; 3], [-0.3, 0.0, 0.0]];
        assert_eq!(growth_rate(&q, &v, 2).0, -0.3);
        let q = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(growth_rate(&q, &v, 2).1);
    }

    #[test]
    fn forces_on_bent_joint() {
        let mut s = state(3);
        s.q[2][2] = 0.2;
        let c = params(2.0).coeffs_f64();
        let f = assemble_forces(&s, &c);
        // joint 1 angle 0.2: tau = -k * 0.2 on link 2, +k * 0.2 on link 1
        assert!((f[8] + 0.4).abs() < 1e-15);
        assert!((f[5] - 0.4).abs() < 1e-15);
        assert_eq!(f.iter().filter(|x| **x != 0.0).count(), 2);
        s.v[2][2] = 1.0;
        let f = assemble_forces(&s, &c);
        assert!((f[8] + 0.4 + 0.05).abs() < 1e-15);
        assert!(assemble_forces(&state(4), &c).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn forces_flip_with_angles() {
        let mut s = state(5);
        for (k, a) in [0.0, 0.1, -0.3, 0.2, 0.05].iter().enumerate() {
            s.q[k][2] = *a;
        }
        let mut flipped = s.clone();
        flipped.q.iter_mut().for_each(|p| p[2] = -p[2]);
        let c = params(1.5).coeffs_f64();
        let (f, g) = (assemble_forces(&s, &c), assemble_forces(&flipped, &c));
        for (a, b) in f.iter().zip(&g) {
            assert!((a + b).abs() < 1e-15);
        }
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let s = state(5);
        let c = params(2.0).coeffs_f64();
        let p = build_step_problem(&s, &c, &Scene::open([0.0; 3], [-1.0, -1.0, 1.0, 1.0]), &[], 0.0);
        let sol = solve(&p.qp.values(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!(sol.z.amax() < 1e-14);
    }

    #[test]
    fn two_link_growth() {
        let s = state(2);
        let c = params(2.0).coeffs_f64();
        let p = build_step_problem(&s, &c, &Scene::open([0.0; 3], [-1.0, -1.0, 1.0, 1.0]), &[], 0.4);
        let sol = solve(&p.qp.values(), None).unwrap();
        // the tip moves straight out at the growth rate
        assert!((sol.z[0] - 0.4).abs() < 1e-12 && sol.z[1].abs() < 1e-12 && sol.z[2].abs() < 1e-12);
    }

    #[test]
    fn params_round_trip() {
        let p = params(2.0);
        let text = p.to_json();
        assert!(text.contains("\"mass_kg\""));
        assert_eq!(PhysParams::from_json(&text).unwrap(), p);
        let mut bad = p.clone();
        bad.mass_kg = 0.0;
        assert!(bad.validate(10).is_err());
        assert!(p.validate(10).is_ok());
    }
}
