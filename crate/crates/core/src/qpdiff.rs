//! Dense convex QP solver with implicit-differentiation sensitivities.
//!
//! Problems have the form
//!
//! ```text
//!     minimize     1/2 z' Q z + lin' z
//!     subject to   A_eq z  = b_eq
//!                  G    z <= h
//! ```
//!
//! and are solved with the Goldfarb-Idnani dual active-set method: start from the
//! equality-constrained minimum and repeatedly add the most violated inequality, dropping
//! working constraints whose multiplier would turn negative. All linear algebra happens in the
//! metric of `Q` (rows are whitened by its Cholesky factor) with an incrementally
//! orthogonalised basis of the working set, so each working-set change costs `O(n w)` and every
//! iterate satisfies stationarity exactly.
//!
//! The backward pass differentiates the KKT system restricted to the strongly active set
//! (`mu_i > dual_tol`); weakly active constraints are treated as inactive.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{Real, Tape, Var};

/// Multiplier threshold separating strongly from weakly active constraints.
pub const DUAL_TOL: f64 = 1e-7;
/// Slack threshold for counting a constraint as active.
pub const PRIMAL_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("inconsistent dimensions: {0}")]
    Dimension(String),
    #[error("Q is not positive definite on the equality null space")]
    NotPositiveDefinite,
    #[error("reduced KKT matrix is singular (condition estimate {condition:.3e})")]
    SingularKkt { condition: f64 },
    #[error("solution status {0:?} cannot be differentiated")]
    NotSolved(QpStatus),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g_ineq: DMatrix<f64>,
    pub h_ineq: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem.
    pub fn new(q: DMatrix<f64>, lin: DVector<f64>) -> Self {
        let n = lin.len();
        QpProblem {
            q,
            lin,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            g_ineq: DMatrix::zeros(0, n),
            h_ineq: DVector::zeros(0),
        }
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_ineq(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.g_ineq = g;
        self.h_ineq = h;
        self
    }

    pub fn n(&self) -> usize {
        self.lin.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.h_ineq.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        let dim = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(QpError::Dimension(format!("{what} is {got:?}, expected {want:?}")))
            }
        };
        dim("Q", self.q.shape(), (n, n))?;
        dim("A_eq", self.a_eq.shape(), (self.n_eq(), n))?;
        dim("G_ineq", self.g_ineq.shape(), (self.n_ineq(), n))?;
        let finite = self.q.iter().chain(self.lin.iter()).chain(self.a_eq.iter()).chain(self.b_eq.iter());
        if finite.chain(self.g_ineq.iter()).chain(self.h_ineq.iter()).any(|x| !x.is_finite()) {
            return Err(QpError::Dimension("non-finite entry".into()));
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.q * z)) + self.lin.dot(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub nu: DVector<f64>,
    pub mu: DVector<f64>,
    /// Inequalities held with equality in the final working set, ascending.
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Residual witnessing infeasibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<f64>,
    /// Objective after every working-set change (only with [`QpSettings::trace`]).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<f64>,
}

/// Infinity norms of the KKT residual families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    /// Largest positive `(G z - h)_i`.
    pub primal_ineq: f64,
    pub complementarity: f64,
    /// Most negative inequality multiplier (0 if none).
    pub dual_sign: f64,
}

impl KktResiduals {
    /// Tolerances of a solved instance.
    pub fn within_tolerance(&self, problem: &QpProblem) -> bool {
        let scale = 1.0 + problem.lin.amax();
        self.stationarity <= 1e-6 * scale
            && self.primal_eq <= 1e-6
            && self.primal_ineq <= 1e-6
            && self.complementarity <= 1e-6
            && self.dual_sign <= 1e-9
    }
}

impl QpSolution {
    pub fn kkt_residuals(&self, p: &QpProblem) -> KktResiduals {
        let mut r = &p.q * &self.z + &p.lin;
        if p.n_eq() > 0 {
            r += p.a_eq.transpose() * &self.nu;
        }
        if p.n_ineq() > 0 {
            r += p.g_ineq.transpose() * &self.mu;
        }
        let eq = if p.n_eq() > 0 { (&p.a_eq * &self.z - &p.b_eq).amax() } else { 0.0 };
        let slack = if p.n_ineq() > 0 { &p.g_ineq * &self.z - &p.h_ineq } else { DVector::zeros(0) };
        let ineq = slack.iter().fold(0.0f64, |m, &s| m.max(s));
        let comp = slack.iter().zip(self.mu.iter()).fold(0.0f64, |m, (&s, &u)| m.max((s * u).abs()));
        let dual = self.mu.iter().fold(0.0f64, |m, &u| m.max(-u));
        KktResiduals {
            stationarity: r.amax(),
            primal_eq: eq,
            primal_ineq: ineq,
            complementarity: comp,
            dual_sign: dual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    /// Working-set changes before giving up; `None` picks `10 (n + m) + 50`.
    pub max_iter: Option<usize>,
    /// Absolute violation tolerance (scaled by `1 + |h_i|`).
    pub feas_tol: f64,
    /// Relative threshold below which a whitened row counts as linearly dependent.
    pub dep_tol: f64,
    pub trace: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            max_iter: None,
            feas_tol: 1e-10,
            dep_tol: 1e-10,
            trace: false,
        }
    }
}

/// Cholesky factor of `Q` (or of `Q + rho A'A` when `Q` is only definite on the null space).
enum Factor {
    Diagonal(Vec<f64>),
    Dense(Cholesky<f64, Dyn>),
}

struct Metric {
    factor: Factor,
    rho: f64,
}

impl Metric {
    fn new(p: &QpProblem) -> Result<Self, QpError> {
        let n = p.n();
        let diagonal = (0..n).all(|j| (0..n).all(|i| i == j || p.q[(i, j)] == 0.0));
        if diagonal && (0..n).all(|i| p.q[(i, i)] > 0.0) {
            let d = (0..n).map(|i| p.q[(i, i)].sqrt()).collect();
            return Ok(Metric {
                factor: Factor::Diagonal(d),
                rho: 0.0,
            });
        }
        if let Some(chol) = Cholesky::new(p.q.clone()) {
            return Ok(Metric {
                factor: Factor::Dense(chol),
                rho: 0.0,
            });
        }
        if p.n_eq() == 0 {
            return Err(QpError::NotPositiveDefinite);
        }
        let ata = p.a_eq.transpose() * &p.a_eq;
        let rho = 10.0 * (1.0 + p.q.amax()) / ata.amax().max(1e-12);
        Cholesky::new(&p.q + ata * rho)
            .map(|chol| Metric {
                factor: Factor::Dense(chol),
                rho,
            })
            .ok_or(QpError::NotPositiveDefinite)
    }

    /// `L^-1 v`
    fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::Diagonal(d) => DVector::from_iterator(v.len(), v.iter().zip(d).map(|(x, s)| x / s)),
            Factor::Dense(c) => c.l_dirty().solve_lower_triangular(v).expect("nonsingular factor"),
        }
    }

    /// `L^-T v`
    fn unwhiten(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::Diagonal(d) => DVector::from_iterator(v.len(), v.iter().zip(d).map(|(x, s)| x / s)),
            Factor::Dense(c) => c.l_dirty().tr_solve_lower_triangular(v).expect("nonsingular factor"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Row {
    Eq(usize),
    Ineq(usize),
}

/// Orthonormal basis of the whitened working-set rows: `W' = U R`.
struct Basis {
    rows: Vec<Row>,
    whitened: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    /// Column `j` holds `R[0..=j, j]`.
    r: Vec<Vec<f64>>,
    dep_tol: f64,
}

impl Basis {
    fn new(dep_tol: f64) -> Self {
        Basis {
            rows: Vec::new(),
            whitened: Vec::new(),
            u: Vec::new(),
            r: Vec::new(),
            dep_tol,
        }
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    /// Component of `w` orthogonal to the basis, with the projection coefficients.
    fn project_out(&self, w: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
        let mut rest = w.clone();
        let mut coeff = vec![0.0; self.u.len()];
        for _ in 0..2 {
            for (j, uj) in self.u.iter().enumerate() {
                let c = uj.dot(&rest);
                rest.axpy(-c, uj, 1.0);
                coeff[j] += c;
            }
        }
        (rest, coeff)
    }

    fn is_dependent(&self, w: &DVector<f64>, rest_norm: f64) -> bool {
        rest_norm <= self.dep_tol * w.norm().max(f64::MIN_POSITIVE)
    }

    fn try_push(&mut self, row: Row, w: DVector<f64>) -> bool {
        let (rest, mut coeff) = self.project_out(&w);
        let norm = rest.norm();
        if self.is_dependent(&w, norm) {
            return false;
        }
        coeff.push(norm);
        self.u.push(rest / norm);
        self.r.push(coeff);
        self.rows.push(row);
        self.whitened.push(w);
        true
    }

    fn remove(&mut self, pos: usize) {
        let mut rows = std::mem::take(&mut self.rows);
        let mut whitened = std::mem::take(&mut self.whitened);
        rows.remove(pos);
        whitened.remove(pos);
        self.u.clear();
        self.r.clear();
        for (row, w) in rows.into_iter().zip(whitened) {
            // rows were independent before the removal, so they stay independent
            let pushed = self.try_push(row, w);
            debug_assert!(pushed);
        }
    }

    /// Solves `min 1/2 |zh|^2 + chat' zh  s.t.  W zh = b` in whitened coordinates.
    fn solve(&self, chat: &DVector<f64>, b: &[f64]) -> (DVector<f64>, Vec<f64>) {
        let w = self.len();
        // R' y = b
        let mut y = vec![0.0; w];
        for i in 0..w {
            let mut s = b[i];
            for (j, yj) in y.iter().enumerate().take(i) {
                s -= self.r[i][j] * yj;
            }
            y[i] = s / self.r[i][i];
        }
        // R lambda = -U' chat - y
        let mut lam = vec![0.0; w];
        for i in (0..w).rev() {
            let mut s = -self.u[i].dot(chat) - y[i];
            for (k, lk) in lam.iter().enumerate().skip(i + 1) {
                s -= self.r[k][i] * lk;
            }
            lam[i] = s / self.r[i][i];
        }
        let mut zh = -chat.clone();
        for (j, uj) in self.u.iter().enumerate() {
            let c = uj.dot(chat) + y[j];
            zh.axpy(c, uj, 1.0);
        }
        (zh, lam)
    }

    fn condition_estimate(&self) -> f64 {
        let diag: Vec<f64> = self.r.iter().enumerate().map(|(i, c)| c[i].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    }
}

struct Workspace<'a> {
    p: &'a QpProblem,
    metric: Metric,
    chat: DVector<f64>,
    g_rows: Vec<DVector<f64>>,
    g_white: Vec<DVector<f64>>,
}

impl<'a> Workspace<'a> {
    fn new(p: &'a QpProblem) -> Result<Self, QpError> {
        let metric = Metric::new(p)?;
        let chat = metric.whiten(&p.lin);
        let g_rows: Vec<DVector<f64>> = (0..p.n_ineq()).map(|i| p.g_ineq.row(i).transpose()).collect();
        let g_white = g_rows.iter().map(|g| metric.whiten(g)).collect();
        Ok(Workspace {
            p,
            metric,
            chat,
            g_rows,
            g_white,
        })
    }

    fn rhs(&self, basis: &Basis) -> Vec<f64> {
        basis
            .rows
            .iter()
            .map(|r| match *r {
                Row::Eq(i) => self.p.b_eq[i],
                Row::Ineq(i) => self.p.h_ineq[i],
            })
            .collect()
    }

    /// Minimiser on the working set with linear term `lin + extra_row * extra`.
    fn eqp(&self, basis: &Basis, extra: Option<(usize, f64)>) -> (DVector<f64>, Vec<f64>) {
        let chat = match extra {
            Some((j, t)) if t != 0.0 => &self.chat + &self.g_white[j] * t,
            _ => self.chat.clone(),
        };
        let (zh, lam) = basis.solve(&chat, &self.rhs(basis));
        (self.metric.unwhiten(&zh), lam)
    }

    fn violation(&self, z: &DVector<f64>, i: usize) -> f64 {
        self.g_rows[i].dot(z) - self.p.h_ineq[i]
    }

    fn tol(&self, i: usize, feas_tol: f64) -> f64 {
        feas_tol * (1.0 + self.p.h_ineq[i].abs())
    }
}

/// Solves with default settings.
pub fn solve(problem: &QpProblem, warm_start: Option<&QpSolution>) -> Result<QpSolution, QpError> {
    solve_with(problem, warm_start.map(|w| w.active_set.as_slice()), &QpSettings::default())
}

/// Solves, optionally seeding the working set with `warm_active` inequalities.
pub fn solve_with(
    problem: &QpProblem,
    warm_active: Option<&[usize]>,
    settings: &QpSettings,
) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let ws = Workspace::new(problem)?;
    let (n, p, m) = (problem.n(), problem.n_eq(), problem.n_ineq());
    let max_iter = settings.max_iter.unwrap_or(10 * (n + m) + 50);
    let mut trace = Vec::new();
    let mut iterations = 0;

    let finish = |status: QpStatus,
                  basis: &Basis,
                  z: DVector<f64>,
                  lam: &[f64],
                  iterations: usize,
                  certificate: Option<f64>,
                  trace: Vec<f64>| {
        let mut nu = DVector::zeros(p);
        let mut mu = DVector::zeros(m);
        let mut active = Vec::new();
        for (row, &l) in basis.rows.iter().zip(lam) {
            match *row {
                Row::Eq(i) => nu[i] = l,
                Row::Ineq(i) => {
                    mu[i] = l;
                    active.push(i);
                }
            }
        }
        if ws.metric.rho > 0.0 {
            // undo the augmentation: Q z + rho A'A z = Q z + A' (rho A z)
            nu += (&problem.a_eq * &z) * ws.metric.rho;
        }
        active.sort_unstable();
        QpSolution {
            z,
            nu,
            mu,
            active_set: active,
            status,
            iterations,
            certificate,
            objective_trace: trace,
        }
    };

    // Equality rows first; dependent rows are checked for consistency afterwards.
    let mut basis = Basis::new(settings.dep_tol);
    let mut dependent_eq = Vec::new();
    for i in 0..p {
        let w = ws.metric.whiten(&problem.a_eq.row(i).transpose());
        if !basis.try_push(Row::Eq(i), w) {
            dependent_eq.push(i);
        }
    }
    let (z, lam) = ws.eqp(&basis, None);
    for &i in &dependent_eq {
        let res = (problem.a_eq.row(i) * &z)[0] - problem.b_eq[i];
        if res.abs() > 1e-9 * (1.0 + problem.b_eq[i].abs()) {
            return Ok(finish(QpStatus::Infeasible, &basis, z, &lam, 0, Some(res.abs()), trace));
        }
    }

    // Warm start: seed with the given inequalities, then restore dual feasibility.
    if let Some(active) = warm_active {
        for &i in active {
            if i < m && !basis.rows.contains(&Row::Ineq(i)) {
                basis.try_push(Row::Ineq(i), ws.g_white[i].clone());
            }
        }
        loop {
            let (_, lam) = ws.eqp(&basis, None);
            let worst = basis
                .rows
                .iter()
                .zip(&lam)
                .enumerate()
                .filter(|(_, (r, _))| matches!(r, Row::Ineq(_)))
                .map(|(pos, (_, &l))| (pos, l))
                .filter(|&(_, l)| l < 0.0)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match worst {
                Some((pos, _)) => basis.remove(pos),
                None => break,
            }
        }
    }

    loop {
        let (z, lam) = ws.eqp(&basis, None);
        if settings.trace {
            trace.push(problem.objective(&z));
        }
        // Most violated inequality outside the working set; lowest index on ties.
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..m {
            if basis.rows.contains(&Row::Ineq(i)) {
                continue;
            }
            let v = ws.violation(&z, i);
            if v > ws.tol(i, settings.feas_tol) && pick.is_none_or(|(_, best)| v > best) {
                pick = Some((i, v));
            }
        }
        let Some((j, _)) = pick else {
            return Ok(finish(QpStatus::Solved, &basis, z, &lam, iterations, None, trace));
        };

        // Raise mu_j until constraint j is satisfied, dropping blocking constraints.
        let mut mu_j = 0.0;
        let (mut z, mut lam) = (z, lam);
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Ok(finish(QpStatus::MaxIter, &basis, z, &lam, iterations, None, trace));
            }
            let aw = &ws.g_white[j];
            let (rest, _) = basis.project_out(aw);
            let rest_norm = rest.norm();
            // direction: Q dz + N' dlam = -a_j, N dz = 0
            let (_, dlam) = basis.solve(aw, &vec![0.0; basis.len()]);
            let viol = ws.violation(&z, j);
            let t_full = if basis.is_dependent(aw, rest_norm) {
                f64::INFINITY
            } else {
                (viol / (rest_norm * rest_norm)).max(0.0)
            };
            let mut t_part = f64::INFINITY;
            let mut block = None;
            for (pos, row) in basis.rows.iter().enumerate() {
                if let Row::Ineq(_) = row {
                    if dlam[pos] < 0.0 {
                        let t = (lam[pos] / -dlam[pos]).max(0.0);
                        if t < t_part {
                            t_part = t;
                            block = Some(pos);
                        }
                    }
                }
            }
            if t_full.is_infinite() && t_part.is_infinite() {
                return Ok(finish(QpStatus::Infeasible, &basis, z, &lam, iterations, Some(viol), trace));
            }
            if t_part < t_full {
                mu_j += t_part;
                basis.remove(block.expect("blocking constraint"));
                (z, lam) = ws.eqp(&basis, Some((j, mu_j)));
            } else {
                if basis.try_push(Row::Ineq(j), aw.clone()) {
                    break;
                }
                // numerically dependent after all: treat as satisfied at this tolerance
                return Ok(finish(QpStatus::Infeasible, &basis, z, &lam, iterations, Some(viol), trace));
            }
        }
        // Numerical safety: a working inequality with a negative multiplier is released.
        loop {
            let (_, lam) = ws.eqp(&basis, None);
            let scale = 1.0 + lam.iter().fold(0.0f64, |a, l| a.max(l.abs()));
            let worst = basis
                .rows
                .iter()
                .zip(&lam)
                .enumerate()
                .filter(|(_, (r, l))| matches!(r, Row::Ineq(_)) && **l < -1e-12 * scale)
                .min_by(|a, b| a.1 .1.total_cmp(b.1 .1))
                .map(|(pos, _)| pos);
            match worst {
                Some(pos) => {
                    basis.remove(pos);
                    iterations += 1;
                }
                None => break,
            }
        }
    }
}

/// Solves every problem independently; order is preserved and failures stay per element.
pub fn solve_batch(problems: &[QpProblem]) -> Vec<Result<QpSolution, QpError>> {
    problems.par_iter().map(|p| solve(p, None)).collect()
}

/// Loss gradients with respect to every problem parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct QpGradients {
    /// Gradient for a symmetric `Q` (symmetrised).
    pub q: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g_ineq: DMatrix<f64>,
    pub h_ineq: DVector<f64>,
}

/// Strongly active inequalities used by the backward pass.
pub fn strongly_active(solution: &QpSolution) -> Vec<usize> {
    (0..solution.mu.len()).filter(|&i| solution.mu[i] > DUAL_TOL).collect()
}

/// Vector-Jacobian product of the solution map `params -> z` with `dl_dz`.
pub fn solve_backward(
    problem: &QpProblem,
    solution: &QpSolution,
    dl_dz: &DVector<f64>,
) -> Result<QpGradients, QpError> {
    if solution.status != QpStatus::Solved {
        return Err(QpError::NotSolved(solution.status));
    }
    let (n, p, m) = (problem.n(), problem.n_eq(), problem.n_ineq());
    if dl_dz.len() != n {
        return Err(QpError::Dimension(format!("dl/dz has length {}, expected {n}", dl_dz.len())));
    }
    let metric = Metric::new(problem)?;
    let mut basis = Basis::new(1e-10);
    for i in 0..p {
        let w = metric.whiten(&problem.a_eq.row(i).transpose());
        if !basis.try_push(Row::Eq(i), w) {
            return Err(QpError::SingularKkt {
                condition: f64::INFINITY,
            });
        }
    }
    let active = strongly_active(solution);
    for &i in &active {
        let w = metric.whiten(&problem.g_ineq.row(i).transpose());
        if !basis.try_push(Row::Ineq(i), w) {
            return Err(QpError::SingularKkt {
                condition: f64::INFINITY,
            });
        }
    }
    let cond = basis.condition_estimate();
    if !cond.is_finite() || cond > 1e12 {
        return Err(QpError::SingularKkt { condition: cond });
    }
    // Q y_z + N' y_lam = g,  N y_z = 0
    let chat = -metric.whiten(dl_dz);
    let (yh, ylam) = basis.solve(&chat, &vec![0.0; basis.len()]);
    let yz = metric.unwhiten(&yh);
    let z = &solution.z;

    let mut grad = QpGradients {
        q: DMatrix::zeros(n, n),
        lin: -&yz,
        a_eq: DMatrix::zeros(p, n),
        b_eq: DVector::zeros(p),
        g_ineq: DMatrix::zeros(m, n),
        h_ineq: DVector::zeros(m),
    };
    let outer = &yz * z.transpose();
    grad.q = (&outer + outer.transpose()) * -0.5;
    for (row, &yl) in basis.rows.iter().zip(&ylam) {
        match *row {
            Row::Eq(i) => {
                grad.b_eq[i] = yl;
                let g = -(&yz * solution.nu[i] + z * yl);
                grad.a_eq.set_row(i, &g.transpose());
            }
            Row::Ineq(i) => {
                grad.h_ineq[i] = yl;
                let g = -(&yz * solution.mu[i] + z * yl);
                grad.g_ineq.set_row(i, &g.transpose());
            }
        }
    }
    Ok(grad)
}

/// Machine-readable reproduction record for a failed or suspicious solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpDump {
    pub problem: QpProblem,
    #[serde(default)]
    pub solution: Option<QpSolution>,
    #[serde(default)]
    pub error: Option<String>,
}

impl QpDump {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dump serializes")
    }
}

/// QP with entries over any [`Real`]; matrices are dense row-major.
#[derive(Debug, Clone)]
pub struct DenseQp<T> {
    pub n: usize,
    pub q: Vec<T>,
    pub lin: Vec<T>,
    pub a_eq: Vec<T>,
    pub b_eq: Vec<T>,
    pub g_ineq: Vec<T>,
    pub h_ineq: Vec<T>,
}

impl<T: Real> DenseQp<T> {
    pub fn values(&self) -> QpProblem {
        let n = self.n;
        let v = |x: &[T]| x.iter().map(|e| e.value()).collect::<Vec<_>>();
        QpProblem {
            q: DMatrix::from_row_slice(n, n, &v(&self.q)),
            lin: DVector::from_vec(v(&self.lin)),
            a_eq: DMatrix::from_row_slice(self.b_eq.len(), n, &v(&self.a_eq)),
            b_eq: DVector::from_vec(v(&self.b_eq)),
            g_ineq: DMatrix::from_row_slice(self.h_ineq.len(), n, &v(&self.g_ineq)),
            h_ineq: DVector::from_vec(v(&self.h_ineq)),
        }
    }
}

/// Scalars that can pass through the QP solve.
///
/// `f64` just solves; [`Var`] additionally records a block node whose adjoint is
/// [`solve_backward`].
pub trait QpScalar: Real {
    fn qp_layer(
        qp: &DenseQp<Self>,
        warm_active: Option<&[usize]>,
        settings: &QpSettings,
    ) -> Result<(Vec<Self>, QpSolution, QpProblem), QpError>;
}

impl QpScalar for f64 {
    fn qp_layer(
        qp: &DenseQp<f64>,
        warm_active: Option<&[usize]>,
        settings: &QpSettings,
    ) -> Result<(Vec<f64>, QpSolution, QpProblem), QpError> {
        let problem = qp.values();
        let sol = solve_with(&problem, warm_active, settings)?;
        Ok((sol.z.iter().copied().collect(), sol, problem))
    }
}

impl<'t> QpScalar for Var<'t> {
    fn qp_layer(
        qp: &DenseQp<Self>,
        warm_active: Option<&[usize]>,
        settings: &QpSettings,
    ) -> Result<(Vec<Self>, QpSolution, QpProblem), QpError> {
        let problem = qp.values();
        let sol = solve_with(&problem, warm_active, settings)?;
        let values: Vec<f64> = sol.z.iter().copied().collect();

        // Record only entries that live on a tape, remembering where each came from.
        #[derive(Clone, Copy)]
        enum Slot {
            Q(usize),
            Lin(usize),
            A(usize),
            B(usize),
            G(usize),
            H(usize),
        }
        let mut inputs: Vec<Var<'t>> = Vec::new();
        let mut slots: Vec<Slot> = Vec::new();
        let mut tape: Option<&'t Tape> = None;
        let mut collect = |xs: &[Var<'t>], make: fn(usize) -> Slot| {
            for (k, x) in xs.iter().enumerate() {
                if !x.is_constant() {
                    tape = tape.or(x.tape());
                    inputs.push(*x);
                    slots.push(make(k));
                }
            }
        };
        collect(&qp.q, Slot::Q);
        collect(&qp.lin, Slot::Lin);
        collect(&qp.a_eq, Slot::A);
        collect(&qp.b_eq, Slot::B);
        collect(&qp.g_ineq, Slot::G);
        collect(&qp.h_ineq, Slot::H);
        let Some(tape) = tape else {
            return Ok((values.iter().map(|&v| Var::constant(v)).collect(), sol, problem));
        };
        if sol.status != QpStatus::Solved {
            return Err(QpError::NotSolved(sol.status));
        }
        let n = qp.n;
        let (bp, bs) = (problem.clone(), sol.clone());
        let adjoint = Box::new(move |out_adj: &[f64]| -> Vec<f64> {
            let g = DVector::from_column_slice(out_adj);
            match solve_backward(&bp, &bs, &g) {
                Ok(gr) => slots
                    .iter()
                    .map(|s| match *s {
                        Slot::Q(k) => gr.q[(k / n, k % n)],
                        Slot::Lin(k) => gr.lin[k],
                        Slot::A(k) => gr.a_eq[(k / n, k % n)],
                        Slot::B(k) => gr.b_eq[k],
                        Slot::G(k) => gr.g_ineq[(k / n, k % n)],
                        Slot::H(k) => gr.h_ineq[k],
                    })
                    .collect(),
                Err(_) => vec![f64::NAN; slots.len()],
            }
        });
        let outs = tape.block(&inputs, &values, adjoint);
        Ok((outs, sol, problem))
    }
}
