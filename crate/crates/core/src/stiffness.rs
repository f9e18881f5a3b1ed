//! Joint restoring-moment models.
//!
//! Three interchangeable models map a joint bending angle to a restoring moment:
//!
//! * a linear torsional spring `k * theta`;
//! * the wrinkling model of a thin-walled inflated tube, where the moment follows from the
//!   circumferential extent `gamma0` of the wrinkled region,
//!   `M = pi P R^3 (sin 2g + 2 pi - 2g) / (4 [sin g + (pi - g) cos g])`, and `gamma0` follows
//!   from the bending angle through the wrinkling criterion `eps_crit`,
//!   `gamma0 = acos(2 eps_crit / sin(theta / 2) - 1)`. Below the onset angle
//!   `2 asin(eps_crit)` the tube behaves linearly, with the slope chosen so the moment is
//!   continuous at onset (where it equals half the fully wrinkled moment `pi P R^3`);
//! * a 1-10-1 tanh perceptron.
//!
//! Every model is damped identically: `tau = -K(theta) - c * theta_dot`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::Real;

/// Hidden width of the neural stiffness model.
pub const MLP_HIDDEN: usize = 10;

const EPS_MIN: f64 = 1e-4;
const EPS_MAX: f64 = 1.0 - 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StiffnessError {
    #[error("bending angle {0} rad outside [0, pi]")]
    Domain(f64),
    #[error("wrinkling criterion {0} outside (0, 1)")]
    InvalidEps(f64),
    #[error("invalid stiffness parameters: {0}")]
    Invalid(String),
}

/// Parameters of the wrinkling model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrinklingParams {
    pub pressure_pa: f64,
    pub tube_radius_m: f64,
    /// Cubic `eps_crit(P) = c0 + c1 P + c2 P^2 + c3 P^3`, P in pascal.
    #[serde(default)]
    pub eps_poly: [f64; 4],
    /// Pressure range the polynomial was fitted on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrated_range_pa: Option<[f64; 2]>,
    /// Fixed criterion that bypasses the polynomial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_override: Option<f64>,
}

/// Result of evaluating the pressure polynomial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsEstimate {
    pub eps: f64,
    /// Pressure lies outside the calibrated range.
    pub extrapolated: bool,
}

/// Evaluates the cubic at `pressure`, clamped into `(1e-4, 1 - 1e-4)`.
pub fn eps_from_pressure(pressure: f64, poly: &[f64; 4], calibrated: Option<[f64; 2]>) -> EpsEstimate {
    let raw = poly[0] + pressure * (poly[1] + pressure * (poly[2] + pressure * poly[3]));
    let extrapolated = calibrated.is_some_and(|[lo, hi]| pressure < lo || pressure > hi);
    EpsEstimate {
        eps: raw.clamp(EPS_MIN, EPS_MAX),
        extrapolated,
    }
}

impl WrinklingParams {
    /// Fully wrinkled moment `pi P R^3`.
    pub fn full_moment(&self) -> f64 {
        PI * self.pressure_pa * self.tube_radius_m.powi(3)
    }

    pub fn effective_eps(&self) -> EpsEstimate {
        match self.eps_override {
            Some(eps) => EpsEstimate { eps, extrapolated: false },
            None => eps_from_pressure(self.pressure_pa, &self.eps_poly, self.calibrated_range_pa),
        }
    }

    pub fn validate(&self) -> Result<(), StiffnessError> {
        if !(self.pressure_pa > 0.0 && self.pressure_pa.is_finite()) {
            return Err(StiffnessError::Invalid(format!("pressure_pa must be > 0, got {}", self.pressure_pa)));
        }
        if !(self.tube_radius_m > 0.0 && self.tube_radius_m.is_finite()) {
            return Err(StiffnessError::Invalid(format!(
                "tube_radius_m must be > 0, got {}",
                self.tube_radius_m
            )));
        }
        let eps = self.effective_eps().eps;
        if !(eps > 0.0 && eps < 1.0) {
            return Err(StiffnessError::InvalidEps(eps));
        }
        Ok(())
    }
}

/// Spring constant shared by all joints or given per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JointStiffness {
    Shared(f64),
    PerJoint(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearStiffnessParams {
    #[serde(rename = "k_nm_per_rad")]
    pub k: JointStiffness,
}

/// Weights of the 1 -> 10 (tanh) -> 1 perceptron; input is the signed joint angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralStiffnessParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl NeuralStiffnessParams {
    /// Small random initialisation, deterministic in `seed`.
    pub fn init(seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |scale: f64| -> Vec<f64> { (0..MLP_HIDDEN).map(|_| scale * rng.gen_range(-1.0..1.0)).collect() };
        let w1 = draw(1.0);
        let b1 = draw(0.5);
        let w2 = draw(0.1);
        NeuralStiffnessParams { w1, b1, w2, b2: 0.0 }
    }
}

/// Serialized stiffness model, tagged by `model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Stiffness {
    Linear(LinearStiffnessParams),
    Wrinkling(WrinklingParams),
    Mlp(NeuralStiffnessParams),
}

/// Stiffness model over any [`Real`], ready for evaluation.
#[derive(Debug, Clone)]
pub enum StiffnessModel<T> {
    Linear { k: Vec<T> },
    Wrinkling { full: T, eps: T },
    Mlp { w1: Vec<T>, b1: Vec<T>, w2: Vec<T>, b2: T },
}

impl Stiffness {
    pub fn linear(k: f64) -> Self {
        Stiffness::Linear(LinearStiffnessParams { k: JointStiffness::Shared(k) })
    }

    pub fn wrinkling_fixed(pressure_pa: f64, tube_radius_m: f64, eps: f64) -> Self {
        Stiffness::Wrinkling(WrinklingParams {
            pressure_pa,
            tube_radius_m,
            eps_poly: [eps, 0.0, 0.0, 0.0],
            calibrated_range_pa: None,
            eps_override: Some(eps),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stiffness::Linear(_) => "linear",
            Stiffness::Wrinkling(_) => "wrinkling",
            Stiffness::Mlp(_) => "mlp",
        }
    }

    pub fn is_neural(&self) -> bool {
        matches!(self, Stiffness::Mlp(_))
    }

    /// Checks parameter ranges; `joints` is the largest joint count a rollout can reach.
    pub fn validate(&self, joints: usize) -> Result<(), StiffnessError> {
        match self {
            Stiffness::Linear(p) => {
                let ks: &[f64] = match &p.k {
                    JointStiffness::Shared(k) => std::slice::from_ref(k),
                    JointStiffness::PerJoint(v) => {
                        if v.len() < joints {
                            return Err(StiffnessError::Invalid(format!(
                                "k_nm_per_rad has {} entries, need {joints}",
                                v.len()
                            )));
                        }
                        v
                    }
                };
                if ks.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
                    return Err(StiffnessError::Invalid("k_nm_per_rad must be finite and >= 0".into()));
                }
                Ok(())
            }
            Stiffness::Wrinkling(w) => w.validate(),
            Stiffness::Mlp(m) => {
                let sizes_ok = m.w1.len() == MLP_HIDDEN && m.b1.len() == MLP_HIDDEN && m.w2.len() == MLP_HIDDEN;
                if !sizes_ok {
                    return Err(StiffnessError::Invalid(format!("mlp layers must have {MLP_HIDDEN} hidden units")));
                }
                if self.params().iter().any(|p| !p.is_finite()) {
                    return Err(StiffnessError::Invalid("mlp weights must be finite".into()));
                }
                Ok(())
            }
        }
    }

    /// Flat vector of the fittable parameters.
    ///
    /// Linear: the spring constants. Wrinkling: the effective `eps_crit`. MLP: `w1, b1, w2, b2`.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Stiffness::Linear(p) => match &p.k {
                JointStiffness::Shared(k) => vec![*k],
                JointStiffness::PerJoint(v) => v.clone(),
            },
            Stiffness::Wrinkling(w) => vec![w.effective_eps().eps],
            Stiffness::Mlp(m) => {
                let mut v = Vec::with_capacity(3 * MLP_HIDDEN + 1);
                v.extend(&m.w1);
                v.extend(&m.b1);
                v.extend(&m.w2);
                v.push(m.b2);
                v
            }
        }
    }

    /// Inverse of [`Stiffness::params`]. Setting a wrinkling parameter pins `eps_override`.
    pub fn set_params(&mut self, values: &[f64]) {
        match self {
            Stiffness::Linear(p) => match &mut p.k {
                JointStiffness::Shared(k) => *k = values[0],
                JointStiffness::PerJoint(v) => v.copy_from_slice(values),
            },
            Stiffness::Wrinkling(w) => w.eps_override = Some(values[0]),
            Stiffness::Mlp(m) => {
                let h = MLP_HIDDEN;
                m.w1.copy_from_slice(&values[..h]);
                m.b1.copy_from_slice(&values[h..2 * h]);
                m.w2.copy_from_slice(&values[2 * h..3 * h]);
                m.b2 = values[3 * h];
            }
        }
    }

    /// Projects parameters back into their physical range.
    pub fn project(&mut self) {
        match self {
            Stiffness::Linear(p) => match &mut p.k {
                JointStiffness::Shared(k) => *k = k.max(0.0),
                JointStiffness::PerJoint(v) => v.iter_mut().for_each(|k| *k = k.max(0.0)),
            },
            Stiffness::Wrinkling(w) => {
                if let Some(e) = &mut w.eps_override {
                    *e = e.clamp(EPS_MIN, EPS_MAX);
                }
            }
            Stiffness::Mlp(_) => {}
        }
    }

    /// Builds the evaluable model, mapping each fittable parameter through `lift`.
    pub fn lift<T: Real>(&self, mut lift: impl FnMut(usize, f64) -> T) -> StiffnessModel<T> {
        let values = self.params();
        let mut lifted = values.iter().enumerate().map(|(i, &v)| lift(i, v));
        match self {
            Stiffness::Linear(_) => StiffnessModel::Linear { k: lifted.collect() },
            Stiffness::Wrinkling(w) => StiffnessModel::Wrinkling {
                full: T::cst(w.full_moment()),
                eps: lifted.next().expect("one parameter"),
            },
            Stiffness::Mlp(_) => {
                let all: Vec<T> = lifted.collect();
                let h = MLP_HIDDEN;
                StiffnessModel::Mlp {
                    w1: all[..h].to_vec(),
                    b1: all[h..2 * h].to_vec(),
                    w2: all[2 * h..3 * h].to_vec(),
                    b2: all[3 * h],
                }
            }
        }
    }

    pub fn model(&self) -> StiffnessModel<f64> {
        self.lift(|_, v| v)
    }
}

/// Wrinkle angle `gamma0` for a bending angle; zero below the onset angle `2 asin(eps)`.
pub fn wrinkle_angle(theta: f64, eps_crit: f64) -> Result<f64, StiffnessError> {
    if !(0.0..=PI).contains(&theta) {
        return Err(StiffnessError::Domain(theta));
    }
    if !(eps_crit > 0.0 && eps_crit < 1.0) {
        return Err(StiffnessError::InvalidEps(eps_crit));
    }
    if theta < onset_angle(eps_crit) {
        return Ok(0.0);
    }
    let arg = 2.0 * eps_crit / (theta / 2.0).sin() - 1.0;
    Ok(arg.clamp(-1.0, 1.0).acos())
}

/// Bending angle at which wrinkling starts.
pub fn onset_angle(eps_crit: f64) -> f64 {
    2.0 * eps_crit.asin()
}

// Polynomials in d = pi - gamma of (2d - sin 2d) / d^3 and (sin d - d cos d) / d^3; the closed
// form cancels catastrophically as gamma approaches pi.
const SERIES_SWITCH: f64 = 0.1;

fn series_num<T: Real>(d2: T) -> T {
    ((d2 * (-4.0 / 2835.0) + 8.0 / 315.0) * d2 - 4.0 / 15.0) * d2 + 4.0 / 3.0
}

fn series_den<T: Real>(d2: T) -> T {
    ((d2 * (-1.0 / 45360.0) + 1.0 / 840.0) * d2 - 1.0 / 30.0) * d2 + 1.0 / 3.0
}

/// `M / (pi P R^3)` as a function of the wrinkle angle.
pub fn moment_ratio_from_gamma<T: Real>(gamma: T) -> T {
    let delta = T::cst(PI) - gamma;
    if delta.value() < 1e-6 {
        return T::cst(1.0);
    }
    if delta.value() < SERIES_SWITCH {
        let d2 = delta * delta;
        return series_num(d2) / (series_den(d2) * 4.0);
    }
    let num = (gamma * 2.0).sin() - gamma * 2.0 + 2.0 * PI;
    let den = gamma.sin() + delta * gamma.cos();
    num / (den * 4.0)
}

/// Unsigned restoring moment for `|theta|`, with the fully wrinkled moment `full = pi P R^3`.
///
/// Angles beyond `pi` saturate at `pi`.
pub fn wrinkling_magnitude<T: Real>(theta_abs: T, full: T, eps: T) -> T {
    let theta = if theta_abs.value() > PI { T::cst(PI) } else { theta_abs };
    let onset = eps.asin() * 2.0;
    if theta.value() < onset.value() {
        return full * 0.5 * theta / onset;
    }
    let arg = eps * 2.0 / (theta * 0.5).sin() - 1.0;
    if arg.value() >= 1.0 {
        return full * 0.5;
    }
    let arg = if arg.value() < -1.0 { T::cst(-1.0) } else { arg };
    full * moment_ratio_from_gamma(arg.acos())
}

/// Wrinkling-model bending moment in N m for `theta` in `[0, pi]`.
pub fn wrinkling_moment(theta: f64, params: &WrinklingParams) -> Result<f64, StiffnessError> {
    if !(0.0..=PI).contains(&theta) {
        return Err(StiffnessError::Domain(theta));
    }
    params.validate()?;
    Ok(wrinkling_magnitude(theta, params.full_moment(), params.effective_eps().eps))
}

/// Analytic `dM/dtheta` of [`wrinkling_magnitude`] for `theta` in `[0, pi]`.
pub fn wrinkling_moment_slope(theta: f64, full: f64, eps: f64) -> f64 {
    let onset = onset_angle(eps);
    if theta < onset {
        return full * 0.5 / onset;
    }
    let half = 0.5 * theta;
    let s = half.sin();
    let arg = (2.0 * eps / s - 1.0).clamp(-1.0, 1.0);
    let gamma = arg.acos();
    if gamma < 1e-7 {
        // limit of the chain rule at onset
        return full * 0.5 * eps * half.cos() / (s * s);
    }
    let dratio_dgamma = {
        let delta = PI - gamma;
        if delta < 1e-6 {
            0.0
        } else if delta < SERIES_SWITCH {
            let d2 = delta * delta;
            let a = series_num(d2);
            let b = series_den(d2);
            let da = delta * ((-24.0 / 2835.0 * d2 + 32.0 / 315.0) * d2 - 8.0 / 15.0);
            let db = delta * ((-6.0 / 45360.0 * d2 + 4.0 / 840.0) * d2 - 1.0 / 15.0);
            // d/dgamma = -d/ddelta
            -(da * b - a * db) / (4.0 * b * b)
        } else {
            let num = (2.0 * gamma).sin() + 2.0 * PI - 2.0 * gamma;
            let den = gamma.sin() + delta * gamma.cos();
            let dnum = 2.0 * (2.0 * gamma).cos() - 2.0;
            let dden = -delta * gamma.sin();
            (dnum * den - num * dden) / (4.0 * den * den)
        }
    };
    let dgamma_dtheta = eps * half.cos() / (s * s * gamma.sin());
    full * dratio_dgamma * dgamma_dtheta
}

/// Signed restoring moment `K(theta)` of joint `joint`.
pub fn restoring_moment<T: Real>(model: &StiffnessModel<T>, joint: usize, theta: T) -> T {
    match model {
        StiffnessModel::Linear { k } => k[joint.min(k.len() - 1)] * theta,
        StiffnessModel::Wrinkling { full, eps } => {
            if theta.value() >= 0.0 {
                wrinkling_magnitude(theta, *full, *eps)
            } else {
                -wrinkling_magnitude(-theta, *full, *eps)
            }
        }
        StiffnessModel::Mlp { w1, b1, w2, b2 } => {
            let mut out = *b2;
            for i in 0..w1.len() {
                out += w2[i] * (w1[i] * theta + b1[i]).tanh();
            }
            out
        }
    }
}

/// Joint torque `-K(theta) - c * theta_dot`.
pub fn moment<T: Real>(model: &StiffnessModel<T>, joint: usize, theta: T, theta_dot: T, damping: T) -> T {
    -restoring_moment(model, joint, theta) - damping * theta_dot
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Tape;
    use proptest::prelude::*;

    fn unit(eps: f64) -> WrinklingParams {
        WrinklingParams {
            pressure_pa: 1.0,
            tube_radius_m: 1.0,
            eps_poly: [eps, 0.0, 0.0, 0.0],
            calibrated_range_pa: None,
            eps_override: None,
        }
    }

    #[test]
    fn wrinkle_angle_examples() {
        let onset = 2.0 * 0.5f64.asin();
        assert!((onset - PI / 3.0).abs() < 1e-15);
        assert!(wrinkle_angle(onset, 0.5).unwrap().abs() < 1e-7);
        let near_zero = wrinkle_angle(PI / 2.0, 1e-12).unwrap();
        assert!((near_zero - PI).abs() < 1e-5);
        let g = wrinkle_angle(PI / 2.0, 0.1).unwrap();
        let hand = (0.2 / std::f64::consts::FRAC_1_SQRT_2 - 1.0).acos();
        assert!((g - hand).abs() < 1e-14);
        assert!((g - 2.370_51).abs() < 1e-5);
        assert_eq!(wrinkle_angle(0.05, 0.1).unwrap(), 0.0);
        assert!(matches!(wrinkle_angle(-0.1, 0.1), Err(StiffnessError::Domain(_))));
        assert!(matches!(wrinkle_angle(3.5, 0.1), Err(StiffnessError::Domain(_))));
    }

    #[test]
    fn closed_form_values() {
        assert!((moment_ratio_from_gamma(0.0) * PI - PI / 2.0).abs() < 1e-15);
        assert!((moment_ratio_from_gamma(PI / 2.0) * PI - PI * PI / 4.0).abs() < 1e-14);
        let p = unit(0.2);
        let at_onset = wrinkling_moment(onset_angle(0.2), &p).unwrap();
        assert!((at_onset - PI / 2.0).abs() < 1e-9);
    }

    #[test]
    fn moment_is_linear_in_pressure() {
        let mut p = unit(0.1);
        let m1 = wrinkling_moment(1.2, &p).unwrap();
        p.pressure_pa = 2.0;
        let m2 = wrinkling_moment(1.2, &p).unwrap();
        assert!((m2 - 2.0 * m1).abs() < 1e-14);
    }

    #[test]
    fn series_branch_joins_closed_form() {
        let below = moment_ratio_from_gamma(PI - SERIES_SWITCH + 1e-12);
        let above = moment_ratio_from_gamma(PI - SERIES_SWITCH - 1e-12);
        assert!((below - above).abs() < 1e-11);
        assert_eq!(moment_ratio_from_gamma(PI - 1e-7), 1.0);
    }

    #[test]
    fn continuity_at_onset() {
        for eps in [0.01, 0.05, 0.1, 0.2, 0.6] {
            let full = PI * 3.0 * 0.5f64.powi(3);
            let th = onset_angle(eps);
            let left = wrinkling_magnitude(th * (1.0 - 1e-14), full, eps);
            let right = wrinkling_magnitude(th * (1.0 + 1e-14), full, eps);
            assert!((left - right).abs() < 1e-9 * full, "eps {eps}");
        }
    }

    #[test]
    fn monotone_and_bounded_on_dense_grid() {
        for eps in [0.01, 0.05, 0.1, 0.2] {
            let mut prev = -1.0;
            for i in 0..=10_000 {
                let th = PI * i as f64 / 10_000.0;
                let r = wrinkling_magnitude(th, 1.0, eps);
                assert!((0.0..=1.0).contains(&r));
                assert!(r >= prev - 1e-15, "eps {eps} theta {th}");
                prev = r;
            }
        }
    }

    #[test]
    fn smaller_eps_dominates_past_both_onsets() {
        let pairs = [(0.01, 0.05), (0.05, 0.1), (0.1, 0.2), (0.01, 0.2)];
        for (lo, hi) in pairs {
            let start = onset_angle(hi);
            for i in 0..=1000 {
                let th = start + (PI - start) * i as f64 / 1000.0;
                assert!(wrinkling_magnitude(th, 1.0, lo) >= wrinkling_magnitude(th, 1.0, hi) - 1e-15);
            }
        }
    }

    #[test]
    fn analytic_slope_matches_finite_differences_and_tape() {
        let full = 0.7;
        for eps in [0.01, 0.05, 0.1, 0.2] {
            let onset = onset_angle(eps);
            for i in 1..200 {
                let th = PI * i as f64 / 200.0;
                if (th - onset).abs() < 1e-3 || th > PI - 1e-3 {
                    continue;
                }
                let h = 1e-6;
                let fd = (wrinkling_magnitude(th + h, full, eps) - wrinkling_magnitude(th - h, full, eps)) / (2.0 * h);
                let an = wrinkling_moment_slope(th, full, eps);
                assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "eps {eps} th {th}: {an} vs {fd}");
                let tape = Tape::new();
                let x = tape.var(th);
                let m = wrinkling_magnitude(x, crate::ad::Var::constant(full), crate::ad::Var::constant(eps));
                let ad = tape.gradient(m).wrt(x);
                assert!((ad - an).abs() <= 1e-8 * an.abs().max(1.0), "tape {ad} vs {an}");
            }
        }
    }

    #[test]
    fn eps_polynomial_evaluation() {
        assert_eq!(eps_from_pressure(1234.0, &[0.1, 0.0, 0.0, 0.0], None).eps, 0.1);
        assert!((eps_from_pressure(1000.0, &[0.0, 1e-4, 0.0, 0.0], None).eps - 0.1).abs() < 1e-15);
        let e = eps_from_pressure(5000.0, &[0.1, 0.0, 0.0, 0.0], Some([1000.0, 4000.0]));
        assert!(e.extrapolated);
        assert_eq!(eps_from_pressure(0.0, &[-1.0, 0.0, 0.0, 0.0], None).eps, EPS_MIN);
        assert_eq!(eps_from_pressure(0.0, &[3.0, 0.0, 0.0, 0.0], None).eps, EPS_MAX);
    }

    #[test]
    fn damped_moment_examples() {
        let lin = Stiffness::linear(2.0).model();
        assert!((moment(&lin, 0, 0.3, 1.0, 0.5) - (-1.1)).abs() < 1e-15);
        for model in [lin, Stiffness::wrinkling_fixed(2.0, 0.1, 0.1).model()] {
            assert_eq!(moment(&model, 0, 0.0, 0.0, 0.3), 0.0);
        }
        let w = Stiffness::wrinkling_fixed(2.0, 0.1, 0.1).model();
        for th in [0.05, 0.3, 1.0, 2.5] {
            assert_eq!(moment(&w, 0, -th, 0.0, 0.1), -moment(&w, 0, th, 0.0, 0.1));
        }
    }

    #[test]
    fn mlp_is_not_forced_odd() {
        let s = Stiffness::Mlp(NeuralStiffnessParams::init(3));
        let m = s.model();
        let a = restoring_moment(&m, 0, 0.4);
        let b = restoring_moment(&m, 0, -0.4);
        assert!((a + b).abs() > 1e-6);
        let mut t = s.clone();
        let mut p = t.params();
        assert_eq!(p.len(), 31);
        p[30] = 0.25;
        t.set_params(&p);
        assert!((restoring_moment(&t.model(), 0, 0.4) - a - 0.25).abs() < 1e-12);
    }

    #[test]
    fn serde_tags_and_validation() {
        let lin: Stiffness = serde_json::from_str(r#"{"model":"linear","k_nm_per_rad":2.0}"#).unwrap();
        assert_eq!(lin, Stiffness::linear(2.0));
        let per: Stiffness = serde_json::from_str(r#"{"model":"linear","k_nm_per_rad":[1.0,2.0]}"#).unwrap();
        assert!(per.validate(2).is_ok());
        assert!(per.validate(3).is_err());
        let w: Stiffness =
            serde_json::from_str(r#"{"model":"wrinkling","pressure_pa":3000,"tube_radius_m":0.03,"eps_poly":[0.1,0,0,0]}"#)
                .unwrap();
        assert!(w.validate(10).is_ok());
        let bad: Stiffness =
            serde_json::from_str(r#"{"model":"wrinkling","pressure_pa":-1,"tube_radius_m":0.03}"#).unwrap();
        assert!(bad.validate(10).is_err());
        assert!(serde_json::from_str::<Stiffness>(r#"{"model":"cubic"}"#).is_err());
    }

    proptest! {
        #[test]
        fn normalized_moment_in_unit_interval(th in 0.0..PI, eps in 0.001..0.9f64, p in 0.1..1e4f64, r in 0.001..1.0f64) {
            let params = WrinklingParams { pressure_pa: p, tube_radius_m: r, eps_poly: [eps, 0.0, 0.0, 0.0], calibrated_range_pa: None, eps_override: None };
            let m = wrinkling_moment(th, &params).unwrap() / params.full_moment();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
        }
    }
}
