//! Scalar reverse-mode differentiation.
//!
//! The simulation routines are written once against [`Real`]. With `f64` they run at full
//! speed for rollouts and benchmarks; with [`Var`] every elementary operation is recorded on
//! a [`Tape`] and [`Tape::gradient`] replays it backwards. Operations that are not scalar
//! (the QP layer) register a block node with their own adjoint via [`Tape::block`].

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Numeric type the simulator is generic over.
///
/// Branching decisions (feature selection, clamps, regime switches) are taken on
/// [`Real::value`], so a `Var` follows exactly the code path the `f64` run takes.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn acos(self) -> Self;
    fn asin(self) -> Self;
    fn atan2(self, x: Self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn square(self) -> Self {
        self * self
    }

    /// Smaller of the two by value; ties keep `self`.
    fn min_by_value(self, other: Self) -> Self {
        if other.value() < self.value() {
            other
        } else {
            self
        }
    }

    /// Larger of the two by value; ties keep `self`.
    fn max_by_value(self, other: Self) -> Self {
        if other.value() > self.value() {
            other
        } else {
            self
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn acos(self) -> Self {
        f64::acos(self)
    }
    #[inline]
    fn asin(self) -> Self {
        f64::asin(self)
    }
    #[inline]
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
}

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    weights: [f64; 2],
}

/// Adjoint of a non-scalar operation: receives the output adjoints, returns one adjoint per
/// recorded input (same order as the inputs passed to [`Tape::block`]).
pub type BlockAdjoint = Box<dyn Fn(&[f64]) -> Vec<f64>>;

struct Block {
    first_out: u32,
    n_out: u32,
    inputs: Vec<u32>,
    adjoint: BlockAdjoint,
}

/// Recording of every differentiable operation performed on [`Var`]s.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    blocks: RefCell<Vec<Block>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("blocks", &self.blocks.borrow().len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, p0: u32, w0: f64, p1: u32, w1: f64) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node {
            parents: [p0, p1],
            weights: [w0, w1],
        });
        idx
    }

    /// New independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(NONE, 0.0, NONE, 0.0);
        Var {
            val: value,
            idx,
            tape: Some(self),
        }
    }

    /// Records a block operation with outputs `values` depending on `inputs`.
    ///
    /// Constant inputs (not on any tape) are ignored; the adjoint closure must return one entry
    /// per element of `inputs`, in order, and entries belonging to constants are discarded.
    pub fn block<'t>(
        &'t self,
        inputs: &[Var<'t>],
        values: &[f64],
        adjoint: BlockAdjoint,
    ) -> Vec<Var<'t>> {
        let recorded: Vec<u32> = inputs.iter().map(|v| v.idx).collect();
        if values.is_empty() || recorded.iter().all(|&i| i == NONE) {
            return values.iter().map(|&v| Var::constant(v)).collect();
        }
        let first = self.len() as u32;
        let outs: Vec<Var<'t>> = values
            .iter()
            .map(|&v| {
                let idx = self.push(NONE, 0.0, NONE, 0.0);
                Var {
                    val: v,
                    idx,
                    tape: Some(self),
                }
            })
            .collect();
        self.blocks.borrow_mut().push(Block {
            first_out: first,
            n_out: values.len() as u32,
            inputs: recorded,
            adjoint,
        });
        outs
    }

    /// Reverse sweep from `output`.
    pub fn gradient(&self, output: Var<'_>) -> Gradient {
        let nodes = self.nodes.borrow();
        let blocks = self.blocks.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if output.idx == NONE {
            return Gradient { adj };
        }
        adj[output.idx as usize] = 1.0;
        let mut next_block = blocks.len();
        for i in (0..nodes.len()).rev() {
            let a = adj[i];
            if a != 0.0 {
                let node = nodes[i];
                for k in 0..2 {
                    let p = node.parents[k];
                    if p != NONE {
                        adj[p as usize] += node.weights[k] * a;
                    }
                }
            }
            if next_block > 0 && blocks[next_block - 1].first_out as usize == i {
                let blk = &blocks[next_block - 1];
                let range = i..i + blk.n_out as usize;
                if adj[range.clone()].iter().any(|&x| x != 0.0) {
                    let in_adj = (blk.adjoint)(&adj[range]);
                    for (&inp, g) in blk.inputs.iter().zip(in_adj) {
                        if inp != NONE {
                            adj[inp as usize] += g;
                        }
                    }
                }
                next_block -= 1;
            }
        }
        Gradient { adj }
    }
}

/// Adjoints produced by [`Tape::gradient`].
#[derive(Debug, Clone)]
pub struct Gradient {
    adj: Vec<f64>,
}

impl Gradient {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        if v.idx == NONE {
            0.0
        } else {
            self.adj[v.idx as usize]
        }
    }
}

/// Tape-backed scalar.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    val: f64,
    idx: u32,
    tape: Option<&'t Tape>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.idx == NONE {
            write!(f, "Var({})", self.val)
        } else {
            write!(f, "Var({} @{})", self.val, self.idx)
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(v: f64) -> Self {
        Var {
            val: v,
            idx: NONE,
            tape: None,
        }
    }

    pub fn tape(&self) -> Option<&'t Tape> {
        self.tape
    }

    pub fn is_constant(&self) -> bool {
        self.idx == NONE
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => Var {
                val,
                idx: t.push(self.idx, d, NONE, 0.0),
                tape: Some(t),
            },
        }
    }

    #[inline]
    fn binary(a: Self, b: Self, val: f64, da: f64, db: f64) -> Self {
        match a.tape.or(b.tape) {
            None => Var::constant(val),
            Some(t) => Var {
                val,
                idx: t.push(a.idx, da, b.idx, db),
                tape: Some(t),
            },
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Var::binary(self, rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Var::binary(self, rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Var::binary(self, rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.val;
        let val = self.val * inv;
        Var::binary(self, rhs, val, inv, -val * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> AddAssign for Var<'t> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<'t> SubAssign for Var<'t> {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<'t> Real for Var<'t> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(self) -> f64 {
        self.val
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn acos(self) -> Self {
        self.unary(self.val.acos(), -1.0 / (1.0 - self.val * self.val).sqrt())
    }
    fn asin(self) -> Self {
        self.unary(self.val.asin(), 1.0 / (1.0 - self.val * self.val).sqrt())
    }
    fn atan2(self, x: Self) -> Self {
        let r2 = self.val * self.val + x.val * x.val;
        Var::binary(self, x, self.val.atan2(x.val), x.val / r2, -self.val / r2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn elementary_derivatives_match_finite_differences() {
        fn expr<T: Real>(x: T) -> T {
            let a = x.sin() * x.cos() + (x * x + 1.0).sqrt() / (x + 3.0);
            let b = (x * 0.3).tanh() - (x * 0.2).acos() + (x * 0.1).asin();
            a + b * x.atan2(T::cst(0.7) + x * x)
        }
        let tape = Tape::new();
        let x = tape.var(0.37);
        let y = expr(x);
        let g = tape.gradient(y);
        let fd = central(expr::<f64>, 0.37);
        assert!((y.value() - expr(0.37)).abs() < 1e-15);
        assert!((g.wrt(x) - fd).abs() < 1e-8, "{} vs {}", g.wrt(x), fd);
    }

    #[test]
    fn constants_do_not_touch_the_tape() {
        let tape = Tape::new();
        let c = Var::constant(2.0);
        let d = c * c + 1.0;
        assert!(d.is_constant());
        assert_eq!(tape.len(), 0);
        let x = tape.var(1.5);
        let y = x * d;
        assert_eq!(tape.gradient(y).wrt(x), 5.0);
    }

    #[test]
    fn block_adjoint_is_applied() {
        // outputs (2a + b, a*b) with hand-written adjoint
        let tape = Tape::new();
        let a = tape.var(3.0);
        let b = tape.var(4.0);
        let (av, bv) = (a.value(), b.value());
        let outs = tape.block(
            &[a, b],
            &[2.0 * av + bv, av * bv],
            Box::new(move |adj| vec![2.0 * adj[0] + bv * adj[1], adj[0] + av * adj[1]]),
        );
        let loss = outs[0] * 0.5 + outs[1] * outs[1];
        let g = tape.gradient(loss);
        // d/da = 1 + 2ab*b = 1 + 96, d/db = 0.5 + 2ab*a = 0.5 + 72
        assert!((g.wrt(a) - 97.0).abs() < 1e-12);
        assert!((g.wrt(b) - 72.5).abs() < 1e-12);
    }
}
