//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s as a node
//! holding the parent indices and the local partial derivatives. Calling
//! [`Tape::backward`] sweeps the nodes in reverse order and accumulates
//! adjoints. Values that never touched a tape are constants: they carry no
//! node and always receive a zero adjoint.
//!
//! All optical code is written against the [`Scalar`] trait so the same
//! tracer runs on plain `f64` (fast, non-differentiable) and on `Var`.
//!
//! ```
//! use difflens::autodiff::{Scalar, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.var(3.0);
//! let y = x * x;
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(y.value(), 9.0);
//! assert_eq!(grads.wrt(x), 6.0);
//! ```
//!
//! Kinks (`abs`, `min`, `max`, `relu`, `sqrt` at zero) take derivative 0.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("domain error in {op}: operand {operand}")]
    Domain { op: &'static str, operand: f64 },
    #[error("non-finite result in {op}")]
    NonFinite { op: &'static str },
    #[error("{parents} parents but {partials} partials supplied to {op}")]
    Arity { op: &'static str, parents: usize, partials: usize },
    #[error("variable does not belong to this tape")]
    ForeignVariable,
    #[error("tape was already back-propagated; reset it before recording again")]
    AlreadyBackpropagated,
}

/// Kind tag stored with every tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sqrt,
    Sin,
    Cos,
    Tan,
    Atan2,
    Abs,
    Min,
    Max,
    Pow,
    Exp,
    Ln,
    Relu,
    Sum,
    Custom,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Sqrt => "sqrt",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Tan => "tan",
            OpKind::Atan2 => "atan2",
            OpKind::Abs => "abs",
            OpKind::Min => "min",
            OpKind::Max => "max",
            OpKind::Pow => "pow",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    parent: u32,
    partial: f64,
}

#[derive(Default)]
struct Nodes {
    ops: Vec<OpKind>,
    // edges of node i live in edges[starts[i]..starts[i + 1]]
    starts: Vec<u32>,
    edges: Vec<Edge>,
}

impl Nodes {
    fn new() -> Self {
        Nodes { ops: Vec::new(), starts: vec![0], edges: Vec::new() }
    }

    #[inline]
    fn push(&mut self, op: OpKind, edges: &[Edge]) -> u32 {
        let idx = self.ops.len() as u32;
        self.ops.push(op);
        self.edges.extend_from_slice(edges);
        self.starts.push(self.edges.len() as u32);
        idx
    }

    fn len(&self) -> usize {
        self.ops.len()
    }

    #[inline]
    fn edges_of(&self, i: usize) -> &[Edge] {
        &self.edges[self.starts[i] as usize..self.starts[i + 1] as usize]
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Append-only record of differentiable operations.
///
/// A tape is single-threaded. Independent tapes may live on different
/// threads; their gradients are combined by the caller.
pub struct Tape {
    id: u64,
    nodes: RefCell<Nodes>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Nodes::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes; the tape can record again afterwards.
    pub fn reset(&mut self) {
        *self.nodes.get_mut() = Nodes::new();
        self.consumed.set(false);
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    /// Creates a leaf variable (a differentiable input).
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.nodes.borrow_mut().push(OpKind::Leaf, &[]);
        Var { value, node: Some((self, idx)) }
    }

    /// Records a node with arbitrary arity.
    ///
    /// Constant parents are dropped; if every parent is constant the result
    /// is a constant as well.
    pub fn record<'t>(
        &'t self,
        op: OpKind,
        parents: &[Var<'t>],
        value: f64,
        partials: &[f64],
    ) -> Result<Var<'t>, AdError> {
        if parents.len() != partials.len() {
            return Err(AdError::Arity { op: op.name(), parents: parents.len(), partials: partials.len() });
        }
        if !value.is_finite() || partials.iter().any(|p| !p.is_finite()) {
            return Err(AdError::NonFinite { op: op.name() });
        }
        let mut edges = Vec::with_capacity(parents.len());
        for (p, &d) in parents.iter().zip(partials) {
            if let Some((tape, idx)) = p.node {
                if !std::ptr::eq(tape, self) {
                    return Err(AdError::ForeignVariable);
                }
                edges.push(Edge { parent: idx, partial: d });
            }
        }
        if edges.is_empty() {
            return Ok(Var::constant(value));
        }
        let idx = self.nodes.borrow_mut().push(op, &edges);
        Ok(Var { value, node: Some((self, idx)) })
    }

    /// Operation kind and `(parent, partial)` pairs of node `index`.
    pub fn node(&self, index: usize) -> Option<(OpKind, Vec<(usize, f64)>)> {
        let nodes = self.nodes.borrow();
        if index >= nodes.len() {
            return None;
        }
        let edges = nodes.edges_of(index).iter().map(|e| (e.parent as usize, e.partial)).collect();
        Some((nodes.ops[index], edges))
    }

    fn check_owned(&self, v: &Var<'_>) -> Result<(), AdError> {
        match v.node {
            Some((tape, _)) if !std::ptr::eq(tape, self) => Err(AdError::ForeignVariable),
            _ => Ok(()),
        }
    }

    /// Back-propagates from `root` with unit seed.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, AdError> {
        self.backward_seeded(&[(root, 1.0)])
    }

    /// Back-propagates from several externally seeded nodes at once.
    ///
    /// This is how dense image-space adjoints re-enter the tape at PSF cells.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, f64)]) -> Result<Gradients, AdError> {
        let mut lanes = self.backward_lanes(&[seeds])?;
        Ok(lanes.pop().expect("one lane"))
    }

    /// One reverse sweep carrying several independent seed sets ("lanes").
    ///
    /// Returns one gradient map per lane; used to split a loss into its
    /// component terms without a second pass.
    pub fn backward_lanes(&self, lanes: &[&[(Var<'_>, f64)]]) -> Result<Vec<Gradients>, AdError> {
        if self.consumed.get() {
            return Err(AdError::AlreadyBackpropagated);
        }
        for lane in lanes {
            for (v, _) in lane.iter() {
                self.check_owned(v)?;
            }
        }
        self.consumed.set(true);
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let k = lanes.len();
        let mut adj = vec![0.0f64; n * k];
        for (lane_idx, lane) in lanes.iter().enumerate() {
            for (v, seed) in lane.iter() {
                if let Some((_, idx)) = v.node {
                    adj[idx as usize * k + lane_idx] += seed;
                }
            }
        }
        for i in (0..n).rev() {
            let edges = nodes.edges_of(i);
            if edges.is_empty() {
                continue;
            }
            for lane_idx in 0..k {
                let a = adj[i * k + lane_idx];
                if a == 0.0 {
                    continue;
                }
                for e in edges {
                    adj[e.parent as usize * k + lane_idx] += a * e.partial;
                }
            }
        }
        Ok((0..k)
            .map(|lane_idx| Gradients {
                tape_id: self.id,
                adjoints: (0..n).map(|i| adj[i * k + lane_idx]).collect(),
            })
            .collect())
    }

    #[inline]
    fn push1(&self, op: OpKind, parent: u32, partial: f64) -> u32 {
        self.nodes.borrow_mut().push(op, &[Edge { parent, partial }])
    }

    #[inline]
    fn push2(&self, op: OpKind, a: u32, da: f64, b: u32, db: f64) -> u32 {
        self.nodes.borrow_mut().push(op, &[Edge { parent: a, partial: da }, Edge { parent: b, partial: db }])
    }
}

/// Adjoints produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape_id: u64,
    adjoints: Vec<f64>,
}

impl Gradients {
    /// Adjoint of `v`; constants yield 0.
    ///
    /// Panics if `v` was recorded on another tape; see [`Gradients::try_wrt`].
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.try_wrt(v).expect("variable from a different tape")
    }

    pub fn try_wrt(&self, v: Var<'_>) -> Result<f64, AdError> {
        match v.node {
            None => Ok(0.0),
            Some((tape, idx)) => {
                if tape.id != self.tape_id {
                    return Err(AdError::ForeignVariable);
                }
                self.adjoints.get(idx as usize).copied().ok_or(AdError::ForeignVariable)
            }
        }
    }

    /// Adjoint by raw tape index.
    pub fn get(&self, index: usize) -> Option<f64> {
        self.adjoints.get(index).copied()
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
    }
}

/// Differentiable scalar. `Copy`; borrows the tape it was recorded on.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    value: f64,
    node: Option<(&'t Tape, u32)>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some((_, idx)) => write!(f, "Var({} @{})", self.value, idx),
            None => write!(f, "Var({})", self.value),
        }
    }
}

impl<'t> Var<'t> {
    /// A value with no tape entry.
    pub fn constant(value: f64) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// Tape index, `None` for constants.
    pub fn index(&self) -> Option<usize> {
        self.node.map(|(_, i)| i as usize)
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    /// Stop-gradient: same value, no tape entry.
    pub fn detach(self) -> Self {
        Var::constant(self.value)
    }

    #[inline]
    fn unary(self, op: OpKind, value: f64, partial: f64) -> Self {
        match self.node {
            None => Var::constant(value),
            Some((tape, idx)) => Var { value, node: Some((tape, tape.push1(op, idx, partial))) },
        }
    }

    #[inline]
    fn binary(self, other: Self, op: OpKind, value: f64, da: f64, db: f64) -> Self {
        match (self.node, other.node) {
            (None, None) => Var::constant(value),
            (Some((tape, a)), None) => Var { value, node: Some((tape, tape.push1(op, a, da))) },
            (None, Some((tape, b))) => Var { value, node: Some((tape, tape.push1(op, b, db))) },
            (Some((tape, a)), Some((other_tape, b))) => {
                assert!(std::ptr::eq(tape, other_tape), "variables recorded on different tapes");
                Var { value, node: Some((tape, tape.push2(op, a, da, b, db))) }
            }
        }
    }

    pub fn try_div(self, rhs: Self) -> Result<Self, AdError> {
        if rhs.value == 0.0 {
            return Err(AdError::Domain { op: "div", operand: rhs.value });
        }
        let inv = 1.0 / rhs.value;
        let value = self.value * inv;
        Ok(self.binary(rhs, OpKind::Div, value, inv, -value * inv))
    }

    pub fn try_sqrt(self) -> Result<Self, AdError> {
        if self.value < 0.0 || self.value.is_nan() {
            return Err(AdError::Domain { op: "sqrt", operand: self.value });
        }
        let s = self.value.sqrt();
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        Ok(self.unary(OpKind::Sqrt, s, d))
    }

    pub fn try_ln(self) -> Result<Self, AdError> {
        if self.value <= 0.0 || self.value.is_nan() {
            return Err(AdError::Domain { op: "ln", operand: self.value });
        }
        Ok(self.unary(OpKind::Ln, self.value.ln(), 1.0 / self.value))
    }

    pub fn try_pow(self, exponent: Self) -> Result<Self, AdError> {
        let (x, y) = (self.value, exponent.value);
        let value = x.powf(y);
        if !value.is_finite() {
            return Err(AdError::Domain { op: "pow", operand: x });
        }
        let dx = if x == 0.0 && y >= 1.0 {
            if y == 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            y * x.powf(y - 1.0)
        };
        let dy = if exponent.node.is_some() {
            if x <= 0.0 {
                return Err(AdError::Domain { op: "pow", operand: x });
            }
            value * x.ln()
        } else {
            0.0
        };
        if !dx.is_finite() {
            return Err(AdError::NonFinite { op: "pow" });
        }
        Ok(self.binary(exponent, OpKind::Pow, value, dx, dy))
    }

    pub fn try_atan2(self, x: Self) -> Result<Self, AdError> {
        let (yv, xv) = (self.value, x.value);
        let r2 = xv * xv + yv * yv;
        if r2 == 0.0 {
            return Err(AdError::Domain { op: "atan2", operand: 0.0 });
        }
        Ok(self.binary(x, OpKind::Atan2, yv.atan2(xv), xv / r2, -yv / r2))
    }

    /// n-ary sum recorded as a single node.
    pub fn sum(xs: &[Var<'t>]) -> Self {
        Self::weighted_sum(&xs.iter().map(|&x| (x, 1.0)).collect::<Vec<_>>())
    }

    /// `Σ wᵢ·xᵢ` recorded as a single node.
    pub fn weighted_sum(terms: &[(Var<'t>, f64)]) -> Self {
        let value: f64 = terms.iter().map(|(x, w)| x.value * w).sum();
        let mut tape: Option<&'t Tape> = None;
        let edges: Vec<Edge> = terms
            .iter()
            .filter_map(|(x, w)| {
                x.node.map(|(t, idx)| {
                    if let Some(prev) = tape {
                        assert!(std::ptr::eq(prev, t), "variables recorded on different tapes");
                    }
                    tape = Some(t);
                    Edge { parent: idx, partial: *w }
                })
            })
            .collect();
        match tape {
            None => Var::constant(value),
            Some(t) => {
                let idx = t.nodes.borrow_mut().push(OpKind::Sum, &edges);
                Var { value, node: Some((t, idx)) }
            }
        }
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:expr, |$a:ident, $b:ident| $val:expr, $da:expr, $db:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            #[inline]
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let ($a, $b) = (self.value, rhs.value);
                self.binary(rhs, $op, $val, $da, $db)
            }
        }
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            #[inline]
            fn $method(self, rhs: f64) -> Var<'t> {
                self.$method(Var::constant(rhs))
            }
        }
        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            #[inline]
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                Var::constant(self).$method(rhs)
            }
        }
    };
}

binop!(Add, add, OpKind::Add, |a, b| a + b, 1.0, 1.0);
binop!(Sub, sub, OpKind::Sub, |a, b| a - b, 1.0, -1.0);
binop!(Mul, mul, OpKind::Mul, |a, b| a * b, b, a);

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    /// Panics on division by zero; see [`Var::try_div`].
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.try_div(rhs).unwrap_or_else(|e| panic!("{e}"))
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self / Var::constant(rhs)
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::constant(self) / rhs
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(OpKind::Neg, -self.value, -1.0)
    }
}

/// Real-number interface shared by `f64` and [`Var`].
///
/// The `Var` implementations of `sqrt`, `ln`, `/`, `atan2` and `powf` panic
/// on domain errors; callers guard domains or use the `try_` methods.
pub trait Scalar:
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
{
    fn constant(v: f64) -> Self;
    fn value(self) -> f64;
    fn detach(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn relu(self) -> Self;
    fn atan2(self, x: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn max(self, other: Self) -> Self;
    fn powf(self, exponent: Self) -> Self;

    fn sq(self) -> Self {
        self * self
    }

    /// `Σ wᵢ·xᵢ`.
    fn weighted_sum(terms: &[(Self, f64)]) -> Self {
        terms.iter().fold(Self::constant(0.0), |acc, &(x, w)| acc + x * w)
    }

    fn sum(xs: &[Self]) -> Self {
        xs.iter().fold(Self::constant(0.0), |acc, &x| acc + x)
    }
}

impl Scalar for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn detach(self) -> Self {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tan(self) -> Self {
        f64::tan(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    #[inline]
    fn min(self, other: Self) -> Self {
        f64::min(self, other)
    }
    #[inline]
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn powf(self, exponent: Self) -> Self {
        f64::powf(self, exponent)
    }
}

impl<'t> Scalar for Var<'t> {
    #[inline]
    fn constant(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.value
    }
    #[inline]
    fn detach(self) -> Self {
        Var::detach(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        self.try_sqrt().unwrap_or_else(|e| panic!("{e}"))
    }
    fn sin(self) -> Self {
        self.unary(OpKind::Sin, self.value.sin(), self.value.cos())
    }
    fn cos(self) -> Self {
        self.unary(OpKind::Cos, self.value.cos(), -self.value.sin())
    }
    fn tan(self) -> Self {
        let t = self.value.tan();
        self.unary(OpKind::Tan, t, 1.0 + t * t)
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(OpKind::Exp, e, e)
    }
    fn ln(self) -> Self {
        self.try_ln().unwrap_or_else(|e| panic!("{e}"))
    }
    fn abs(self) -> Self {
        let d = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(OpKind::Abs, self.value.abs(), d)
    }
    fn relu(self) -> Self {
        if self.value > 0.0 {
            self.unary(OpKind::Relu, self.value, 1.0)
        } else {
            self.unary(OpKind::Relu, 0.0, 0.0)
        }
    }
    fn atan2(self, x: Self) -> Self {
        self.try_atan2(x).unwrap_or_else(|e| panic!("{e}"))
    }
    fn min(self, other: Self) -> Self {
        let (a, b) = (self.value, other.value);
        let (da, db) = if a < b {
            (1.0, 0.0)
        } else if b < a {
            (0.0, 1.0)
        } else {
            (0.0, 0.0)
        };
        self.binary(other, OpKind::Min, a.min(b), da, db)
    }
    fn max(self, other: Self) -> Self {
        let (a, b) = (self.value, other.value);
        let (da, db) = if a > b {
            (1.0, 0.0)
        } else if b > a {
            (0.0, 1.0)
        } else {
            (0.0, 0.0)
        };
        self.binary(other, OpKind::Max, a.max(b), da, db)
    }
    fn powf(self, exponent: Self) -> Self {
        self.try_pow(exponent).unwrap_or_else(|e| panic!("{e}"))
    }
    fn weighted_sum(terms: &[(Self, f64)]) -> Self {
        Var::weighted_sum(terms)
    }
    fn sum(xs: &[Self]) -> Self {
        Var::sum(xs)
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max_i |ad_i − fd_i| / max(1e-12, |fd_i|)` over finite probes.
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Indices whose probes `f(x ± h·eᵢ)` were not finite.
    pub non_finite: Vec<usize>,
}

/// Compares reverse-mode gradients of `f` at `x` with central differences.
///
/// `f` is evaluated on a tape for the analytic gradient and on constant
/// `Var`s (which never touch a tape) for the probes.
pub fn gradient_check<F>(f: F, x: &[f64], h: f64) -> GradCheck
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = x.iter().map(|&v| tape.var(v)).collect();
    let y = f(&vars);
    let grads = tape.backward(y).expect("fresh tape");
    let analytic: Vec<f64> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |probe: &[f64]| -> f64 {
        let consts: Vec<Var<'_>> = probe.iter().map(|&v| Var::constant(v)).collect();
        f(&consts).value()
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut non_finite = Vec::new();
    let mut max_rel_error = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = eval(&probe);
        probe[i] = x[i] - h;
        let fm = eval(&probe);
        probe[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        numeric.push(fd);
        if !fp.is_finite() || !fm.is_finite() {
            non_finite.push(i);
            continue;
        }
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-12);
        max_rel_error = max_rel_error.max(rel);
    }
    GradCheck { max_rel_error, analytic, numeric, non_finite }
}
