//! Reverse-mode automatic differentiation over scalar expression graphs.
//!
//! A [`Tape`] records every primitive operation applied to [`Var`]s as a node
//! with parent indices and local partial derivatives. A single reverse sweep
//! ([`Tape::backward`]) then yields the gradient of one output with respect to
//! every leaf via the chain rule.
//!
//! Tapes are deliberately scalar: batching is done by looping at the call
//! site, which is fast enough for the dimensions this crate targets (d ≲ 100
//! for training; larger dimensions only appear in untaped f64 benchmarks).
//! Tapes are single-threaded (`RefCell` interior mutability, hence `!Sync`);
//! distinct tapes can be used from distinct threads freely.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    /// A primitive was evaluated outside its domain (log of a non-positive
    /// value, division by zero, ...).
    #[error("domain violation in `{op}`: argument {value}")]
    Domain { op: &'static str, value: f64 },
    /// The variable passed to `backward` lives on a different tape.
    #[error("variable does not belong to this tape")]
    ForeignVariable,
    #[error("`{op}` expects {expected} argument(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
}

/// Operation kind stored per node. `PowConst` keeps its exponent in the
/// node's `aux` slot so forward values can be replayed exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Tan,
    Exp,
    Ln,
    PowConst,
    Abs,
    Sqrt,
    Atan2,
    Min,
    Max,
    /// Binary op where one side was an untaped constant (stored in `aux`).
    AddConst,
    SubFromConst,
    MulConst,
    DivByConst,
    DivConstBy,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    /// Constant payload: exponent for `PowConst`, the folded constant for
    /// `*Const` ops, unused otherwise.
    aux: f64,
    parents: [u32; 2],
    partials: [f64; 2],
    value: f64,
}

/// Append-only record of a scalar computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drop every node but keep the allocation, so a tape can be reused
    /// across training steps. Vars created before `clear` must not be used
    /// afterwards.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// Record an input leaf. Leaves recorded in order 0..n keep those node
    /// indices, which is what gradient extraction by index relies on.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            op: Op::Leaf,
            aux: 0.0,
            parents: [u32::MAX, u32::MAX],
            partials: [0.0, 0.0],
            value,
        });
        Var {
            value,
            link: Some(Link { tape: self, node: idx }),
        }
    }

    fn push(&self, mut node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        // Unused parent slots point at the node itself with zero partial, so
        // the backward sweep needs no per-slot branching.
        for k in 0..2 {
            if node.parents[k] == u32::MAX {
                node.parents[k] = idx;
            }
        }
        nodes.push(node);
        idx
    }

    /// Gradient of `output` with respect to every node on the tape.
    ///
    /// A constant (untaped) output yields an all-zero gradient. A variable
    /// from another tape is an error.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, TapeError> {
        match output.link {
            None => Ok(Gradients { adjoints: vec![0.0; self.len()] }),
            Some(_) => self.backward_seeded(&[(output, 1.0)]),
        }
    }

    /// Reverse sweep with caller-provided adjoint seeds, used both for
    /// vector-valued outputs and for splicing externally estimated gradients
    /// (e.g. a stochastic log-determinant gradient) into the graph.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, f64)]) -> Result<Gradients, TapeError> {
        let nodes = self.nodes.borrow();
        let mut adjoints = vec![0.0; nodes.len()];
        for (var, seed) in seeds {
            match var.link {
                None => continue,
                Some(link) => {
                    if !std::ptr::eq(link.tape, self) {
                        return Err(TapeError::ForeignVariable);
                    }
                    adjoints[link.node as usize] += *seed;
                }
            }
        }
        for idx in (0..nodes.len()).rev() {
            let a = adjoints[idx];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[idx];
            adjoints[node.parents[0] as usize] += a * node.partials[0];
            adjoints[node.parents[1] as usize] += a * node.partials[1];
        }
        Ok(Gradients { adjoints })
    }

    /// Recompute every node value from the leaves. Used to verify the tape
    /// invariant that stored values are exactly reproducible.
    pub fn replay(&self) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut values = vec![0.0; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            let a = values[node.parents[0] as usize];
            let b = values[node.parents[1] as usize];
            values[i] = match node.op {
                Op::Leaf => node.value,
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => a / b,
                Op::Neg => -a,
                Op::Sin => a.sin(),
                Op::Cos => a.cos(),
                Op::Tan => a.tan(),
                Op::Exp => a.exp(),
                Op::Ln => a.ln(),
                Op::PowConst => a.powf(node.aux),
                Op::Abs => a.abs(),
                Op::Sqrt => a.sqrt(),
                Op::Atan2 => a.atan2(b),
                Op::Min => {
                    if a <= b {
                        a
                    } else {
                        b
                    }
                }
                Op::Max => {
                    if a >= b {
                        a
                    } else {
                        b
                    }
                }
                Op::AddConst => a + node.aux,
                Op::SubFromConst => node.aux - a,
                Op::MulConst => a * node.aux,
                Op::DivByConst => a / node.aux,
                Op::DivConstBy => node.aux / a,
            };
        }
        values
    }

    #[cfg(test)]
    fn nodes_ref(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    #[allow(dead_code)]
    fn stored_values(&self) -> Vec<f64> {
        self.nodes.borrow().iter().map(|n| n.value).collect()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

#[derive(Clone, Copy)]
struct Link<'t> {
    tape: &'t Tape,
    node: u32,
}

/// A scalar on a tape, or a free constant (no tape, zero gradient).
/// Cheap to copy; arithmetic records nodes on the owning tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    value: f64,
    link: Option<Link<'t>>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.link {
            Some(l) => write!(f, "Var({} @ {})", self.value, l.node),
            None => write!(f, "Var({} const)", self.value),
        }
    }
}

/// Adjoints for every node of one backward sweep.
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero for constants and untouched leaves.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        match v.link {
            Some(l) => self.adjoints[l.node as usize],
            None => 0.0,
        }
    }

    /// Gradient by node index (leaves recorded first occupy 0..n_leaves).
    pub fn by_index(&self, node: usize) -> f64 {
        self.adjoints[node]
    }
}

impl<'t> Var<'t> {
    /// A constant: participates in arithmetic but carries no gradient.
    pub fn constant(value: f64) -> Self {
        Var { value, link: None }
    }

    pub fn value(self) -> f64 {
        self.value
    }

    /// Node index on the tape, if taped.
    pub fn node_index(self) -> Option<usize> {
        self.link.map(|l| l.node as usize)
    }

    fn unary(self, op: Op, aux: f64, value: f64, partial: f64) -> Var<'t> {
        match self.link {
            // Constant input: fold.
            None => Var { value, link: None },
            Some(link) => {
                let idx = link.tape.push(Node {
                    op,
                    aux,
                    parents: [link.node, u32::MAX],
                    partials: [partial, 0.0],
                    value,
                });
                Var {
                    value,
                    link: Some(Link { tape: link.tape, node: idx }),
                }
            }
        }
    }

    fn binary(self, rhs: Var<'t>, op: Op, value: f64, da: f64, db: f64) -> Var<'t> {
        match (self.link, rhs.link) {
            (None, None) => Var { value, link: None },
            (Some(a), None) => {
                // Fold the constant side into `aux` so replay stays exact;
                // ops without a folded form materialize the constant as a leaf.
                let (folded, aux) = match op {
                    Op::Add => (Op::AddConst, rhs.value),
                    // `a - c` replays as `a + (-c)`: identical in IEEE 754.
                    Op::Sub => (Op::AddConst, -rhs.value),
                    Op::Mul => (Op::MulConst, rhs.value),
                    Op::Div => (Op::DivByConst, rhs.value),
                    _ => {
                        let c = Var {
                            value: rhs.value,
                            link: Some(Link {
                                tape: a.tape,
                                node: a.tape.push(Node {
                                    op: Op::Leaf,
                                    aux: 0.0,
                                    parents: [u32::MAX, u32::MAX],
                                    partials: [0.0, 0.0],
                                    value: rhs.value,
                                }),
                            }),
                        };
                        return self.binary(c, op, value, da, db);
                    }
                };
                let idx = a.tape.push(Node {
                    op: folded,
                    aux,
                    parents: [a.node, u32::MAX],
                    partials: [da, 0.0],
                    value,
                });
                Var {
                    value,
                    link: Some(Link { tape: a.tape, node: idx }),
                }
            }
            (None, Some(b)) => {
                let folded = match op {
                    Op::Add => Op::AddConst,
                    Op::Sub => Op::SubFromConst,
                    Op::Mul => Op::MulConst,
                    Op::Div => Op::DivConstBy,
                    _ => {
                        let c = Var {
                            value: self.value,
                            link: Some(Link {
                                tape: b.tape,
                                node: b.tape.push(Node {
                                    op: Op::Leaf,
                                    aux: 0.0,
                                    parents: [u32::MAX, u32::MAX],
                                    partials: [0.0, 0.0],
                                    value: self.value,
                                }),
                            }),
                        };
                        return c.binary(rhs, op, value, da, db);
                    }
                };
                let idx = b.tape.push(Node {
                    op: folded,
                    aux: self.value,
                    parents: [b.node, u32::MAX],
                    partials: [db, 0.0],
                    value,
                });
                Var {
                    value,
                    link: Some(Link { tape: b.tape, node: idx }),
                }
            }
            (Some(a), Some(b)) => {
                debug_assert!(
                    std::ptr::eq(a.tape, b.tape),
                    "variables from different tapes combined"
                );
                let idx = a.tape.push(Node {
                    op,
                    aux: 0.0,
                    parents: [a.node, b.node],
                    partials: [da, db],
                    value,
                });
                Var {
                    value,
                    link: Some(Link { tape: a.tape, node: idx }),
                }
            }
        }
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin, 0.0, self.value.sin(), self.value.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos, 0.0, self.value.cos(), -self.value.sin())
    }

    pub fn tan(self) -> Var<'t> {
        let v = self.value.tan();
        self.unary(Op::Tan, 0.0, v, 1.0 + v * v)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value.exp();
        self.unary(Op::Exp, 0.0, v, v)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln, 0.0, self.value.ln(), 1.0 / self.value)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value.sqrt();
        self.unary(Op::Sqrt, 0.0, v, 0.5 / v)
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(self) -> Var<'t> {
        let partial = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(Op::Abs, 0.0, self.value.abs(), partial)
    }

    /// x^p for a constant exponent. The partial at x = 0 is taken as 0,
    /// consistent with the |x| subgradient convention (the composite |x|^p
    /// is what the lp radius actually differentiates at its kinks).
    pub fn powf(self, p: f64) -> Var<'t> {
        let partial = if self.value == 0.0 {
            0.0
        } else {
            p * self.value.powf(p - 1.0)
        };
        self.unary(Op::PowConst, p, self.value.powf(p), partial)
    }

    pub fn atan2(self, x: Var<'t>) -> Var<'t> {
        let denom = self.value * self.value + x.value * x.value;
        self.binary(
            x,
            Op::Atan2,
            self.value.atan2(x.value),
            x.value / denom,
            -self.value / denom,
        )
    }

    /// Elementwise max; ties take the left argument's gradient.
    pub fn max(self, rhs: Var<'t>) -> Var<'t> {
        if self.value >= rhs.value {
            self.binary(rhs, Op::Max, self.value, 1.0, 0.0)
        } else {
            self.binary(rhs, Op::Max, rhs.value, 0.0, 1.0)
        }
    }

    pub fn min(self, rhs: Var<'t>) -> Var<'t> {
        if self.value <= rhs.value {
            self.binary(rhs, Op::Min, self.value, 1.0, 0.0)
        } else {
            self.binary(rhs, Op::Min, rhs.value, 0.0, 1.0)
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value / rhs.value;
        self.binary(rhs, Op::Div, v, 1.0 / rhs.value, -v / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg, 0.0, -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self + Var::constant(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self - Var::constant(rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self * Var::constant(rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self / Var::constant(rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::constant(self) + rhs
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::constant(self) - rhs
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::constant(self) * rhs
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::constant(self) / rhs
    }
}

/// Primitive selector for the checked entry point [`primitive`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    PowConst(f64),
    Abs,
    Sqrt,
    Atan2,
    Min,
    Max,
}

impl Primitive {
    fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Neg => "neg",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Tan => "tan",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::PowConst(_) => "pow_const",
            Primitive::Abs => "abs",
            Primitive::Sqrt => "sqrt",
            Primitive::Atan2 => "atan2",
            Primitive::Min => "min",
            Primitive::Max => "max",
        }
    }

    fn arity(self) -> usize {
        match self {
            Primitive::Neg
            | Primitive::Sin
            | Primitive::Cos
            | Primitive::Tan
            | Primitive::Exp
            | Primitive::Log
            | Primitive::PowConst(_)
            | Primitive::Abs
            | Primitive::Sqrt => 1,
            _ => 2,
        }
    }
}

/// Apply a primitive with domain checking: `log`/`sqrt` require strictly
/// positive arguments, `div` a nonzero denominator. The operator sugar on
/// [`Var`] skips these checks; callers that cannot guarantee the domain go
/// through here.
pub fn primitive<'t>(op: Primitive, args: &[Var<'t>]) -> Result<Var<'t>, TapeError> {
    if args.len() != op.arity() {
        return Err(TapeError::Arity {
            op: op.name(),
            expected: op.arity(),
            got: args.len(),
        });
    }
    let a = args[0];
    match op {
        Primitive::Log if a.value <= 0.0 => Err(TapeError::Domain { op: "log", value: a.value }),
        Primitive::Sqrt if a.value <= 0.0 => Err(TapeError::Domain { op: "sqrt", value: a.value }),
        Primitive::Div if args[1].value == 0.0 => Err(TapeError::Domain {
            op: "div",
            value: args[1].value,
        }),
        Primitive::Add => Ok(a + args[1]),
        Primitive::Sub => Ok(a - args[1]),
        Primitive::Mul => Ok(a * args[1]),
        Primitive::Div => Ok(a / args[1]),
        Primitive::Neg => Ok(-a),
        Primitive::Sin => Ok(a.sin()),
        Primitive::Cos => Ok(a.cos()),
        Primitive::Tan => Ok(a.tan()),
        Primitive::Exp => Ok(a.exp()),
        Primitive::Log => Ok(a.ln()),
        Primitive::PowConst(p) => Ok(a.powf(p)),
        Primitive::Abs => Ok(a.abs()),
        Primitive::Sqrt => Ok(a.sqrt()),
        Primitive::Atan2 => Ok(a.atan2(args[1])),
        Primitive::Min => Ok(a.min(args[1])),
        Primitive::Max => Ok(a.max(args[1])),
    }
}

/// Compare the tape gradient of `f` at `point` against central finite
/// differences with step `h`; returns the maximum relative error
/// `max_i |analytic_i - fd_i| / (|fd_i| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> Result<f64, TapeError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = point.iter().map(|&x| tape.leaf(x)).collect();
    let out = f(&tape, &vars);
    if !out.value().is_finite() {
        return Err(TapeError::NonFinite { context: "grad_check output" });
    }
    let grads = tape.backward(out)?;

    let eval = |shifted: &[f64]| -> Result<f64, TapeError> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = shifted.iter().map(|&x| t.leaf(x)).collect();
        let v = f(&t, &vs).value();
        if !v.is_finite() {
            return Err(TapeError::NonFinite { context: "grad_check evaluation" });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut shifted = point.to_vec();
    for i in 0..point.len() {
        shifted[i] = point[i] + h;
        let plus = eval(&shifted)?;
        shifted[i] = point[i] - h;
        let minus = eval(&shifted)?;
        shifted[i] = point[i];
        let fd = (plus - minus) / (2.0 * h);
        let analytic = grads.wrt(vars[i]);
        let rel = (analytic - fd).abs() / (fd.abs() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// The scalar abstraction shared by the plain `f64` evaluation path and the
/// taped training path: the numeric kernels of this crate (spherical
/// transform, radius fields, spline layers, the fast determinant) are written
/// once over `Scalar` and instantiated with both types.
///
/// Comparisons and branches in generic code go through [`Scalar::val`]; for
/// `Var` that reads the primal value, so control flow is identical in both
/// instantiations and gradients follow the branch actually taken.
pub trait Scalar:
    Copy
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
    fn constant(c: f64) -> Self;
    fn val(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powf(self, p: f64) -> Self;
    fn atan2(self, x: Self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
}

impl Scalar for f64 {
    fn constant(c: f64) -> Self {
        c
    }
    fn val(self) -> f64 {
        self
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
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn min(self, other: Self) -> Self {
        f64::min(self, other)
    }
}

impl<'t> Scalar for Var<'t> {
    fn constant(c: f64) -> Self {
        Var::constant(c)
    }
    fn val(self) -> f64 {
        self.value()
    }
    fn sin(self) -> Self {
        Var::sin(self)
    }
    fn cos(self) -> Self {
        Var::cos(self)
    }
    fn tan(self) -> Self {
        Var::tan(self)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn sqrt(self) -> Self {
        Var::sqrt(self)
    }
    fn abs(self) -> Self {
        Var::abs(self)
    }
    fn powf(self, p: f64) -> Self {
        Var::powf(self, p)
    }
    fn atan2(self, x: Self) -> Self {
        Var::atan2(self, x)
    }
    fn max(self, other: Self) -> Self {
        Var::max(self, other)
    }
    fn min(self, other: Self) -> Self {
        Var::min(self, other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(3.0);
        let y = x * x;
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), 6.0);
    }

    #[test]
    fn sin_gradient_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(0.0);
        let y = x.sin();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), 1.0);
    }

    #[test]
    fn softplus_matches_finite_differences() {
        // f(x) = log(1 + exp(x)) at x = 0.7
        let err = grad_check(|_, xs| (xs[0].exp() + 1.0).ln(), &[0.7], 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn backward_of_constant_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(2.0);
        let _y = x * x;
        let c = Var::constant(5.0);
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(x), 0.0);
    }

    #[test]
    fn backward_of_identity_leaf() {
        let tape = Tape::new();
        let x = tape.leaf(4.2);
        let g = tape.backward(x).unwrap();
        assert_eq!(g.wrt(x), 1.0);
    }

    #[test]
    fn foreign_variable_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.leaf(1.0);
        let y = x.exp();
        assert!(matches!(t2.backward(y), Err(TapeError::ForeignVariable)));
    }

    #[test]
    fn domain_errors_name_the_operation() {
        let tape = Tape::new();
        let x = tape.leaf(-1.5);
        match primitive(Primitive::Log, &[x]) {
            Err(TapeError::Domain { op, value }) => {
                assert_eq!(op, "log");
                assert_eq!(value, -1.5);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
        let zero = tape.leaf(0.0);
        assert!(primitive(Primitive::Sqrt, &[zero]).is_err());
        let one = tape.leaf(1.0);
        assert!(primitive(Primitive::Div, &[one, zero]).is_err());
        assert!(matches!(
            primitive(Primitive::Add, &[one]),
            Err(TapeError::Arity { .. })
        ));
    }

    /// Build a pseudo-random ~50-node graph from kink-free primitives.
    fn random_graph<'t>(xs: &[Var<'t>], seed: u64) -> Var<'t> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<Var<'t>> = xs.to_vec();
        for _ in 0..50 {
            let a = pool[rng.gen_range(0..pool.len())];
            let b = pool[rng.gen_range(0..pool.len())];
            let v = match rng.gen_range(0..8) {
                0 => a + b,
                1 => a - b,
                2 => a * b * 0.5,
                3 => a.sin(),
                4 => a.cos(),
                5 => (a * a + 1.0).ln(),
                6 => (a * a + b * b + 1.0).sqrt(),
                _ => (a * 0.3).exp(),
            };
            pool.push(v);
        }
        let mut acc = pool[0];
        for v in &pool[1..] {
            acc = acc + *v;
        }
        acc
    }

    #[test]
    fn random_graph_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let point: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.2..1.2)).collect();
            let err = grad_check(|_, xs| random_graph(xs, seed), &point, 1e-5).unwrap();
            assert!(err < 1e-5, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn grad_check_product() {
        let err = grad_check(|_, xs| xs[0] * xs[1], &[2.0, 3.0], 1e-5).unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // Interior points keep each primitive away from its kinks and poles.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = rng.gen_range(0.2..1.4);
            let b = rng.gen_range(0.2..1.4);
            let err = grad_check(
                |_, xs| {
                    let (x, y) = (xs[0], xs[1]);
                    let mut acc = x + y;
                    acc = acc + (x - y);
                    acc = acc + x * y;
                    acc = acc + x / y;
                    acc = acc + (-x);
                    acc = acc + x.sin() + x.cos() + x.tan();
                    acc = acc + x.exp() + x.ln() + x.sqrt();
                    acc = acc + x.powf(1.7) + (x - 0.8).abs();
                    acc = acc + y.atan2(x);
                    acc = acc + x.max(y) + x.min(y);
                    acc
                },
                &[a, b],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "a={a} b={b}: rel err {err}");
        }
    }

    #[test]
    fn gradient_of_independent_subgraphs_is_concatenation() {
        let tape = Tape::new();
        let xs: Vec<Var<'_>> = (0..4).map(|i| tape.leaf(0.3 + 0.4 * i as f64)).collect();
        let mut individual = Vec::new();
        for &x in &xs {
            let y = x.sin() * x + x.exp();
            let g = tape.backward(y).unwrap();
            individual.push(g.wrt(x));
        }
        let mut total = xs[0].sin() * xs[0] + xs[0].exp();
        for &x in &xs[1..] {
            total = total + x.sin() * x + x.exp();
        }
        let g = tape.backward(total).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            assert!((g.wrt(x) - individual[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn replay_reproduces_values_bit_exactly() {
        let tape = Tape::new();
        let x = tape.leaf(0.73);
        let y = tape.leaf(-1.21);
        let z = (x * y + x.sin()).exp() / (y.abs() + 2.0) + x.powf(2.5) + (x * 3.0 - 1.0);
        let _keep = z.atan2(x) + z.max(x) + z.min(y) + (2.0 - z) + (4.0 / (z * z + 1.0));
        let replayed = tape.replay();
        let nodes = tape.nodes_ref();
        for (i, node) in nodes.iter().enumerate() {
            assert!(
                replayed[i].to_bits() == node.value.to_bits(),
                "node {i} ({:?}): replay {} vs stored {}",
                node.op,
                replayed[i],
                node.value
            );
        }
    }

    #[test]
    fn discarded_tape_leaves_no_state() {
        let compute = || {
            let tape = Tape::new();
            let x = tape.leaf(1.1);
            let y = (x.sin() + x.exp()).ln();
            let g = tape.backward(y).unwrap();
            (y.value(), g.wrt(x))
        };
        let first = compute();
        {
            let scratch = Tape::new();
            let a = scratch.leaf(9.0);
            let _ = a * a + a.sqrt();
        }
        let second = compute();
        assert_eq!(first.0.to_bits(), second.0.to_bits());
        assert_eq!(first.1.to_bits(), second.1.to_bits());
    }

    #[test]
    fn min_max_tie_takes_left_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(1.0);
        let y = tape.leaf(1.0);
        let m = x.max(y);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x), 1.0);
        assert_eq!(g.wrt(y), 0.0);
    }

    #[test]
    fn abs_subgradient_zero_at_kink() {
        let tape = Tape::new();
        let x = tape.leaf(0.0);
        let y = x.abs().powf(0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), 0.0);
    }

    #[test]
    fn constant_folding_keeps_result_untaped() {
        let a = Var::constant(2.0);
        let b = Var::constant(3.0);
        let c = a * b + a.sin();
        assert!(c.node_index().is_none());
        assert!((c.value() - (6.0 + 2.0f64.sin())).abs() < 1e-15);
    }

    #[test]
    fn backward_seeded_accumulates_multiple_outputs() {
        let tape = Tape::new();
        let x = tape.leaf(0.4);
        let f = x.sin();
        let g = x * x;
        // d(2f + 3g)/dx = 2 cos(x) + 6x
        let grads = tape.backward_seeded(&[(f, 2.0), (g, 3.0)]).unwrap();
        let expected = 2.0 * 0.4f64.cos() + 6.0 * 0.4;
        assert!((grads.wrt(x) - expected).abs() < 1e-14);
    }
}
