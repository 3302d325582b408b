//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Scalar double-precision only: no tensors, no broadcasting, no higher-order
//! derivatives. Operations append nodes to an arena held by a [`Tape`]; each
//! node stores its payload and edges to its parents with the local partial
//! derivative computed at forward time. [`Tape::backward`] seeds the root
//! with 1 and sweeps the arena in reverse, accumulating cotangents with `+=`
//! so fan-out (a value used several times) is handled naturally.
//!
//! Because nodes can only reference already-existing nodes, parent indices
//! are always smaller than the child's index. The arena order is therefore a
//! topological order by construction and cycles are unrepresentable.
//!
//! A tape is confined to one thread (`RefCell` inside), and handles are tied
//! to their tape by lifetime. The intended rhythm in a training loop is:
//! register leaves, build the loss, call [`Tape::backward`], read gradients,
//! then [`Tape::reset`] and reuse the allocation for the next batch.
//!
//! ```
//! use aeon::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.var(2.0);
//! let y = tape.var(3.0);
//! let f = x * y + x.powi(2);
//! let grads = tape.backward(f);
//! assert_eq!(f.value(), 10.0);
//! assert_eq!(grads.wrt(x), 7.0); // y + 2x
//! assert_eq!(grads.wrt(y), 2.0); // x
//! ```

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::special;

/// Identifies the operation that produced a node; carried for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum OpKind {
    Leaf,
    Detach,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    Offset,
    Recip,
    Exp,
    Ln,
    Sqrt,
    Powi,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Clamp,
    Erfinv,
    Sum,
    Dot,
    DotConst,
    Affine,
    AffineVar,
    LogSumExp,
}

#[derive(Clone, Copy)]
struct Node {
    first_edge: u32,
    n_edges: u32,
    /// Kept for debugger inspection of graphs; backward only needs edges.
    #[allow(dead_code)]
    op: OpKind,
}

#[derive(Default)]
struct TapeInner {
    values: Vec<f64>,
    nodes: Vec<Node>,
    edge_parent: Vec<u32>,
    edge_partial: Vec<f64>,
    grads: Vec<f64>,
}

impl TapeInner {
    fn push(&mut self, value: f64, op: OpKind, edges: &[(u32, f64)]) -> u32 {
        let first_edge = self.edge_parent.len() as u32;
        for &(p, d) in edges {
            debug_assert!((p as usize) < self.nodes.len(), "edge to a future node");
            self.edge_parent.push(p);
            self.edge_partial.push(d);
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            first_edge,
            n_edges: edges.len() as u32,
            op,
        });
        self.values.push(value);
        idx
    }
}

/// Arena of differentiation nodes. See the module docs for the usage rhythm.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to one node on a [`Tape`]. Copyable; tied to its tape by lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var[{}]={}", self.idx, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clear all nodes but keep allocations for reuse.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.values.clear();
        inner.nodes.clear();
        inner.edge_parent.clear();
        inner.edge_partial.clear();
        inner.grads.clear();
    }

    /// Register a differentiable leaf.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(value, OpKind::Leaf, &[]);
        Var { tape: self, idx }
    }

    /// Register a constant leaf (a leaf whose gradient nobody reads).
    pub fn lit(&self, value: f64) -> Var<'_> {
        self.var(value)
    }

    fn unary(&self, op: OpKind, value: f64, parent: Var<'_>, partial: f64) -> Var<'_> {
        debug_assert!(std::ptr::eq(parent.tape, self), "var from another tape");
        let idx = self
            .inner
            .borrow_mut()
            .push(value, op, &[(parent.idx, partial)]);
        Var { tape: self, idx }
    }

    fn binary(
        &self,
        op: OpKind,
        value: f64,
        a: Var<'_>,
        da: f64,
        b: Var<'_>,
        db: f64,
    ) -> Var<'_> {
        debug_assert!(std::ptr::eq(a.tape, self) && std::ptr::eq(b.tape, self));
        let idx = self
            .inner
            .borrow_mut()
            .push(value, op, &[(a.idx, da), (b.idx, db)]);
        Var { tape: self, idx }
    }

    /// Sum of a non-empty slice of variables.
    pub fn sum<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        assert!(!xs.is_empty(), "sum of nothing");
        let mut inner = self.inner.borrow_mut();
        let mut acc = 0.0;
        let first_edge = inner.edge_parent.len() as u32;
        for x in xs {
            acc += inner.values[x.idx as usize];
            inner.edge_parent.push(x.idx);
            inner.edge_partial.push(1.0);
        }
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            first_edge,
            n_edges: xs.len() as u32,
            op: OpKind::Sum,
        });
        inner.values.push(acc);
        Var { tape: self, idx }
    }

    /// Inner product of two equal-length slices of variables.
    pub fn dot<'t>(&'t self, a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
        assert_eq!(a.len(), b.len(), "dot of mismatched lengths");
        assert!(!a.is_empty());
        let mut inner = self.inner.borrow_mut();
        let mut acc = 0.0;
        let first_edge = inner.edge_parent.len() as u32;
        for (x, y) in a.iter().zip(b) {
            let (xv, yv) = (inner.values[x.idx as usize], inner.values[y.idx as usize]);
            acc += xv * yv;
            inner.edge_parent.push(x.idx);
            inner.edge_partial.push(yv);
            inner.edge_parent.push(y.idx);
            inner.edge_partial.push(xv);
        }
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            first_edge,
            n_edges: 2 * a.len() as u32,
            op: OpKind::Dot,
        });
        inner.values.push(acc);
        Var { tape: self, idx }
    }

    /// Inner product of variables with a constant vector.
    pub fn dot_const<'t>(&'t self, a: &[Var<'t>], c: &[f64]) -> Var<'t> {
        assert_eq!(a.len(), c.len(), "dot_const of mismatched lengths");
        assert!(!a.is_empty());
        let mut inner = self.inner.borrow_mut();
        let mut acc = 0.0;
        let first_edge = inner.edge_parent.len() as u32;
        for (x, &w) in a.iter().zip(c) {
            acc += inner.values[x.idx as usize] * w;
            inner.edge_parent.push(x.idx);
            inner.edge_partial.push(w);
        }
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            first_edge,
            n_edges: a.len() as u32,
            op: OpKind::DotConst,
        });
        inner.values.push(acc);
        Var { tape: self, idx }
    }

    /// bias + sum(weights[i] * inputs[i]) with constant inputs.
    ///
    /// The accumulation order (bias first, then ascending index) mirrors the
    /// plain-f64 model forward so on-tape and off-tape passes agree bitwise.
    pub fn affine<'t>(&'t self, weights: &[Var<'t>], inputs: &[f64], bias: Var<'t>) -> Var<'t> {
        assert_eq!(weights.len(), inputs.len(), "affine shape mismatch");
        let mut inner = self.inner.borrow_mut();
        let mut acc = inner.values[bias.idx as usize];
        let first_edge = inner.edge_parent.len() as u32;
        inner.edge_parent.push(bias.idx);
        inner.edge_partial.push(1.0);
        for (w, &x) in weights.iter().zip(inputs) {
            acc += inner.values[w.idx as usize] * x;
            inner.edge_parent.push(w.idx);
            inner.edge_partial.push(x);
        }
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            first_edge,
            n_edges: 1 + weights.len() as u32,
            op: OpKind::Affine,
        });
        inner.values.push(acc);
        Var { tape: self, idx }
    }

    /// bias + sum(weights[i] * acts[i]) with both factors on the tape.
    pub fn affine_var<'t>(
        &'t self,
        weights: &[Var<'t>],
        acts: &[Var<'t>],
        bias: Var<'t>,
    ) -> Var<'t> {
        assert_eq!(weights.len(), acts.len(), "affine_var shape mismatch");
        let mut inner = self.inner.borrow_mut();
        let mut acc = inner.values[bias.idx as usize];
        let first_edge = inner.edge_parent.len() as u32;
        inner.edge_parent.push(bias.idx);
        inner.edge_partial.push(1.0);
        for (w, a) in weights.iter().zip(acts) {
            let (wv, av) = (inner.values[w.idx as usize], inner.values[a.idx as usize]);
            acc += wv * av;
            inner.edge_parent.push(w.idx);
            inner.edge_partial.push(av);
            inner.edge_parent.push(a.idx);
            inner.edge_partial.push(wv);
        }
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            first_edge,
            n_edges: 1 + 2 * weights.len() as u32,
            op: OpKind::AffineVar,
        });
        inner.values.push(acc);
        Var { tape: self, idx }
    }

    /// log(sum(exp(xs))) with max subtraction; finite for any finite inputs.
    /// Local partials are the softmax weights of the inputs.
    pub fn logsumexp<'t>(&'t self, xs: &[Var<'t>]) -> Var<'t> {
        assert!(!xs.is_empty(), "logsumexp of nothing");
        let mut inner = self.inner.borrow_mut();
        let mut m = f64::NEG_INFINITY;
        for x in xs {
            m = m.max(inner.values[x.idx as usize]);
        }
        let first_edge = inner.edge_parent.len() as u32;
        let mut total = 0.0;
        for x in xs {
            let e = (inner.values[x.idx as usize] - m).exp();
            total += e;
            inner.edge_parent.push(x.idx);
            inner.edge_partial.push(e);
        }
        let start = first_edge as usize;
        for d in &mut inner.edge_partial[start..] {
            *d /= total;
        }
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            first_edge,
            n_edges: xs.len() as u32,
            op: OpKind::LogSumExp,
        });
        inner.values.push(m + total.ln());
        Var { tape: self, idx }
    }

    /// Reverse sweep from `root`: zeroes all cotangents, seeds the root with
    /// 1, and accumulates into every ancestor. Returns a read guard over the
    /// gradients; drop it before appending new nodes.
    ///
    /// Nodes whose accumulated cotangent is exactly 0 propagate nothing, so
    /// unused branches cost nothing and cannot poison ancestors through a
    /// non-finite local partial.
    pub fn backward(&self, root: Var<'_>) -> Gradients<'_> {
        debug_assert!(std::ptr::eq(root.tape, self));
        {
            let mut inner = self.inner.borrow_mut();
            let n = inner.nodes.len();
            inner.grads.clear();
            inner.grads.resize(n, 0.0);
            inner.grads[root.idx as usize] = 1.0;
            let TapeInner {
                nodes,
                edge_parent,
                edge_partial,
                grads,
                ..
            } = &mut *inner;
            for i in (0..=root.idx as usize).rev() {
                let g = grads[i];
                if g == 0.0 {
                    continue;
                }
                let node = nodes[i];
                let lo = node.first_edge as usize;
                let hi = lo + node.n_edges as usize;
                for e in lo..hi {
                    grads[edge_parent[e] as usize] += g * edge_partial[e];
                }
            }
        }
        Gradients {
            inner: self.inner.borrow(),
        }
    }
}

/// Read-only view of the cotangents produced by [`Tape::backward`].
pub struct Gradients<'t> {
    inner: Ref<'t, TapeInner>,
}

impl Gradients<'_> {
    /// Gradient of the backward root with respect to `v`.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.inner.grads[v.idx as usize]
    }
}

impl<'t> Var<'t> {
    /// Current payload of this node.
    pub fn value(self) -> f64 {
        self.tape.inner.borrow().values[self.idx as usize]
    }

    /// The tape this handle lives on.
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    /// New leaf with the same payload and no parents: gradients stop here.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        let idx = self.tape.inner.borrow_mut().push(v, OpKind::Detach, &[]);
        Var {
            tape: self.tape,
            idx,
        }
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value().exp();
        self.tape.unary(OpKind::Exp, e, self, e)
    }

    /// Natural logarithm; non-positive input is a domain error.
    pub fn ln(self) -> Result<Var<'t>> {
        let v = self.value();
        if v <= 0.0 || v.is_nan() {
            return Err(Error::Domain { func: "ln", arg: v });
        }
        Ok(self.tape.unary(OpKind::Ln, v.ln(), self, 1.0 / v))
    }

    /// Square root; negative input is a domain error, zero gives an infinite
    /// partial (callers that can see zero should add a guard first).
    pub fn sqrt(self) -> Result<Var<'t>> {
        let v = self.value();
        if v < 0.0 || v.is_nan() {
            return Err(Error::Domain {
                func: "sqrt",
                arg: v,
            });
        }
        let s = v.sqrt();
        Ok(self.tape.unary(OpKind::Sqrt, s, self, 0.5 / s))
    }

    /// Integer power.
    pub fn powi(self, n: i32) -> Var<'t> {
        let v = self.value();
        self.tape
            .unary(OpKind::Powi, v.powi(n), self, f64::from(n) * v.powi(n - 1))
    }

    /// max(0, x). The partial at exactly 0 is 0.
    pub fn relu(self) -> Var<'t> {
        let v = self.value();
        let (y, d) = if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) };
        self.tape.unary(OpKind::Relu, y, self, d)
    }

    /// x for x > 0, slope * x otherwise.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value();
        let (y, d) = if v > 0.0 { (v, 1.0) } else { (slope * v, slope) };
        self.tape.unary(OpKind::LeakyRelu, y, self, d)
    }

    /// Logistic function, matching [`special::sigmoid`] bitwise (including
    /// its saturation clamp, so outputs stay strictly inside (0, 1)).
    pub fn sigmoid(self) -> Var<'t> {
        let s = special::sigmoid(self.value());
        self.tape.unary(OpKind::Sigmoid, s, self, s * (1.0 - s))
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value().tanh();
        self.tape.unary(OpKind::Tanh, t, self, 1.0 - t * t)
    }

    /// Clamp to [lo, hi]; the partial is 1 inside the interval (inclusive)
    /// and 0 outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        debug_assert!(lo <= hi);
        let v = self.value();
        let (y, d) = if v < lo {
            (lo, 0.0)
        } else if v > hi {
            (hi, 0.0)
        } else {
            (v, 1.0)
        };
        self.tape.unary(OpKind::Clamp, y, self, d)
    }

    /// Inverse error function, a tape primitive so thresholds can be
    /// differentiated. The local partial is the analytic
    /// sqrt(pi)/2 * exp(erfinv(x)^2), exact for the true inverse rather than
    /// a derivative of the polynomial approximation.
    pub fn erfinv(self) -> Result<Var<'t>> {
        let y = special::erfinv(self.value())?;
        Ok(self
            .tape
            .unary(OpKind::Erfinv, y, self, special::erfinv_slope_at(y)))
    }
}

// === operator overloads ===

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(
            OpKind::Add,
            self.value() + rhs.value(),
            self,
            1.0,
            rhs,
            1.0,
        )
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(
            OpKind::Sub,
            self.value() - rhs.value(),
            self,
            1.0,
            rhs,
            -1.0,
        )
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.tape.binary(OpKind::Mul, a * b, self, b, rhs, a)
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.tape
            .binary(OpKind::Div, a / b, self, 1.0 / b, rhs, -a / (b * b))
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(OpKind::Neg, -self.value(), self, -1.0)
    }
}

impl<'t> std::ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.tape.unary(OpKind::Offset, self.value() + c, self, 1.0)
    }
}

impl<'t> std::ops::Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, v: Var<'t>) -> Var<'t> {
        v + self
    }
}

impl<'t> std::ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.tape.unary(OpKind::Offset, self.value() - c, self, 1.0)
    }
}

impl<'t> std::ops::Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        v.tape.unary(OpKind::Offset, self - v.value(), v, -1.0)
    }
}

impl<'t> std::ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.tape.unary(OpKind::Scale, self.value() * c, self, c)
    }
}

impl<'t> std::ops::Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v * self
    }
}

impl<'t> std::ops::Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.tape
            .unary(OpKind::Scale, self.value() / c, self, 1.0 / c)
    }
}

impl<'t> std::ops::Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, v: Var<'t>) -> Var<'t> {
        let b = v.value();
        v.tape
            .unary(OpKind::Recip, self / b, v, -self / (b * b))
    }
}
