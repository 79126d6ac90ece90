//! Reverse-mode automatic differentiation over tensors.
//!
//! The engine records every operation eagerly on a growing graph. Calling
//! [`Graph::backward`] does not return plain numbers: it appends *new graph
//! nodes* that compute the adjoints, using only operations the graph itself
//! supports. Because of that, a gradient is itself differentiable, which is
//! how second-order quantities (Hessian-vector products, mixed
//! theta/omega products) are obtained without hand-derived Hessians.
//!
//! Conventions:
//! - scalars are rank-0 tensors;
//! - row-wise max subtraction inside softmax/log-softmax composites carries a
//!   pass-through gradient, which is exact because both composites are
//!   invariant to per-row logit shifts;
//! - logarithms clamp their input below at [`crate::tensor::LOG_CLAMP`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{DlfError, Result};
use crate::param::ParamVector;
use crate::tensor::{sigmoid, Tensor, LOG_CLAMP};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    ClampMin(Var, f64),
    SubRowMax(Var),
    Sum(Var),
    RowSum(Var),
    ColSum(Var),
    BroadcastCol(Var),
    BroadcastRow(Var),
    BroadcastScalar(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Var, Rc<Vec<usize>>),
    Take(Var, Rc<Vec<usize>>),
    ScatterAdd(Var, Rc<Vec<usize>>),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::ClampMin(..) => "clamp_min",
            Op::SubRowMax(..) => "sub_row_max",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
            Op::ColSum(..) => "col_sum",
            Op::BroadcastCol(..) => "broadcast_col",
            Op::BroadcastRow(..) => "broadcast_row",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::Take(..) => "take",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Eagerly evaluated computation graph.
///
/// Single-threaded by design: one graph serves one objective evaluation and
/// the backward sweeps derived from it.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(DlfError::non_finite(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, false)
    }

    /// One differentiable leaf per segment of a parameter vector.
    pub fn vars_for(&self, p: &ParamVector) -> Result<Vec<Var>> {
        p.segments()
            .iter()
            .map(|(_, t)| self.var(t.clone()))
            .collect()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn with_values<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn binary(
        &self,
        op: Op,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var> {
        let value = self.with_values(a, b, f)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(op, value, rg)
    }

    fn unary(&self, op: Op, a: Var, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var> {
        let value = self.with_value(a, f)?;
        let rg = self.requires_grad(a);
        self.push(op, value, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x.add(y))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x.sub(y))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x.mul(y))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div(a, b), a, b, |x, y| x.zip_map(y, "div", |p, q| p / q))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::MatMul(a, b), a, b, |x, y| x.matmul(y))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.unary(Op::Transpose(a), a, |x| x.transpose())
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(a, c), a, |x| Ok(x.scale(c)))
    }

    pub fn add_const(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddConst(a), a, |x| Ok(x.map(|v| v + c)))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid(a), a, |x| Ok(x.map(sigmoid)))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(Op::Exp(a), a, |x| Ok(x.map(f64::exp)))
    }

    fn ln(&self, a: Var) -> Result<Var> {
        self.unary(Op::Ln(a), a, |x| Ok(x.map(f64::ln)))
    }

    fn clamp_min(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::ClampMin(a, c), a, |x| Ok(x.map(|v| v.max(c))))
    }

    /// Natural log with the input clamped below at [`LOG_CLAMP`].
    pub fn log(&self, a: Var) -> Result<Var> {
        let clamped = self.clamp_min(a, LOG_CLAMP)?;
        self.ln(clamped)
    }

    fn sub_row_max(&self, a: Var) -> Result<Var> {
        self.unary(Op::SubRowMax(a), a, |x| {
            let (m, n) = x.dims2("sub_row_max")?;
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                let row = &x.data()[i * n..(i + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                data.extend(row.iter().map(|&v| v - max));
            }
            Tensor::from_vec(vec![m, n], data)
        })
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.unary(Op::Sum(a), a, |x| Ok(Tensor::scalar(x.sum())))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.with_value(a, |x| x.len());
        if n == 0 {
            return Err(DlfError::shape("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn row_sum(&self, a: Var) -> Result<Var> {
        self.unary(Op::RowSum(a), a, |x| x.row_sum())
    }

    pub fn col_sum(&self, a: Var) -> Result<Var> {
        self.unary(Op::ColSum(a), a, |x| x.col_sum())
    }

    /// Replicates a `(rows, 1)` column across `cols` columns.
    pub fn broadcast_col(&self, a: Var, cols: usize) -> Result<Var> {
        self.unary(Op::BroadcastCol(a), a, |x| {
            let (m, one) = x.dims2("broadcast_col")?;
            if one != 1 {
                return Err(DlfError::shape(
                    "broadcast_col",
                    format!("expected a single column, got {:?}", x.shape()),
                ));
            }
            let mut data = Vec::with_capacity(m * cols);
            for i in 0..m {
                data.extend(std::iter::repeat_n(x.data()[i], cols));
            }
            Tensor::from_vec(vec![m, cols], data)
        })
    }

    /// Replicates a `(1, cols)` row across `rows` rows.
    pub fn broadcast_row(&self, a: Var, rows: usize) -> Result<Var> {
        self.unary(Op::BroadcastRow(a), a, |x| {
            let (one, n) = x.dims2("broadcast_row")?;
            if one != 1 {
                return Err(DlfError::shape(
                    "broadcast_row",
                    format!("expected a single row, got {:?}", x.shape()),
                ));
            }
            let mut data = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                data.extend_from_slice(x.data());
            }
            Tensor::from_vec(vec![rows, n], data)
        })
    }

    /// Fills `shape` with the value of a scalar node.
    pub fn broadcast_scalar(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.unary(Op::BroadcastScalar(a), a, |x| {
            Ok(Tensor::filled(shape, x.item()?))
        })
    }

    /// Per-row element selection: output `i` is `a[i, idx[i]]`.
    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        self.unary(Op::GatherRows(a, Rc::clone(&idx)), a, |x| {
            let (m, n) = x.dims2("gather_rows")?;
            if idx.len() != m {
                return Err(DlfError::shape(
                    "gather_rows",
                    format!("{} indices for {} rows", idx.len(), m),
                ));
            }
            let mut data = Vec::with_capacity(m);
            for (i, &j) in idx.iter().enumerate() {
                if j >= n {
                    return Err(DlfError::InvalidArg(format!(
                        "gather_rows index {j} out of range for {n} columns"
                    )));
                }
                data.push(x.at2(i, j));
            }
            Tensor::from_vec(vec![m], data)
        })
    }

    /// Adjoint of [`Graph::gather_rows`]: scatters a `(rows,)` vector into a
    /// zero `(rows, cols)` matrix at `(i, idx[i])`.
    fn scatter_rows(&self, a: Var, idx: Rc<Vec<usize>>, cols: usize) -> Result<Var> {
        self.unary(Op::ScatterRows(a, Rc::clone(&idx)), a, |x| {
            let m = x.len();
            if idx.len() != m || x.shape().len() != 1 {
                return Err(DlfError::shape(
                    "scatter_rows",
                    format!("expected ({},) input, got {:?}", idx.len(), x.shape()),
                ));
            }
            let mut data = vec![0.0; m * cols];
            for (i, (&j, &v)) in idx.iter().zip(x.data()).enumerate() {
                data[i * cols + j] = v;
            }
            Tensor::from_vec(vec![m, cols], data)
        })
    }

    /// Vector element selection with repetition: output `i` is `a[idx[i]]`.
    pub fn take(&self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        self.unary(Op::Take(a, Rc::clone(&idx)), a, |x| {
            if x.shape().len() != 1 {
                return Err(DlfError::shape(
                    "take",
                    format!("expected rank-1 tensor, got {:?}", x.shape()),
                ));
            }
            let n = x.len();
            let mut data = Vec::with_capacity(idx.len());
            for &j in idx.iter() {
                if j >= n {
                    return Err(DlfError::InvalidArg(format!(
                        "take index {j} out of range for length {n}"
                    )));
                }
                data.push(x.data()[j]);
            }
            Tensor::from_vec(vec![idx.len()], data)
        })
    }

    /// Adjoint of [`Graph::take`]: sums a `(k,)` vector into a zero `(len,)`
    /// vector at positions `idx`.
    fn scatter_add(&self, a: Var, idx: Rc<Vec<usize>>, len: usize) -> Result<Var> {
        self.unary(Op::ScatterAdd(a, Rc::clone(&idx)), a, |x| {
            if x.shape().len() != 1 || x.len() != idx.len() {
                return Err(DlfError::shape(
                    "scatter_add",
                    format!("expected ({},) input, got {:?}", idx.len(), x.shape()),
                ));
            }
            let mut data = vec![0.0; len];
            for (&j, &v) in idx.iter().zip(x.data()) {
                data[j] += v;
            }
            Tensor::from_vec(vec![len], data)
        })
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.unary(Op::Reshape(a), a, |x| x.reshaped(shape))
    }

    /// Row-wise softmax composite; exact under per-row shifts.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let cols = self.with_value(a, |x| x.dims2("softmax_rows").map(|(_, n)| n))?;
        let z = self.sub_row_max(a)?;
        let e = self.exp(z)?;
        let s = self.row_sum(e)?;
        let sb = self.broadcast_col(s, cols)?;
        self.div(e, sb)
    }

    /// Row-wise log-softmax composite.
    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        let cols = self.with_value(a, |x| x.dims2("log_softmax_rows").map(|(_, n)| n))?;
        let z = self.sub_row_max(a)?;
        let e = self.exp(z)?;
        let s = self.row_sum(e)?;
        let l = self.ln(s)?;
        let lb = self.broadcast_col(l, cols)?;
        self.sub(z, lb)
    }

    /// Inner product of two same-shape nodes as a scalar node.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    fn accumulate(&self, slot: &mut Option<Var>, contrib: Var) -> Result<()> {
        *slot = Some(match slot.take() {
            Some(prev) => self.add(prev, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    /// Appends adjoint nodes for `d out / d wrt[i]` and returns one handle per
    /// requested leaf (`None` when `out` does not depend on it).
    ///
    /// `out` must hold exactly one element. The returned nodes are ordinary
    /// graph nodes, so the sweep can be applied again to any scalar built
    /// from them; that is the double-backward path used by [`hvp`].
    pub fn backward(&self, out: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        let (out_len, out_shape) =
            self.with_value(out, |t| (t.len(), t.shape().to_vec()));
        if out_len != 1 {
            return Err(DlfError::shape(
                "backward",
                format!("output must be scalar, got shape {:?}", out_shape),
            ));
        }
        let limit = out.0;
        let mut adjoint: Vec<Option<Var>> = vec![None; limit + 1];
        if self.requires_grad(out) {
            adjoint[limit] = Some(self.constant(Tensor::filled(out_shape, 1.0))?);
            for id in (0..=limit).rev() {
                let Some(g) = adjoint[id] else { continue };
                let op = {
                    let nodes = self.nodes.borrow();
                    if !nodes[id].requires_grad {
                        continue;
                    }
                    nodes[id].op.clone()
                };
                self.apply_rule(Var(id), &op, g, &mut adjoint)?;
            }
        }
        Ok(wrt
            .iter()
            .map(|v| if v.0 <= limit { adjoint[v.0] } else { None })
            .collect())
    }

    fn apply_rule(
        &self,
        y: Var,
        op: &Op,
        g: Var,
        adjoint: &mut [Option<Var>],
    ) -> Result<()> {
        // Contributions are only pushed into inputs that require grad.
        let mut push = |this: &Self, v: Var, make: &mut dyn FnMut(&Self) -> Result<Var>| -> Result<()> {
            if this.requires_grad(v) {
                let contrib = make(this)?;
                this.accumulate(&mut adjoint[v.0], contrib)?;
            }
            Ok(())
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(self, *a, &mut |_| Ok(g))?;
                push(self, *b, &mut |_| Ok(g))?;
            }
            Op::Sub(a, b) => {
                push(self, *a, &mut |_| Ok(g))?;
                push(self, *b, &mut |s: &Self| s.scale(g, -1.0))?;
            }
            Op::Mul(a, b) => {
                push(self, *a, &mut |s: &Self| s.mul(g, *b))?;
                push(self, *b, &mut |s: &Self| s.mul(g, *a))?;
            }
            Op::Div(a, b) => {
                push(self, *a, &mut |s: &Self| s.div(g, *b))?;
                push(self, *b, &mut |s: &Self| {
                    let ratio = s.div(y, *b)?;
                    let prod = s.mul(g, ratio)?;
                    s.scale(prod, -1.0)
                })?;
            }
            Op::MatMul(a, b) => {
                push(self, *a, &mut |s: &Self| {
                    let bt = s.transpose(*b)?;
                    s.matmul(g, bt)
                })?;
                push(self, *b, &mut |s: &Self| {
                    let at = s.transpose(*a)?;
                    s.matmul(at, g)
                })?;
            }
            Op::Transpose(a) => push(self, *a, &mut |s: &Self| s.transpose(g))?,
            Op::Scale(a, c) => {
                let c = *c;
                push(self, *a, &mut |s: &Self| s.scale(g, c))?;
            }
            Op::AddConst(a) => push(self, *a, &mut |_| Ok(g))?,
            Op::Sigmoid(a) => {
                push(self, *a, &mut |s: &Self| {
                    let neg = s.scale(y, -1.0)?;
                    let one_minus = s.add_const(neg, 1.0)?;
                    let dy = s.mul(y, one_minus)?;
                    s.mul(g, dy)
                })?;
            }
            Op::Exp(a) => push(self, *a, &mut |s: &Self| s.mul(g, y))?,
            Op::Ln(a) => push(self, *a, &mut |s: &Self| s.div(g, *a))?,
            Op::ClampMin(a, c) => {
                let c = *c;
                push(self, *a, &mut |s: &Self| {
                    let mask = s.with_value(*a, |t| t.map(|v| if v >= c { 1.0 } else { 0.0 }));
                    let mask = s.constant(mask)?;
                    s.mul(g, mask)
                })?;
            }
            // Exact for the shift-invariant softmax composites this op is
            // restricted to.
            Op::SubRowMax(a) => push(self, *a, &mut |_| Ok(g))?,
            Op::Sum(a) => {
                push(self, *a, &mut |s: &Self| {
                    let shape = s.shape(*a);
                    s.broadcast_scalar(g, shape)
                })?;
            }
            Op::RowSum(a) => {
                push(self, *a, &mut |s: &Self| {
                    let cols = s.shape(*a)[1];
                    s.broadcast_col(g, cols)
                })?;
            }
            Op::ColSum(a) => {
                push(self, *a, &mut |s: &Self| {
                    let rows = s.shape(*a)[0];
                    s.broadcast_row(g, rows)
                })?;
            }
            Op::BroadcastCol(a) => push(self, *a, &mut |s: &Self| s.row_sum(g))?,
            Op::BroadcastRow(a) => push(self, *a, &mut |s: &Self| s.col_sum(g))?,
            Op::BroadcastScalar(a) => push(self, *a, &mut |s: &Self| s.sum(g))?,
            Op::GatherRows(a, idx) => {
                let idx = Rc::clone(idx);
                push(self, *a, &mut |s: &Self| {
                    let cols = s.shape(*a)[1];
                    s.scatter_rows(g, Rc::clone(&idx), cols)
                })?;
            }
            Op::ScatterRows(a, idx) => {
                let idx = Rc::clone(idx);
                push(self, *a, &mut |s: &Self| s.gather_rows(g, Rc::clone(&idx)))?;
            }
            Op::Take(a, idx) => {
                let idx = Rc::clone(idx);
                push(self, *a, &mut |s: &Self| {
                    let len = s.shape(*a)[0];
                    s.scatter_add(g, Rc::clone(&idx), len)
                })?;
            }
            Op::ScatterAdd(a, idx) => {
                let idx = Rc::clone(idx);
                push(self, *a, &mut |s: &Self| s.take(g, Rc::clone(&idx)))?;
            }
            Op::Reshape(a) => {
                push(self, *a, &mut |s: &Self| {
                    let shape = s.shape(*a);
                    s.reshape(g, shape)
                })?;
            }
        }
        Ok(())
    }
}

/// Scalar-valued function of one parameter vector, expressed as a graph build.
pub trait ScalarFunction {
    fn build(&self, g: &Graph, x: &[Var]) -> Result<Var>;
}

impl<F> ScalarFunction for F
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    fn build(&self, g: &Graph, x: &[Var]) -> Result<Var> {
        self(g, x)
    }
}

/// Scalar-valued function of two parameter vectors.
pub trait ScalarFunction2 {
    fn build(&self, g: &Graph, a: &[Var], b: &[Var]) -> Result<Var>;
}

impl<F> ScalarFunction2 for F
where
    F: Fn(&Graph, &[Var], &[Var]) -> Result<Var>,
{
    fn build(&self, g: &Graph, a: &[Var], b: &[Var]) -> Result<Var> {
        self(g, a, b)
    }
}

fn ensure_scalar(g: &Graph, out: Var) -> Result<()> {
    let len = g.with_value(out, |t| t.len());
    if len != 1 {
        return Err(DlfError::shape(
            "scalar_function",
            format!("objective produced shape {:?}", g.shape(out)),
        ));
    }
    Ok(())
}

fn materialize(g: &Graph, like: &ParamVector, adj: &[Option<Var>]) -> Result<ParamVector> {
    let segments = like
        .segments()
        .iter()
        .zip(adj)
        .map(|((name, t), a)| {
            let tensor = match a {
                Some(v) => {
                    let val = g.value(*v);
                    debug_assert_eq!(val.shape(), t.shape());
                    val
                }
                None => Tensor::zeros(t.shape().to_vec()),
            };
            (name.clone(), tensor)
        })
        .collect();
    ParamVector::new(segments)
}

/// First-order gradient of `f` at `x`, with the segment structure of `x`.
pub fn grad<F: ScalarFunction>(f: &F, x: &ParamVector) -> Result<ParamVector> {
    let g = Graph::new();
    let leaves = g.vars_for(x)?;
    let out = f.build(&g, &leaves)?;
    ensure_scalar(&g, out)?;
    let adj = g.backward(out, &leaves)?;
    materialize(&g, x, &adj)
}

/// Gradients of a two-argument scalar function with respect to both arguments.
pub fn grad_pair<F: ScalarFunction2>(
    f: &F,
    a: &ParamVector,
    b: &ParamVector,
) -> Result<(ParamVector, ParamVector)> {
    let g = Graph::new();
    let la = g.vars_for(a)?;
    let lb = g.vars_for(b)?;
    let out = f.build(&g, &la, &lb)?;
    ensure_scalar(&g, out)?;
    let mut wrt = la.clone();
    wrt.extend_from_slice(&lb);
    let adj = g.backward(out, &wrt)?;
    let da = materialize(&g, a, &adj[..la.len()])?;
    let db = materialize(&g, b, &adj[la.len()..])?;
    Ok((da, db))
}

/// Builds the scalar `<grads, v>` from backward results, skipping absent grads.
fn grad_dot_v(
    g: &Graph,
    grads: &[Option<Var>],
    v: &ParamVector,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (gi, (_, vt)) in grads.iter().zip(v.segments()) {
        if let Some(gv) = gi {
            let c = g.constant(vt.clone())?;
            let d = g.dot(*gv, c)?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, d)?,
                None => d,
            });
        }
    }
    Ok(acc)
}

/// Hessian-vector product `(d^2 f / dx^2) v`, computed as the gradient of
/// `<grad(f, x), v>` with `v` held constant.
pub fn hvp<F: ScalarFunction>(f: &F, x: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    if !x.same_structure(v) {
        return Err(DlfError::shape("hvp", "v does not match the structure of x"));
    }
    let g = Graph::new();
    let leaves = g.vars_for(x)?;
    let out = f.build(&g, &leaves)?;
    ensure_scalar(&g, out)?;
    let grads = g.backward(out, &leaves)?;
    let Some(dot) = grad_dot_v(&g, &grads, v)? else {
        return Ok(x.zeros_like());
    };
    let h = g.backward(dot, &leaves)?;
    materialize(&g, x, &h)
}

/// Mixed second-order product `(d^2 f / da db) v` for `f(a, b)`, computed as
/// the gradient with respect to `a` of `<grad_b(f), v>` with `v` constant.
pub fn hvp_cross<F: ScalarFunction2>(
    f: &F,
    a: &ParamVector,
    b: &ParamVector,
    v: &ParamVector,
) -> Result<ParamVector> {
    Ok(hvp_pair(f, a, b, v)?.0)
}

/// Both second-order products against `v` in one sweep:
/// `((d^2 f / da db) v, (d^2 f / db^2) v)`.
///
/// Identical in value to calling [`hvp_cross`] and [`hvp`] separately but
/// shares the forward and first-backward graph between the two.
pub fn hvp_pair<F: ScalarFunction2>(
    f: &F,
    a: &ParamVector,
    b: &ParamVector,
    v: &ParamVector,
) -> Result<(ParamVector, ParamVector)> {
    if !b.same_structure(v) {
        return Err(DlfError::shape(
            "hvp_pair",
            "v does not match the structure of b",
        ));
    }
    let g = Graph::new();
    let la = g.vars_for(a)?;
    let lb = g.vars_for(b)?;
    let out = f.build(&g, &la, &lb)?;
    ensure_scalar(&g, out)?;
    let grads_b = g.backward(out, &lb)?;
    let Some(dot) = grad_dot_v(&g, &grads_b, v)? else {
        return Ok((a.zeros_like(), b.zeros_like()));
    };
    let mut wrt = la.clone();
    wrt.extend_from_slice(&lb);
    let h = g.backward(dot, &wrt)?;
    let da = materialize(&g, a, &h[..la.len()])?;
    let db = materialize(&g, b, &h[la.len()..])?;
    Ok((da, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(name: &str, data: Vec<f64>) -> ParamVector {
        let n = data.len();
        ParamVector::new(vec![(name.into(), Tensor::from_vec(vec![n], data).unwrap())]).unwrap()
    }

    fn half_sq_norm(g: &Graph, x: &[Var]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &v in x {
            let d = g.dot(v, v)?;
            acc = Some(match acc {
                Some(p) => g.add(p, d)?,
                None => d,
            });
        }
        g.scale(acc.unwrap(), 0.5)
    }

    #[test]
    fn grad_of_half_sq_norm_is_identity() {
        let x = pv("x", vec![1.5, -2.0, 0.25, 7.0]);
        let gx = grad(&half_sq_norm, &x).unwrap();
        assert_eq!(gx.flatten(), x.flatten());
    }

    #[test]
    fn grad_of_linear_is_the_coefficients() {
        let c = vec![2.0, -1.0, 0.5];
        let x = pv("x", vec![10.0, 20.0, 30.0]);
        let cc = c.clone();
        let f = move |g: &Graph, xs: &[Var]| {
            let cv = g.constant(Tensor::from_vec(vec![3], cc.clone())?)?;
            g.dot(cv, xs[0])
        };
        let gx = grad(&f, &x).unwrap();
        assert_eq!(gx.flatten(), c);
    }

    #[test]
    fn hvp_of_half_sq_norm_is_v() {
        let x = pv("x", vec![3.0, -1.0, 2.0]);
        let v = pv("x", vec![0.5, 4.0, -2.5]);
        let hv = hvp(&half_sq_norm, &x, &v).unwrap();
        assert_eq!(hv.flatten(), v.flatten());
    }

    #[test]
    fn hvp_of_linear_is_zero() {
        let x = pv("x", vec![1.0, 2.0]);
        let v = pv("x", vec![5.0, -5.0]);
        let f = |g: &Graph, xs: &[Var]| {
            let cv = g.constant(Tensor::from_vec(vec![2], vec![3.0, -4.0])?)?;
            g.dot(cv, xs[0])
        };
        let hv = hvp(&f, &x, &v).unwrap();
        assert_eq!(hv.flatten(), vec![0.0, 0.0]);
    }

    #[test]
    fn hvp_structure_mismatch_is_shape_error() {
        let x = pv("x", vec![1.0, 2.0]);
        let v = pv("x", vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            hvp(&half_sq_norm, &x, &v),
            Err(DlfError::Shape { .. })
        ));
    }

    #[test]
    fn hvp_cross_of_bilinear_is_v() {
        let a = pv("a", vec![1.0, 2.0, 3.0]);
        let b = pv("b", vec![-1.0, 0.5, 2.0]);
        let v = pv("b", vec![4.0, -3.0, 1.0]);
        let f = |g: &Graph, av: &[Var], bv: &[Var]| g.dot(av[0], bv[0]);
        let hv = hvp_cross(&f, &a, &b, &v).unwrap();
        assert_eq!(hv.flatten(), v.flatten());
    }

    #[test]
    fn hvp_cross_of_separable_is_zero() {
        let a = pv("a", vec![1.0, 2.0]);
        let b = pv("b", vec![3.0, 4.0]);
        let v = pv("b", vec![1.0, 1.0]);
        let f = |g: &Graph, av: &[Var], bv: &[Var]| {
            let ga = g.dot(av[0], av[0])?;
            let gb = g.dot(bv[0], bv[0])?;
            g.add(ga, gb)
        };
        let hv = hvp_cross(&f, &a, &b, &v).unwrap();
        assert_eq!(hv.flatten(), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_is_linear_in_the_function() {
        let x = pv("x", vec![0.3, -0.7, 1.1]);
        let f = |g: &Graph, xs: &[Var]| {
            let s = g.sigmoid(xs[0])?;
            g.sum(s)
        };
        let h = half_sq_norm;
        let (alpha, beta) = (2.5, -0.75);
        let combo = move |g: &Graph, xs: &[Var]| {
            let a = f(g, xs)?;
            let b = h(g, xs)?;
            let sa = g.scale(a, alpha)?;
            let sb = g.scale(b, beta)?;
            g.add(sa, sb)
        };
        let gc = grad(&combo, &x).unwrap();
        let gf = grad(&f, &x).unwrap();
        let gh = grad(&h, &x).unwrap();
        let expected = gf.scale(alpha).axpy(beta, &gh).unwrap();
        for (a, b) in gc.flatten().iter().zip(expected.flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn repeated_evaluation_is_bitwise_identical() {
        let x = pv("x", vec![0.1, 0.2, 0.3, 0.4]);
        let f = |g: &Graph, xs: &[Var]| {
            let e = g.exp(xs[0])?;
            let sg = g.sigmoid(e)?;
            let lg = g.log(sg)?;
            g.mean(lg)
        };
        let g1 = grad(&f, &x).unwrap().flatten();
        let g2 = grad(&f, &x).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn non_finite_intermediate_names_the_operation() {
        let x = pv("x", vec![1000.0]);
        let f = |g: &Graph, xs: &[Var]| {
            let e = g.exp(xs[0])?; // exp(1000) overflows
            g.sum(e)
        };
        match grad(&f, &x) {
            Err(DlfError::NonFinite { op }) => assert_eq!(op, "exp"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_node_is_a_distribution() {
        let g = Graph::new();
        let x = g
            .var(Tensor::from_vec(vec![2, 3], vec![0.0, 1.0, 2.0, -1.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let s = g.softmax_rows(x).unwrap();
        let t = g.value(s);
        for i in 0..2 {
            let sum: f64 = (0..3).map(|j| t.at2(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let g = Graph::new();
        let x = g
            .var(Tensor::from_vec(vec![1, 4], vec![0.3, -2.0, 5.0, 1.0]).unwrap())
            .unwrap();
        let a = g.log_softmax_rows(x).unwrap();
        let s = g.softmax_rows(x).unwrap();
        let b = g.log(s).unwrap();
        let (ta, tb) = (g.value(a), g.value(b));
        for (p, q) in ta.data().iter().zip(tb.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
