use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

type Index = Rc<[usize]>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Conv { x: usize, k: usize, geom: ConvGeom },
    ConvInputGrad { gy: usize, k: usize, geom: ConvGeom },
    ConvKernelGrad { x: usize, gy: usize, geom: ConvGeom },
    Gather { x: usize, index: Index },
    ScatterAdd { x: usize, index: Index },
    Reshape(usize),
    AxisMap { x: usize, axis: usize, mat: Rc<Tensor> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Scale(a, _) | Offset(a) | Exp(a) | Log(a) | Tanh(a) | Sigmoid(a) | Sqrt(a)
            | Relu(a) | Clamp(a, _, _) | Transpose(a) | Reshape(a) => vec![a],
            Conv { x, k, .. } => vec![x, k],
            ConvInputGrad { gy, k, .. } => vec![gy, k],
            ConvKernelGrad { x, gy, .. } => vec![x, gy],
            Gather { x, .. } | ScatterAdd { x, .. } | AxisMap { x, .. } => vec![x],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Append-only record of evaluated operations.
///
/// Adjoints are built from the same primitives, so the output of
/// [`Tape::grad`] can be differentiated again.
#[derive(Clone, Default)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn var(&self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push_raw(&self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn push(&self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let inner = self.0.borrow();
            op.inputs().iter().any(|&i| inner.nodes[i].requires_grad)
        };
        Ok(self.push_raw(op, value, requires_grad))
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn check(&self, v: &Var) -> Result<()> {
        if self.same(&v.tape) {
            Ok(())
        } else {
            Err(Error::ForeignTape)
        }
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.0.borrow().nodes[id].value)
    }

    fn with_values2<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let inner = self.0.borrow();
        f(&inner.nodes[a].value, &inner.nodes[b].value)
    }

    fn var_of(&self, id: usize) -> Var {
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// The returned values are recorded on this tape, so they can take part
    /// in further differentiable computation. Targets that `loss` does not
    /// depend on get zero gradients.
    pub fn grad(&self, loss: &Var, wrt: &[&Var]) -> Result<Vec<Var>> {
        self.check(loss)?;
        for w in wrt {
            self.check(w)?;
        }
        if loss.len() != 1 {
            return Err(Error::shape(
                "grad",
                format!("loss must be a scalar, got {:?}", loss.shape()),
            ));
        }
        let end = loss.id + 1;
        // Nodes that lie on a path to one of the targets.
        let mut needed = vec![false; end];
        {
            let inner = self.0.borrow();
            for w in wrt {
                if w.id < end {
                    needed[w.id] = true;
                }
            }
            for id in 0..end {
                let node = &inner.nodes[id];
                if !needed[id] && node.requires_grad {
                    needed[id] = node.op.inputs().iter().any(|&i| needed[i]);
                }
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        adjoint[loss.id] = Some(self.constant(Tensor::full(&loss.shape(), 1.0)));
        let mut results: Vec<Option<Var>> = vec![None; wrt.len()];

        for id in (0..end).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            for (slot, w) in results.iter_mut().zip(wrt) {
                if w.id == id {
                    *slot = Some(g.clone());
                }
            }
            let op = self.0.borrow().nodes[id].op.clone();
            for (input, contrib) in self.vjp(&op, id, &g, &needed)? {
                adjoint[input] = Some(match adjoint[input].take() {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
        }

        Ok(results
            .into_iter()
            .zip(wrt)
            .map(|(r, w)| r.unwrap_or_else(|| self.constant(Tensor::zeros(&w.shape()))))
            .collect())
    }

    /// Vector-Jacobian products for the inputs of node `id` that need them.
    fn vjp(&self, op: &Op, id: usize, g: &Var, needed: &[bool]) -> Result<Vec<(usize, Var)>> {
        use Op::*;
        let y = self.var_of(id);
        let v = |i: usize| self.var_of(i);
        let mut out = Vec::new();
        let want = |i: usize| needed[i];
        match op {
            Leaf => {}
            Add(a, b) => {
                if want(*a) {
                    out.push((*a, g.clone()));
                }
                if want(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Sub(a, b) => {
                if want(*a) {
                    out.push((*a, g.clone()));
                }
                if want(*b) {
                    out.push((*b, g.scale(-1.0)?));
                }
            }
            Mul(a, b) => {
                if want(*a) {
                    out.push((*a, g.mul(&v(*b))?));
                }
                if want(*b) {
                    out.push((*b, g.mul(&v(*a))?));
                }
            }
            Div(a, b) => {
                let gb = g.div(&v(*b))?;
                if want(*b) {
                    out.push((*b, gb.mul(&y)?.scale(-1.0)?));
                }
                if want(*a) {
                    out.push((*a, gb));
                }
            }
            Scale(a, c) => {
                if want(*a) {
                    out.push((*a, g.scale(*c)?));
                }
            }
            Offset(a) => {
                if want(*a) {
                    out.push((*a, g.clone()));
                }
            }
            Exp(a) => {
                if want(*a) {
                    out.push((*a, g.mul(&y)?));
                }
            }
            Log(a) => {
                if want(*a) {
                    out.push((*a, g.div(&v(*a))?));
                }
            }
            Tanh(a) => {
                if want(*a) {
                    let d = y.mul(&y)?.scale(-1.0)?.offset(1.0)?;
                    out.push((*a, g.mul(&d)?));
                }
            }
            Sigmoid(a) => {
                if want(*a) {
                    let d = y.mul(&y.scale(-1.0)?.offset(1.0)?)?;
                    out.push((*a, g.mul(&d)?));
                }
            }
            Sqrt(a) => {
                if want(*a) {
                    out.push((*a, g.div(&y)?.scale(0.5)?));
                }
            }
            Relu(a) => {
                if want(*a) {
                    let mask = self.with_value(*a, |x| x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                    out.push((*a, g.mul(&self.constant(mask))?));
                }
            }
            Clamp(a, lo, hi) => {
                if want(*a) {
                    let (lo, hi) = (*lo, *hi);
                    let mask = self.with_value(*a, |x| {
                        x.map(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 })
                    });
                    out.push((*a, g.mul(&self.constant(mask))?));
                }
            }
            MatMul(a, b) => {
                if want(*a) {
                    out.push((*a, g.matmul(&v(*b).transpose()?)?));
                }
                if want(*b) {
                    out.push((*b, v(*a).transpose()?.matmul(g)?));
                }
            }
            Transpose(a) => {
                if want(*a) {
                    out.push((*a, g.transpose()?));
                }
            }
            Conv { x, k, geom } => {
                if want(*x) {
                    out.push((*x, self.conv_input_grad(g, &v(*k), *geom)?));
                }
                if want(*k) {
                    out.push((*k, self.conv_kernel_grad(&v(*x), g, *geom)?));
                }
            }
            ConvInputGrad { gy, k, geom } => {
                if want(*gy) {
                    out.push((*gy, self.conv_raw(g, &v(*k), *geom)?));
                }
                if want(*k) {
                    out.push((*k, self.conv_kernel_grad(g, &v(*gy), *geom)?));
                }
            }
            ConvKernelGrad { x, gy, geom } => {
                if want(*x) {
                    out.push((*x, self.conv_input_grad(&v(*gy), g, *geom)?));
                }
                if want(*gy) {
                    out.push((*gy, self.conv_raw(&v(*x), g, *geom)?));
                }
            }
            Gather { x, index } => {
                if want(*x) {
                    let shape = v(*x).shape();
                    out.push((*x, g.scatter_add_rc(index.clone(), &shape)?));
                }
            }
            ScatterAdd { x, index } => {
                if want(*x) {
                    let shape = v(*x).shape();
                    out.push((*x, g.gather_rc(index.clone(), &shape)?));
                }
            }
            Reshape(a) => {
                if want(*a) {
                    out.push((*a, g.reshape(&v(*a).shape())?));
                }
            }
            AxisMap { x, axis, mat } => {
                if want(*x) {
                    let (r, c) = (mat.shape()[0], mat.shape()[1]);
                    let t = Tensor::new(vec![c, r], kernels::transpose(mat.data(), r, c))?;
                    out.push((*x, g.axis_map_rc(*axis, Rc::new(t))?));
                }
            }
        }
        Ok(out)
    }

    fn conv_raw(&self, x: &Var, k: &Var, geom: ConvGeom) -> Result<Var> {
        let data = self.with_values2(x.id, k.id, |xv, kv| kernels::conv2d(&geom, xv.data(), kv.data()));
        let t = Tensor::new(geom.output_shape(), data)?;
        self.push(Op::Conv { x: x.id, k: k.id, geom }, t, "conv2d")
    }

    fn conv_input_grad(&self, gy: &Var, k: &Var, geom: ConvGeom) -> Result<Var> {
        let data = self.with_values2(gy.id, k.id, |gv, kv| {
            kernels::conv2d_input_grad(&geom, gv.data(), kv.data())
        });
        let t = Tensor::new(geom.input_shape(), data)?;
        self.push(Op::ConvInputGrad { gy: gy.id, k: k.id, geom }, t, "conv2d_input_grad")
    }

    fn conv_kernel_grad(&self, x: &Var, gy: &Var, geom: ConvGeom) -> Result<Var> {
        let data = self.with_values2(x.id, gy.id, |xv, gv| {
            kernels::conv2d_kernel_grad(&geom, xv.data(), gv.data())
        });
        let t = Tensor::new(geom.kernel_shape(), data)?;
        self.push(Op::ConvKernelGrad { x: x.id, gy: gy.id, geom }, t, "conv2d_kernel_grad")
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn len(&self) -> usize {
        self.tape.with_value(self.id, Tensor::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.0.borrow().nodes[self.id].requires_grad
    }

    /// Copy of the value as a fresh constant on the same tape.
    pub fn detach(&self) -> Var {
        self.tape.constant(self.value())
    }

    fn unary(&self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.tape.with_value(self.id, |x| x.map(f));
        self.tape.push(op, t, name)
    }

    fn binary(
        &self,
        other: &Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.tape.check(other)?;
        let t = self.tape.with_values2(self.id, other.id, |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)
        })?;
        self.tape.push(op, t, name)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Div(self.id, other.id), "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.unary(Op::Scale(self.id, c), "scale", |v| v * c)
    }

    /// Adds a constant to every entry.
    pub fn offset(&self, c: f64) -> Result<Var> {
        self.unary(Op::Offset(self.id), "offset", |v| v + c)
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(Op::Exp(self.id), "exp", f64::exp)
    }

    pub fn ln(&self) -> Result<Var> {
        self.unary(Op::Log(self.id), "log", f64::ln)
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(Op::Tanh(self.id), "tanh", f64::tanh)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(Op::Sigmoid(self.id), "sigmoid", |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn sqrt(&self) -> Result<Var> {
        self.unary(Op::Sqrt(self.id), "sqrt", f64::sqrt)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&self) -> Result<Var> {
        self.unary(Op::Relu(self.id), "relu", |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Op::Clamp(self.id, lo, hi), "clamp", |v| v.clamp(lo, hi))
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.tape.check(other)?;
        let t = self.tape.with_values2(self.id, other.id, |a, b| {
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
            let data = kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]);
            Tensor::new(vec![sa[0], sb[1]], data)
        })?;
        self.tape.push(Op::MatMul(self.id, other.id), t, "matmul")
    }

    pub fn transpose(&self) -> Result<Var> {
        let t = self.tape.with_value(self.id, |a| {
            let s = a.shape();
            if s.len() != 2 {
                return Err(Error::shape("transpose", format!("{s:?}")));
            }
            Tensor::new(vec![s[1], s[0]], kernels::transpose(a.data(), s[0], s[1]))
        })?;
        self.tape.push(Op::Transpose(self.id), t, "transpose")
    }

    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(&self, kernel: &Var, stride: usize, padding: usize) -> Result<Var> {
        self.tape.check(kernel)?;
        let geom = ConvGeom::new(&self.shape(), &kernel.shape(), stride, padding)
            .map_err(|d| Error::shape("conv2d", d))?;
        self.tape.conv_raw(self, kernel, geom)
    }

    /// `out[j] = x[index[j]]`, reshaped to `shape`.
    pub fn gather(&self, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        self.gather_rc(index.into(), shape)
    }

    fn gather_rc(&self, index: Index, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for shape {shape:?}", index.len()),
            ));
        }
        let t = self.tape.with_value(self.id, |x| {
            let src = x.data();
            if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
                return Err(Error::shape("gather", format!("index {bad} of {}", src.len())));
            }
            Tensor::new(shape.to_vec(), index.iter().map(|&i| src[i]).collect())
        })?;
        self.tape.push(Op::Gather { x: self.id, index }, t, "gather")
    }

    /// `out[index[j]] += x[j]` into a zero tensor of `shape`.
    pub fn scatter_add(&self, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        self.scatter_add_rc(index.into(), shape)
    }

    fn scatter_add_rc(&self, index: Index, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let t = self.tape.with_value(self.id, |x| {
            if x.len() != index.len() {
                return Err(Error::shape(
                    "scatter_add",
                    format!("{} indices for {} values", index.len(), x.len()),
                ));
            }
            let mut out = vec![0.0; n];
            for (&i, &v) in index.iter().zip(x.data()) {
                if i >= n {
                    return Err(Error::shape("scatter_add", format!("index {i} of {n}")));
                }
                out[i] += v;
            }
            Tensor::new(shape.to_vec(), out)
        })?;
        self.tape.push(Op::ScatterAdd { x: self.id, index }, t, "scatter_add")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let t = self.value().reshape(shape)?;
        self.tape.push(Op::Reshape(self.id), t, "reshape")
    }

    /// Apply the `[rows, cols]` matrix `mat` along `axis`.
    pub fn axis_map(&self, axis: usize, mat: Tensor) -> Result<Var> {
        self.axis_map_rc(axis, Rc::new(mat))
    }

    fn axis_map_rc(&self, axis: usize, mat: Rc<Tensor>) -> Result<Var> {
        let t = self.tape.with_value(self.id, |x| {
            let s = x.shape();
            let ms = mat.shape();
            if axis >= s.len() || ms.len() != 2 || ms[1] != s[axis] {
                return Err(Error::shape(
                    "axis_map",
                    format!("matrix {ms:?} along axis {axis} of {s:?}"),
                ));
            }
            let (shape, data) = kernels::axis_map(x.data(), s, axis, mat.data(), ms[0]);
            Tensor::new(shape, data)
        })?;
        self.tape.push(Op::AxisMap { x: self.id, axis, mat }, t, "axis_map")
    }

    // Composite helpers built from the primitives above.

    pub fn sum(&self) -> Result<Var> {
        self.scatter_add(vec![0; self.len()], &[])
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn dot(&self, other: &Var) -> Result<Var> {
        self.mul(other)?.sum()
    }

    /// Repeat a scalar to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Var> {
        if self.len() != 1 {
            return Err(Error::shape("broadcast_scalar", format!("{:?}", self.shape())));
        }
        let n: usize = shape.iter().product();
        self.gather(vec![0; n], shape)
    }

    /// Sum over the last axis of a `[rows, cols]` matrix, giving `[rows]`.
    pub fn sum_rows(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("sum_rows", format!("{s:?}")));
        }
        let cols = s[1];
        self.scatter_add((0..s[0] * cols).map(|j| j / cols).collect(), &[s[0]])
    }

    /// Repeat a `[rows]` vector across `cols` columns.
    pub fn repeat_cols(&self, cols: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::shape("repeat_cols", format!("{s:?}")));
        }
        self.gather((0..s[0] * cols).map(|j| j / cols).collect(), &[s[0], cols])
    }

    /// Add a per-channel bias `[c]` to an NCHW (or `[n, c]`) tensor.
    pub fn add_channel_bias(&self, bias: &Var) -> Result<Var> {
        let s = self.shape();
        let c = bias.len();
        if s.len() < 2 || s[1] != c {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias of {c} for {s:?}"),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let total: usize = s.iter().product();
        let idx = (0..total).map(|j| (j / inner) % c).collect();
        self.add(&bias.gather(idx, &s)?)
    }

    /// Leading-axis slice `start..end` of a tensor.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Var> {
        let s = self.shape();
        if s.is_empty() || start >= end || end > s[0] {
            return Err(Error::shape("slice_outer", format!("{start}..{end} of {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let mut shape = s.clone();
        shape[0] = end - start;
        self.gather((start * inner..end * inner).collect(), &shape)
    }

    /// Columns `start..end` of a `[rows, cols]` matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {s:?}")));
        }
        let w = end - start;
        let idx = (0..s[0] * w).map(|j| (j / w) * s[1] + start + j % w).collect();
        self.gather(idx, &[s[0], w])
    }
}
