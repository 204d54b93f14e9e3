//! Reverse-mode automatic differentiation over dense rank-1/2/3 arrays.
//!
//! Forward values are computed eagerly when an op is recorded; the tape keeps
//! every intermediate so [`Tape::backward`] can walk the nodes once in reverse
//! insertion order. Storage is generic over [`Scalar`] so the same network
//! code can run in `f32` for training and in `f64` for gradient checks.
//! Reductions (sums, means, matmul inner products, softmax normalizers,
//! layer-norm statistics) always accumulate in `f64`.

use std::fmt::Debug;

use num_traits::Float;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LapoError, Result};

/// Floating-point element type a tape can store.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}

/// Dense row-major array. `shape == []` denotes a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> TensorValue<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(LapoError::Invalid(format!(
                "tensors are rank 0..=3, got shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LapoError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `(numel / last_dim, last_dim)`.
    pub fn outer(&self) -> usize {
        self.numel() / self.last_dim().max(1)
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> TensorValue<U> {
        TensorValue {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    First,
    Last,
}

/// Operation recorded on the tape, with its static arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Neg,
    Tanh,
    Gelu,
    Exp,
    Square,
    Sqrt,
    Clamp { lo: f64, hi: f64 },
    Minimum,
    SoftmaxLast,
    LogSoftmaxLast,
    GatherRows(Vec<usize>),
    SelectLast(Vec<usize>),
    LayerNorm { eps: f64 },
    Concat(Axis),
    Reshape(Vec<usize>),
    Sum,
    Mean,
    SumLast,
    Mse,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::Neg => "neg",
            OpKind::Tanh => "tanh",
            OpKind::Gelu => "gelu",
            OpKind::Exp => "exp",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Minimum => "minimum",
            OpKind::SoftmaxLast => "softmax-last-dim",
            OpKind::LogSoftmaxLast => "log-softmax-last-dim",
            OpKind::GatherRows(_) => "gather-rows",
            OpKind::SelectLast(_) => "select-last",
            OpKind::LayerNorm { .. } => "layer-norm",
            OpKind::Concat(_) => "concat",
            OpKind::Reshape(_) => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumLast => "sum-last-dim",
            OpKind::Mse => "mse",
        }
    }
}

#[derive(Debug)]
enum Saved<T> {
    None,
    /// Normalized input and per-row reciprocal std.
    LayerNorm { xhat: Vec<T>, rstd: Vec<f64> },
}

#[derive(Debug)]
struct Node<T> {
    kind: Option<OpKind>,
    operands: Vec<NodeId>,
    value: TensorValue<T>,
    saved: Saved<T>,
    requires_grad: bool,
}

/// Append-only record of eagerly evaluated operations.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`]; missing entries are zero.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> TensorValue<T> {
        match &self.grads[id.0] {
            Some(g) => TensorValue {
                shape: self.shapes[id.0].clone(),
                data: g.clone(),
            },
            None => TensorValue::zeros(&self.shapes[id.0]),
        }
    }

    /// Borrowed gradient data, `None` when the node received no gradient.
    pub fn raw(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    let bn: usize = b.iter().product();
    if a == b || bn == 1 {
        return true;
    }
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `out(m,n) = a(m,k) · b(k,n)` with `f64` accumulation.
fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let b: Vec<f64> = b[..k * n].iter().map(|x| x.f64()).collect();
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let av = av.f64();
            if av == 0.0 {
                continue;
            }
            for (s, &bv) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *s += av * bv;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::of(*s);
        }
    }
}

/// `out(k,n) += a(m,k)^T · g(m,n)`, accumulated in `f64` before the add.
fn mm_tn_acc<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let mut acc = vec![0f64; k * n];
    let mut grow = vec![0f64; n];
    for i in 0..m {
        for (d, x) in grow.iter_mut().zip(&g[i * n..(i + 1) * n]) {
            *d = x.f64();
        }
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let av = av.f64();
            if av == 0.0 {
                continue;
            }
            for (s, &gv) in acc[p * n..(p + 1) * n].iter_mut().zip(&grow) {
                *s += av * gv;
            }
        }
    }
    for (o, s) in out.iter_mut().zip(&acc) {
        *o = *o + T::of(*s);
    }
}

fn transpose2<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// (batch, rows, cols) view of a rank-2 or rank-3 tensor.
fn mat_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [r, c] => Some((1, *r, *c)),
        [b, r, c] => Some((*b, *r, *c)),
        _ => None,
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, so bound parameters
    /// can be reused across independent forward passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Differentiable leaf (parameters, inputs whose gradient is wanted).
    pub fn leaf(&mut self, value: TensorValue<T>) -> NodeId {
        self.push(None, vec![], value, Saved::None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: TensorValue<T>) -> NodeId {
        self.push(None, vec![], value, Saved::None, false)
    }

    pub fn value(&self, id: NodeId) -> &TensorValue<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(
        &mut self,
        kind: Option<OpKind>,
        operands: Vec<NodeId>,
        value: TensorValue<T>,
        saved: Saved<T>,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            kind,
            operands,
            value,
            saved,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &OpKind, a: NodeId, b: NodeId) -> LapoError {
        LapoError::Shape {
            op: op.name(),
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// Records `kind` applied to `operands`, evaluating it immediately.
    pub fn record(&mut self, kind: OpKind, operands: &[NodeId]) -> Result<NodeId> {
        let arity = match &kind {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::Minimum
            | OpKind::Mse => Some(2),
            OpKind::LayerNorm { .. } => Some(3),
            OpKind::Concat(_) => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if operands.len() != n {
                return Err(LapoError::Invalid(format!(
                    "{} expects {n} operands, got {}",
                    kind.name(),
                    operands.len()
                )));
            }
        } else if operands.is_empty() {
            return Err(LapoError::Invalid("concat of zero operands".into()));
        }
        if let Some(bad) = operands.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(LapoError::Invalid(format!("unknown node {}", bad.0)));
        }
        let requires_grad = operands.iter().any(|id| self.nodes[id.0].requires_grad);
        let (value, saved) = self.forward(&kind, operands)?;
        if !value.is_finite() {
            return Err(LapoError::NonFinite { op: kind.name() });
        }
        Ok(self.push(Some(kind), operands.to_vec(), value, saved, requires_grad))
    }

    fn forward(&self, kind: &OpKind, ops: &[NodeId]) -> Result<(TensorValue<T>, Saved<T>)> {
        let v = |i: usize| &self.nodes[ops[i].0].value;
        let unary = |f: &dyn Fn(f64) -> f64| {
            let a = v(0);
            TensorValue {
                shape: a.shape.clone(),
                data: a.data.iter().map(|&x| T::of(f(x.f64()))).collect(),
            }
        };
        let out = match kind {
            OpKind::MatMul => {
                let (a, b) = (v(0), v(1));
                let (Some((ba, m, k)), Some((bb, k2, n))) = (mat_dims(&a.shape), mat_dims(&b.shape))
                else {
                    return Err(self.shape_err(kind, ops[0], ops[1]));
                };
                if k != k2 || ba != bb || a.shape.len() != b.shape.len() {
                    return Err(self.shape_err(kind, ops[0], ops[1]));
                }
                let mut data = vec![T::zero(); ba * m * n];
                for bi in 0..ba {
                    mm_nn(
                        &a.data[bi * m * k..(bi + 1) * m * k],
                        &b.data[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut data[bi * m * n..(bi + 1) * m * n],
                    );
                }
                let mut shape = a.shape.clone();
                *shape.last_mut().unwrap() = n;
                TensorValue { shape, data }
            }
            OpKind::Transpose => {
                let a = v(0);
                let Some((b, r, c)) = mat_dims(&a.shape) else {
                    return Err(self.shape_err(kind, ops[0], ops[0]));
                };
                let mut data = Vec::with_capacity(a.numel());
                for bi in 0..b {
                    data.extend(transpose2(&a.data[bi * r * c..(bi + 1) * r * c], r, c));
                }
                let mut shape = a.shape.clone();
                let l = shape.len();
                shape.swap(l - 1, l - 2);
                TensorValue { shape, data }
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let (a, b) = (v(0), v(1));
                if !broadcast_ok(&a.shape, &b.shape) {
                    return Err(self.shape_err(kind, ops[0], ops[1]));
                }
                let bn = b.numel();
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    OpKind::Mul => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                let data = a
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| T::of(f(x.f64(), b.data[i % bn].f64())))
                    .collect();
                TensorValue {
                    shape: a.shape.clone(),
                    data,
                }
            }
            OpKind::Minimum => {
                let (a, b) = (v(0), v(1));
                if a.shape != b.shape {
                    return Err(self.shape_err(kind, ops[0], ops[1]));
                }
                let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x.min(y)).collect();
                TensorValue {
                    shape: a.shape.clone(),
                    data,
                }
            }
            OpKind::Scale(c) => unary(&|x| x * c),
            OpKind::Neg => unary(&|x| -x),
            OpKind::Tanh => unary(&f64::tanh),
            OpKind::Gelu => unary(&gelu),
            OpKind::Exp => unary(&f64::exp),
            OpKind::Square => unary(&|x| x * x),
            OpKind::Sqrt => {
                if v(0).data.iter().any(|x| *x < T::zero()) {
                    return Err(LapoError::NonFinite { op: "sqrt" });
                }
                unary(&f64::sqrt)
            }
            OpKind::Clamp { lo, hi } => unary(&|x| x.clamp(*lo, *hi)),
            OpKind::SoftmaxLast | OpKind::LogSoftmaxLast => {
                let a = v(0);
                let c = a.last_dim();
                let mut data = vec![T::zero(); a.numel()];
                for (row, out) in a.data.chunks(c).zip(data.chunks_mut(c)) {
                    let mx = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
                    let z: f64 = row.iter().map(|x| (x.f64() - mx).exp()).sum();
                    if matches!(kind, OpKind::SoftmaxLast) {
                        for (o, x) in out.iter_mut().zip(row) {
                            *o = T::of((x.f64() - mx).exp() / z);
                        }
                    } else {
                        let lz = z.ln();
                        for (o, x) in out.iter_mut().zip(row) {
                            *o = T::of(x.f64() - mx - lz);
                        }
                    }
                }
                TensorValue {
                    shape: a.shape.clone(),
                    data,
                }
            }
            OpKind::GatherRows(idx) => {
                let a = v(0);
                if a.shape.is_empty() {
                    return Err(self.shape_err(kind, ops[0], ops[0]));
                }
                let rows = a.shape[0];
                let rs = a.numel() / rows.max(1);
                let mut data = Vec::with_capacity(idx.len() * rs);
                for &i in idx {
                    if i >= rows {
                        return Err(LapoError::Invalid(format!(
                            "gather-rows: index {i} out of range for {rows} rows"
                        )));
                    }
                    data.extend_from_slice(&a.data[i * rs..(i + 1) * rs]);
                }
                let mut shape = a.shape.clone();
                shape[0] = idx.len();
                TensorValue { shape, data }
            }
            OpKind::SelectLast(idx) => {
                let a = v(0);
                let c = a.last_dim();
                if a.shape.is_empty() || a.outer() != idx.len() || idx.iter().any(|&i| i >= c) {
                    return Err(LapoError::Shape {
                        op: kind.name(),
                        left: a.shape.clone(),
                        right: vec![idx.len()],
                    });
                }
                let data = idx.iter().enumerate().map(|(r, &i)| a.data[r * c + i]).collect();
                TensorValue {
                    shape: a.shape[..a.shape.len() - 1].to_vec(),
                    data,
                }
            }
            OpKind::LayerNorm { eps } => {
                let (x, g, b) = (v(0), v(1), v(2));
                let c = x.last_dim();
                if g.shape != [c] || b.shape != [c] {
                    return Err(self.shape_err(kind, ops[0], ops[1]));
                }
                let rows = x.outer();
                let mut xhat = vec![T::zero(); x.numel()];
                let mut rstd = vec![0f64; rows];
                let mut data = vec![T::zero(); x.numel()];
                for r in 0..rows {
                    let row = &x.data[r * c..(r + 1) * c];
                    let mean = row.iter().map(|v| v.f64()).sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / c as f64;
                    let rs = 1.0 / (var + eps).sqrt();
                    rstd[r] = rs;
                    for j in 0..c {
                        let xh = (row[j].f64() - mean) * rs;
                        xhat[r * c + j] = T::of(xh);
                        data[r * c + j] = T::of(xh * g.data[j].f64() + b.data[j].f64());
                    }
                }
                return Ok((
                    TensorValue {
                        shape: x.shape.clone(),
                        data,
                    },
                    Saved::LayerNorm { xhat, rstd },
                ));
            }
            OpKind::Concat(axis) => {
                let first = v(0);
                match axis {
                    Axis::First => {
                        if first.shape.is_empty() {
                            return Err(self.shape_err(kind, ops[0], ops[0]));
                        }
                        let tail = &first.shape[1..];
                        let mut rows = 0;
                        let mut data = Vec::new();
                        for (i, id) in ops.iter().enumerate() {
                            let t = v(i);
                            if t.shape.len() != first.shape.len() || t.shape[1..] != *tail {
                                return Err(self.shape_err(kind, ops[0], *id));
                            }
                            rows += t.shape[0];
                            data.extend_from_slice(&t.data);
                        }
                        let mut shape = first.shape.clone();
                        shape[0] = rows;
                        TensorValue { shape, data }
                    }
                    Axis::Last => {
                        let r = first.outer();
                        let lead = &first.shape[..first.shape.len().saturating_sub(1)];
                        let mut cols = 0;
                        for (i, id) in ops.iter().enumerate() {
                            let t = v(i);
                            if t.shape.is_empty() || t.shape[..t.shape.len() - 1] != *lead {
                                return Err(self.shape_err(kind, ops[0], *id));
                            }
                            cols += t.last_dim();
                        }
                        let mut data = Vec::with_capacity(r * cols);
                        for row in 0..r {
                            for i in 0..ops.len() {
                                data.extend_from_slice(v(i).row(row));
                            }
                        }
                        let mut shape = first.shape.clone();
                        *shape.last_mut().unwrap() = cols;
                        TensorValue { shape, data }
                    }
                }
            }
            OpKind::Reshape(shape) => {
                let a = v(0);
                if shape.iter().product::<usize>() != a.numel() || shape.len() > 3 {
                    return Err(LapoError::Shape {
                        op: kind.name(),
                        left: a.shape.clone(),
                        right: shape.clone(),
                    });
                }
                TensorValue {
                    shape: shape.clone(),
                    data: a.data.clone(),
                }
            }
            OpKind::Sum | OpKind::Mean => {
                let a = v(0);
                let s: f64 = a.data.iter().map(|x| x.f64()).sum();
                let s = if matches!(kind, OpKind::Mean) {
                    s / a.numel().max(1) as f64
                } else {
                    s
                };
                TensorValue::scalar(T::of(s))
            }
            OpKind::SumLast => {
                let a = v(0);
                if a.shape.is_empty() {
                    return Err(self.shape_err(kind, ops[0], ops[0]));
                }
                let c = a.last_dim();
                let data = a
                    .data
                    .chunks(c)
                    .map(|r| T::of(r.iter().map(|x| x.f64()).sum()))
                    .collect();
                TensorValue {
                    shape: a.shape[..a.shape.len() - 1].to_vec(),
                    data,
                }
            }
            OpKind::Mse => {
                let (a, b) = (v(0), v(1));
                if a.shape != b.shape {
                    return Err(self.shape_err(kind, ops[0], ops[1]));
                }
                let s: f64 = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x.f64() - y.f64()).powi(2))
                    .sum();
                TensorValue::scalar(T::of(s / a.numel().max(1) as f64))
            }
        };
        Ok((out, Saved::None))
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(LapoError::NotScalar(lv.shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(kind) = &node.kind else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(kind, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backprop(&self, kind: &OpKind, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let ops = &node.operands;
        let val = |i: usize| &self.nodes[ops[i].0].value;
        let wants = |i: usize| self.nodes[ops[i].0].requires_grad;
        // Adds `f(j)` into the gradient buffer of operand `i`.
        let acc = |grads: &mut [Option<Vec<T>>], i: usize, contrib: &dyn Fn(&mut [T])| {
            let id = ops[i].0;
            if !self.nodes[id].requires_grad {
                return;
            }
            let buf = grads[id].get_or_insert_with(|| vec![T::zero(); self.nodes[id].value.numel()]);
            contrib(buf);
        };
        match kind {
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (batch, m, k) = mat_dims(&a.shape).unwrap();
                let n = b.last_dim();
                if wants(0) {
                    acc(grads, 0, &|buf| {
                        for bi in 0..batch {
                            let bt = transpose2(&b.data[bi * k * n..(bi + 1) * k * n], k, n);
                            let mut tmp = vec![T::zero(); m * k];
                            mm_nn(&g[bi * m * n..(bi + 1) * m * n], &bt, m, n, k, &mut tmp);
                            for (o, t) in buf[bi * m * k..(bi + 1) * m * k].iter_mut().zip(&tmp) {
                                *o = *o + *t;
                            }
                        }
                    });
                }
                if wants(1) {
                    acc(grads, 1, &|buf| {
                        for bi in 0..batch {
                            mm_tn_acc(
                                &a.data[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut buf[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    });
                }
            }
            OpKind::Transpose => {
                let (b, r, c) = mat_dims(&node.value.shape).unwrap();
                acc(grads, 0, &|buf| {
                    for bi in 0..b {
                        let t = transpose2(&g[bi * r * c..(bi + 1) * r * c], r, c);
                        for (o, x) in buf[bi * r * c..(bi + 1) * r * c].iter_mut().zip(t) {
                            *o = *o + x;
                        }
                    }
                });
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let (a, b) = (val(0), val(1));
                let bn = b.numel();
                acc(grads, 0, &|buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        let gi = g[i].f64();
                        let d = match kind {
                            OpKind::Add | OpKind::Sub => gi,
                            OpKind::Mul => gi * b.data[i % bn].f64(),
                            _ => gi / b.data[i % bn].f64(),
                        };
                        *o = *o + T::of(d);
                    }
                });
                acc(grads, 1, &|buf| {
                    let mut sums = vec![0f64; bn];
                    for (i, gi) in g.iter().enumerate() {
                        let gi = gi.f64();
                        let d = match kind {
                            OpKind::Add => gi,
                            OpKind::Sub => -gi,
                            OpKind::Mul => gi * a.data[i].f64(),
                            _ => {
                                let y = b.data[i % bn].f64();
                                -gi * a.data[i].f64() / (y * y)
                            }
                        };
                        sums[i % bn] += d;
                    }
                    for (o, s) in buf.iter_mut().zip(sums) {
                        *o = *o + T::of(s);
                    }
                });
            }
            OpKind::Minimum => {
                let (a, b) = (val(0), val(1));
                // Ties route the gradient to the first operand.
                acc(grads, 0, &|buf| {
                    for i in 0..buf.len() {
                        if a.data[i] <= b.data[i] {
                            buf[i] = buf[i] + g[i];
                        }
                    }
                });
                acc(grads, 1, &|buf| {
                    for i in 0..buf.len() {
                        if a.data[i] > b.data[i] {
                            buf[i] = buf[i] + g[i];
                        }
                    }
                });
            }
            OpKind::Scale(_)
            | OpKind::Neg
            | OpKind::Tanh
            | OpKind::Gelu
            | OpKind::Exp
            | OpKind::Square
            | OpKind::Sqrt
            | OpKind::Clamp { .. } => {
                let x = val(0);
                let y = &node.value;
                acc(grads, 0, &|buf| {
                    for i in 0..buf.len() {
                        let xi = x.data[i].f64();
                        let yi = y.data[i].f64();
                        let d = match kind {
                            OpKind::Scale(c) => *c,
                            OpKind::Neg => -1.0,
                            OpKind::Tanh => 1.0 - yi * yi,
                            OpKind::Gelu => gelu_grad(xi),
                            OpKind::Exp => yi,
                            OpKind::Square => 2.0 * xi,
                            OpKind::Sqrt => {
                                if yi > 0.0 {
                                    0.5 / yi
                                } else {
                                    0.0
                                }
                            }
                            OpKind::Clamp { lo, hi } => {
                                if xi >= *lo && xi <= *hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            _ => unreachable!(),
                        };
                        buf[i] = buf[i] + T::of(g[i].f64() * d);
                    }
                });
            }
            OpKind::SoftmaxLast => {
                let y = &node.value;
                let c = y.last_dim();
                acc(grads, 0, &|buf| {
                    for r in 0..y.outer() {
                        let yr = &y.data[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                        for j in 0..c {
                            let d = yr[j].f64() * (gr[j].f64() - dot);
                            buf[r * c + j] = buf[r * c + j] + T::of(d);
                        }
                    }
                });
            }
            OpKind::LogSoftmaxLast => {
                let y = &node.value;
                let c = y.last_dim();
                acc(grads, 0, &|buf| {
                    for r in 0..y.outer() {
                        let yr = &y.data[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let gs: f64 = gr.iter().map(|x| x.f64()).sum();
                        for j in 0..c {
                            let d = gr[j].f64() - yr[j].f64().exp() * gs;
                            buf[r * c + j] = buf[r * c + j] + T::of(d);
                        }
                    }
                });
            }
            OpKind::GatherRows(idx) => {
                let rs = node.value.numel() / idx.len().max(1);
                acc(grads, 0, &|buf| {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..rs {
                            buf[i * rs + j] = buf[i * rs + j] + g[k * rs + j];
                        }
                    }
                });
            }
            OpKind::SelectLast(idx) => {
                let c = val(0).last_dim();
                acc(grads, 0, &|buf| {
                    for (r, &i) in idx.iter().enumerate() {
                        buf[r * c + i] = buf[r * c + i] + g[r];
                    }
                });
            }
            OpKind::LayerNorm { .. } => {
                let Saved::LayerNorm { xhat, rstd } = &node.saved else {
                    unreachable!()
                };
                let gain = val(1);
                let c = gain.numel();
                let rows = rstd.len();
                acc(grads, 0, &|buf| {
                    let mut dxh = vec![0f64; c];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxh[j] = g[r * c + j].f64() * gain.data[j].f64();
                            m1 += dxh[j];
                            m2 += dxh[j] * xhat[r * c + j].f64();
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let d = rstd[r] * (dxh[j] - m1 - xhat[r * c + j].f64() * m2);
                            buf[r * c + j] = buf[r * c + j] + T::of(d);
                        }
                    }
                });
                acc(grads, 1, &|buf| {
                    let mut s = vec![0f64; c];
                    for r in 0..rows {
                        for j in 0..c {
                            s[j] += g[r * c + j].f64() * xhat[r * c + j].f64();
                        }
                    }
                    for (o, v) in buf.iter_mut().zip(s) {
                        *o = *o + T::of(v);
                    }
                });
                acc(grads, 2, &|buf| {
                    let mut s = vec![0f64; c];
                    for r in 0..rows {
                        for j in 0..c {
                            s[j] += g[r * c + j].f64();
                        }
                    }
                    for (o, v) in buf.iter_mut().zip(s) {
                        *o = *o + T::of(v);
                    }
                });
            }
            OpKind::Concat(axis) => match axis {
                Axis::First => {
                    let mut off = 0;
                    for i in 0..ops.len() {
                        let len = val(i).numel();
                        acc(grads, i, &|buf| {
                            for (o, x) in buf.iter_mut().zip(&g[off..off + len]) {
                                *o = *o + *x;
                            }
                        });
                        off += len;
                    }
                }
                Axis::Last => {
                    let total = node.value.last_dim();
                    let rows = node.value.outer();
                    let mut col = 0;
                    for i in 0..ops.len() {
                        let c = val(i).last_dim();
                        acc(grads, i, &|buf| {
                            for r in 0..rows {
                                for j in 0..c {
                                    buf[r * c + j] = buf[r * c + j] + g[r * total + col + j];
                                }
                            }
                        });
                        col += c;
                    }
                }
            },
            OpKind::Reshape(_) => {
                acc(grads, 0, &|buf| {
                    for (o, x) in buf.iter_mut().zip(g) {
                        *o = *o + *x;
                    }
                });
            }
            OpKind::Sum | OpKind::Mean => {
                let n = val(0).numel();
                let s = if matches!(kind, OpKind::Mean) {
                    g[0].f64() / n.max(1) as f64
                } else {
                    g[0].f64()
                };
                acc(grads, 0, &|buf| {
                    for o in buf.iter_mut() {
                        *o = *o + T::of(s);
                    }
                });
            }
            OpKind::SumLast => {
                let c = val(0).last_dim();
                acc(grads, 0, &|buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o = *o + g[i / c];
                    }
                });
            }
            OpKind::Mse => {
                let (a, b) = (val(0), val(1));
                let s = 2.0 * g[0].f64() / a.numel().max(1) as f64;
                acc(grads, 0, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + T::of(s * (a.data[i].f64() - b.data[i].f64()));
                    }
                });
                acc(grads, 1, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] - T::of(s * (a.data[i].f64() - b.data[i].f64()));
                    }
                });
            }
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Transpose, &[a])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Div, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(OpKind::Scale(c), &[a])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Neg, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Tanh, &[a])
    }
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Gelu, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Exp, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Square, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sqrt, &[a])
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.record(OpKind::Clamp { lo, hi }, &[a])
    }
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Minimum, &[a, b])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::SoftmaxLast, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::LogSoftmaxLast, &[a])
    }
    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        self.record(OpKind::GatherRows(idx), &[a])
    }
    pub fn select_last(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        self.record(OpKind::SelectLast(idx), &[a])
    }
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(OpKind::LayerNorm { eps: 1e-5 }, &[x, gain, bias])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.record(OpKind::Concat(axis), parts)
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(OpKind::Reshape(shape.to_vec()), &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mean, &[a])
    }
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::SumLast, &[a])
    }
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mse, &[a, b])
    }
    pub fn scalar_const(&mut self, x: f64) -> NodeId {
        self.constant(TensorValue::scalar(T::of(x)))
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `f` maps a flat parameter vector to `(value, analytic gradient)`. Returns
/// the maximum over `coords` of `|analytic - numeric| / max(1e-8, |numeric|)`.
/// `f` is called twice at `params` first; any bitwise disagreement is a
/// [`LapoError::NonDeterministic`] error.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], h: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if h <= 0.0 {
        return Err(LapoError::Invalid(format!("step h must be > 0, got {h}")));
    }
    let (v0, g0) = f(params)?;
    let (v1, g1) = f(params)?;
    let same = v0.to_bits() == v1.to_bits()
        && g0.len() == g1.len()
        && g0.iter().zip(&g1).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(LapoError::NonDeterministic);
    }
    if g0.len() != params.len() {
        return Err(LapoError::Invalid(format!(
            "gradient has {} entries for {} parameters",
            g0.len(),
            params.len()
        )));
    }
    let mut p = params.to_vec();
    let mut worst = 0f64;
    for &c in coords {
        let orig = p[c];
        p[c] = orig + h;
        let (fp, _) = f(&p)?;
        p[c] = orig - h;
        let (fm, _) = f(&p)?;
        p[c] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (g0[c] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// `count` distinct coordinates out of `n`, reproducible from `seed`.
pub fn sample_coords(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, n, count.min(n)).into_vec();
    v.sort_unstable();
    v
}
