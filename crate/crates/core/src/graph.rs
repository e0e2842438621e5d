//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Graph`]; node ids are handed out in
//! creation order, so the tape is already topologically sorted and backward is
//! a single reverse sweep. Nodes whose inputs do not require gradients are
//! skipped entirely during the sweep.

use crate::error::{Error, Result};
use crate::tensor::{numel, split_axis, strides, Tensor};

/// Epsilon under the variance square root in [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
    Exp,
    Log,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(UnaryKind, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    L2Norm { x: Var, axis: usize },
    CosineSim { a: Var, b: Var, axis: usize, norms: Vec<(f64, f64)> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    TemporalConv { x: Var, kernel: Var, bias: Var },
}

/// Op kinds as exposed for inspection; mirrors the private op record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
    Exp,
    Log,
    Square,
    MatMul,
    BatchMatMul,
    Permute,
    Reshape,
    BroadcastTo,
    Concat,
    Narrow,
    IndexSelect,
    Softmax,
    LogSoftmax,
    LayerNorm,
    SumAll,
    SumAxis,
    L2Norm,
    CosineSim,
    CrossEntropy,
    TemporalConv,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

/// NumPy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visits every output offset together with the matching input offsets.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×k] += g[m×n] · bᵀ where b is k×n.
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// c[k×n] += aᵀ · g where a is m×k and g is m×n.
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Sum in ascending order so that the result does not depend on the order
/// in which the terms were laid out.
fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        match &self.nodes[v.0].op {
            Op::Leaf => OpKind::Leaf,
            Op::Binary(BinaryKind::Add, ..) => OpKind::Add,
            Op::Binary(BinaryKind::Sub, ..) => OpKind::Sub,
            Op::Binary(BinaryKind::Mul, ..) => OpKind::Mul,
            Op::Binary(BinaryKind::Div, ..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Unary(k, _) => match k {
                UnaryKind::Sigmoid => OpKind::Sigmoid,
                UnaryKind::Tanh => OpKind::Tanh,
                UnaryKind::Relu => OpKind::Relu,
                UnaryKind::Gelu => OpKind::Gelu,
                UnaryKind::Exp => OpKind::Exp,
                UnaryKind::Log => OpKind::Log,
                UnaryKind::Square => OpKind::Square,
            },
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul(..) => OpKind::BatchMatMul,
            Op::Permute(..) => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::BroadcastTo(..) => OpKind::BroadcastTo,
            Op::Concat(..) => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::IndexSelect { .. } => OpKind::IndexSelect,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SumAll(..) => OpKind::SumAll,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::L2Norm { .. } => OpKind::L2Norm,
            Op::CosineSim { .. } => OpKind::CosineSim,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::TemporalConv { .. } => OpKind::TemporalConv,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Leaves with `requires_grad` receive a gradient on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(
                match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                    BinaryKind::Div => "div",
                },
                &sa,
                &sb,
            )
        })?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; numel(&out_shape)];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            let (x, y) = (da[ia], db[ib]);
            out[o] = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
        });
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Sigmoid => |v| 1.0 / (1.0 + (-v).exp()),
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Gelu => gelu,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Square => |v| v * v,
        };
        let out = self.value(x).map(f);
        self.push(out, Op::Unary(kind, x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    /// Gaussian-error linear unit (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("log of non-positive value".into()));
        }
        Ok(self.unary(UnaryKind::Log, x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    // ---- linear algebra ------------------------------------------------

    /// `a[..., m, k] · b[k, n]`, with `b` shared across all leading dims of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = numel(&sa) / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, rows, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    /// Batched `a[B.., m, k] · b[B.., k, n]` with identical batch dims.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm_nn(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::BatchMatMul(a, b), &[a, b]))
    }

    // ---- layout --------------------------------------------------------

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        permute_visit(&out_shape, &src_strides, |o, i| out[o] = data[i]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn transpose(&mut self, x: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        check_axis("transpose", self.shape(x), d0.max(d1))?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if broadcast_shape(&sx, shape).as_deref() != Some(shape) {
            return Err(Error::shape("broadcast_to", &sx, shape));
        }
        let data = self.value(x).data();
        let mut out = vec![0.0; numel(shape)];
        for_each_broadcast(shape, &sx, shape, |o, i, _| out[o] = data[i]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::BroadcastTo(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = vec![0.0; numel(&out_shape)];
        let mut offset = 0;
        for &v in xs {
            let len = self.shape(v)[axis];
            let data = self.value(v).data();
            for o in 0..outer {
                let src = &data[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * total + offset) * inner;
                out[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&data[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow { x, axis, start },
            &[x],
        ))
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("index_select", &shape, axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::Contract(format!("index {bad} out of range for axis {axis} of {shape:?}")));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * full + i) * inner;
                out.extend_from_slice(&data[s..s + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    // ---- normalisation -------------------------------------------------

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    out[at(j)] = e;
                    buf[j] = e;
                }
                let z = canonical_sum(&mut buf);
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("log_softmax", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = (data[at(j)] - max).exp();
                }
                let lse = max + canonical_sum(&mut buf).ln();
                for j in 0..len {
                    out[at(j)] = data[at(j)] - lse;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalises over the last axis to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::EmptyDim("layer_norm"))?;
        if d == 0 {
            return Err(Error::EmptyDim("layer_norm"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let rows = numel(&shape) / d;
        let (data, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; data.len()];
        let mut xhat = vec![0.0; data.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &data[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("mean_axis", self.shape(x), axis)?;
        let len = self.shape(x)[axis];
        if len == 0 {
            return Err(Error::EmptyDim("mean_axis"));
        }
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Euclidean norm along `axis` (axis dropped). The gradient at a zero
    /// vector is taken to be zero.
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("l2_norm", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let ss: f64 = (0..len).map(|j| data[(o * len + j) * inner + i].powi(2)).sum();
                out[o * inner + i] = ss.sqrt();
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::L2Norm { x, axis }, &[x]))
    }

    /// Cosine similarity of equal-shape `a` and `b` along `axis` (axis dropped).
    pub fn cosine_similarity(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if self.shape(b) != shape.as_slice() {
            return Err(Error::shape("cosine_similarity", &shape, self.shape(b)));
        }
        check_axis("cosine_similarity", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; outer * inner];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for j in 0..len {
                    let k = (o * len + j) * inner + i;
                    dot += da[k] * db[k];
                    na += da[k] * da[k];
                    nb += db[k] * db[k];
                }
                let (na, nb) = (na.sqrt(), nb.sqrt());
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
                }
                out[o * inner + i] = dot / (na * nb);
                norms.push((na, nb));
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::CosineSim { a, b, axis, norms },
            &[a, b],
        ))
    }

    /// Mean cross-entropy of `logits[B, K]` (or `[K]`) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, k) = match shape.as_slice() {
            [k] => (1, *k),
            [b, k] => (*b, *k),
            _ => return Err(Error::shape("cross_entropy", &shape, &[labels.len()])),
        };
        if labels.len() != rows || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &data[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Residual depthwise temporal convolution over `x[T, P, D]`:
    /// `out[t] = x[t] + k0 ⊙ x[t-1] + k1 ⊙ x[t] + k2 ⊙ x[t+1] + bias`,
    /// zero-padded at both ends of the time axis.
    pub fn temporal_conv(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("temporal_conv", &shape, self.shape(kernel)));
        }
        let (t_len, p, d) = (shape[0], shape[1], shape[2]);
        if self.shape(kernel) != [3, d] || self.shape(bias) != [d] {
            return Err(Error::shape("temporal_conv", &shape, self.shape(kernel)));
        }
        let (data, k, b) = (self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        let frame = p * d;
        let mut out = data.to_vec();
        for t in 0..t_len {
            for j in 0..frame {
                let c = j % d;
                let mut acc = k[d + c] * data[t * frame + j] + b[c];
                if t > 0 {
                    acc += k[c] * data[(t - 1) * frame + j];
                }
                if t + 1 < t_len {
                    acc += k[2 * d + c] * data[(t + 1) * frame + j];
                }
                out[t * frame + j] += acc;
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::TemporalConv { x, kernel, bias },
            &[x, kernel, bias],
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `root`. Afterwards every leaf created with
    /// `requires_grad` holds a gradient (zeros if it did not reach `root`).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if !self.nodes[v.0].requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.numel()]);
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let oshape = node.value.shape();
                if let Some(ia) = acc(*a, grads) {
                    let ga = grads[ia].as_mut().unwrap();
                    for_each_broadcast(oshape, sa, sb, |o, i, j| {
                        ga[i] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[o],
                            BinaryKind::Mul => g[o] * db[j],
                            BinaryKind::Div => g[o] / db[j],
                        };
                    });
                }
                if let Some(ib) = acc(*b, grads) {
                    let gb = grads[ib].as_mut().unwrap();
                    for_each_broadcast(oshape, sa, sb, |o, i, j| {
                        gb[j] += match kind {
                            BinaryKind::Add => g[o],
                            BinaryKind::Sub => -g[o],
                            BinaryKind::Mul => g[o] * da[i],
                            BinaryKind::Div => -g[o] * da[i] / (db[j] * db[j]),
                        };
                    });
                }
            }
            Op::Scale(x, c) => {
                if let Some(ix) = acc(*x, grads) {
                    for (gx, gv) in grads[ix].as_mut().unwrap().iter_mut().zip(g) {
                        *gx += gv * c;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(ix) = acc(*x, grads) {
                    for (gx, gv) in grads[ix].as_mut().unwrap().iter_mut().zip(g) {
                        *gx += gv;
                    }
                }
            }
            Op::Unary(kind, x) => {
                if let Some(ix) = acc(*x, grads) {
                    let xd = self.value(*x).data();
                    let gx = grads[ix].as_mut().unwrap();
                    for i in 0..g.len() {
                        let (xv, y) = (xd[i], out[i]);
                        let d = match kind {
                            UnaryKind::Sigmoid => y * (1.0 - y),
                            UnaryKind::Tanh => 1.0 - y * y,
                            UnaryKind::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Gelu => gelu_grad(xv),
                            UnaryKind::Exp => y,
                            UnaryKind::Log => 1.0 / xv,
                            UnaryKind::Square => 2.0 * xv,
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let rows = self.value(*a).numel() / k.max(1);
                if let Some(ia) = acc(*a, grads) {
                    gemm_nt(g, self.value(*b).data(), grads[ia].as_mut().unwrap(), rows, k, n);
                }
                if let Some(ib) = acc(*b, grads) {
                    gemm_tn(self.value(*a).data(), g, grads[ib].as_mut().unwrap(), rows, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = self.shape(*b)[r - 1];
                let batch = numel(&sa[..r - 2]);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ia) = acc(*a, grads) {
                    let ga = grads[ia].as_mut().unwrap();
                    for bi in 0..batch {
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &db[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if let Some(ib) = acc(*b, grads) {
                    let gb = grads[ib].as_mut().unwrap();
                    for bi in 0..batch {
                        gemm_tn(
                            &da[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Permute(x, perm) => {
                if let Some(ix) = acc(*x, grads) {
                    let in_strides = strides(self.shape(*x));
                    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                    let gx = grads[ix].as_mut().unwrap();
                    permute_visit(node.value.shape(), &src, |o, i| gx[i] += g[o]);
                }
            }
            Op::BroadcastTo(x) => {
                if let Some(ix) = acc(*x, grads) {
                    let sx = self.shape(*x);
                    let oshape = node.value.shape();
                    let gx = grads[ix].as_mut().unwrap();
                    for_each_broadcast(oshape, sx, oshape, |o, i, _| gx[i] += g[o]);
                }
            }
            Op::Concat(xs, axis) => {
                let oshape = node.value.shape();
                let (outer, total, inner) = split_axis(oshape, *axis);
                let mut offset = 0;
                for v in xs {
                    let len = self.shape(*v)[*axis];
                    if let Some(iv) = acc(*v, grads) {
                        let gv = grads[iv].as_mut().unwrap();
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (dst, s) in gv[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *dst += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if let Some(ix) = acc(*x, grads) {
                    let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                    let len = node.value.shape()[*axis];
                    let gx = grads[ix].as_mut().unwrap();
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        for (d, s) in gx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                if let Some(ix) = acc(*x, grads) {
                    let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                    let gx = grads[ix].as_mut().unwrap();
                    let n = indices.len();
                    for o in 0..outer {
                        for (k, &i) in indices.iter().enumerate() {
                            let dst = (o * full + i) * inner;
                            let src = (o * n + k) * inner;
                            for c in 0..inner {
                                gx[dst + c] += g[src + c];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(ix) = acc(*x, grads) {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let gx = grads[ix].as_mut().unwrap();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                if let Some(ix) = acc(*x, grads) {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let gx = grads[ix].as_mut().unwrap();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let gsum: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += g[at(j)] - out[at(j)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let rows = rstd.len();
                let gd = self.value(*gain).data();
                if let Some(ix) = acc(*x, grads) {
                    let gx = grads[ix].as_mut().unwrap();
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            let v = g[r * d + j] * gd[j];
                            dxhat[j] = v;
                            m1 += v;
                            m2 += v * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
                if let Some(ig) = acc(*gain, grads) {
                    let gg = grads[ig].as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(ib) = acc(*bias, grads) {
                    let gb = grads[ib].as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(ix) = acc(*x, grads) {
                    for gx in grads[ix].as_mut().unwrap().iter_mut() {
                        *gx += g[0];
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                if let Some(ix) = acc(*x, grads) {
                    let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                    let gx = grads[ix].as_mut().unwrap();
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::L2Norm { x, axis } => {
                if let Some(ix) = acc(*x, grads) {
                    let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                    let xd = self.value(*x).data();
                    let gx = grads[ix].as_mut().unwrap();
                    for o in 0..outer {
                        for i in 0..inner {
                            let n = out[o * inner + i];
                            if n == 0.0 {
                                continue;
                            }
                            let s = g[o * inner + i] / n;
                            for j in 0..len {
                                let k = (o * len + j) * inner + i;
                                gx[k] += s * xd[k];
                            }
                        }
                    }
                }
            }
            Op::CosineSim { a, b, axis, norms } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                for (target, other, first) in [(*a, db, true), (*b, da, false)] {
                    if let Some(it) = acc(target, grads) {
                        let own = if first { da } else { db };
                        let gt = grads[it].as_mut().unwrap();
                        for o in 0..outer {
                            for i in 0..inner {
                                let r = o * inner + i;
                                let (na, nb) = norms[r];
                                let (n_own, n_other) = if first { (na, nb) } else { (nb, na) };
                                let y = out[r];
                                for j in 0..len {
                                    let k = (o * len + j) * inner + i;
                                    gt[k] += g[r]
                                        * (other[k] / (n_own * n_other) - y * own[k] / (n_own * n_own));
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if let Some(il) = acc(*logits, grads) {
                    let data = self.value(*logits).data();
                    let rows = labels.len();
                    let k = data.len() / rows;
                    let gl = grads[il].as_mut().unwrap();
                    let s = g[0] / rows as f64;
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &data[r * k..(r + 1) * k];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - max).exp() / z;
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * k + j] += s * (p - onehot);
                        }
                    }
                }
            }
            Op::TemporalConv { x, kernel, bias } => {
                let sx = self.shape(*x);
                let (t_len, p, d) = (sx[0], sx[1], sx[2]);
                let frame = p * d;
                let xd = self.value(*x).data();
                let kd = self.value(*kernel).data();
                if let Some(ix) = acc(*x, grads) {
                    let gx = grads[ix].as_mut().unwrap();
                    for t in 0..t_len {
                        for j in 0..frame {
                            let c = j % d;
                            let mut v = g[t * frame + j] * (1.0 + kd[d + c]);
                            if t + 1 < t_len {
                                v += g[(t + 1) * frame + j] * kd[c];
                            }
                            if t > 0 {
                                v += g[(t - 1) * frame + j] * kd[2 * d + c];
                            }
                            gx[t * frame + j] += v;
                        }
                    }
                }
                if let Some(ik) = acc(*kernel, grads) {
                    let gk = grads[ik].as_mut().unwrap();
                    for t in 0..t_len {
                        for j in 0..frame {
                            let c = j % d;
                            let gv = g[t * frame + j];
                            gk[d + c] += gv * xd[t * frame + j];
                            if t > 0 {
                                gk[c] += gv * xd[(t - 1) * frame + j];
                            }
                            if t + 1 < t_len {
                                gk[2 * d + c] += gv * xd[(t + 1) * frame + j];
                            }
                        }
                    }
                }
                if let Some(ib) = acc(*bias, grads) {
                    let gb = grads[ib].as_mut().unwrap();
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % d] += gv;
                    }
                }
            }
        }
    }
}

/// Visits (output offset, source offset) pairs of a permuted layout.
fn permute_visit(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..n {
        f(o, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = g.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::from_vec(vec![2f64.ln(), 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::full(&[4], 5.0));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let gain = g.constant(Tensor::ones(&[2]));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_vec(vec![1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        // variance 1, so scale is 1/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - expect).abs() < 1e-15);
        assert!((g.value(y).data()[1] + expect).abs() < 1e-15);

        let gain = g.constant(Tensor::zeros(&[0]));
        let bias = g.constant(Tensor::zeros(&[0]));
        let x = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.layer_norm(x, gain, bias), Err(Error::EmptyDim(_))));
    }

    #[test]
    fn shared_input_accumulates_both_branches() {
        // y = x*x + 3x at x = 2 -> dy/dx = 2x + 3 = 7
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let y = g.add(sq, lin).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_param_gets_zero_grad_and_constants_get_none() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let unused = g.param(Tensor::ones(&[3]));
        let c = g.constant(Tensor::ones(&[2]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), Tensor::zeros(&[3]));
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        let bad = g.param(Tensor::zeros(&[2]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).get(&[3, 1, 2]), g.value(x).get(&[1, 2, 3]));
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn concat_narrow_select() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let n = g.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(n), g.value(b));
        let s = g.index_select(c, 1, &[2, 0]).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 1.0, 6.0, 2.0]);
    }

    #[test]
    fn cosine_of_zero_vector_is_guarded() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3]));
        let b = g.constant(Tensor::ones(&[3]));
        assert!(matches!(g.cosine_similarity(a, b, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 5]));
        let ce = g.cross_entropy(logits, &[1, 4]).unwrap();
        assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn temporal_conv_zero_kernel_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 2, 2], (0..12).map(f64::from).collect()).unwrap());
        let k = g.param(Tensor::zeros(&[3, 2]));
        let b = g.param(Tensor::zeros(&[2]));
        let y = g.temporal_conv(x, k, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}
