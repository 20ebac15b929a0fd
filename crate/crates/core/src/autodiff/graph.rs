use std::collections::HashMap;

use super::tensor::{MatView, Real, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of every differentiable operation the graph supports. The gradient
/// audit must cover each entry exactly once.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "batch_matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "neg",
    "exp",
    "log",
    "sqrt",
    "gelu",
    "sin",
    "cos",
    "sigmoid",
    "map",
    "concat",
    "slice",
    "reshape",
    "permute",
    "sum_axis",
    "mean_axis",
    "sum_all",
    "softmax_rows",
    "log_softmax_rows",
    "l2_normalize_rows",
    "layer_norm",
    "gather_rows",
];

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, R),
    AddScalar(Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Gelu(Var),
    Sin(Var),
    Cos(Var),
    Sigmoid(Var),
    Map { x: Var, deriv: Vec<R> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize { x: Var, eps: R },
    LayerNorm { x: Var, eps: R },
    GatherRows { x: Var, index: Vec<Option<usize>> },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
    tracks: bool,
    grad: Option<Tensor<R>>,
}

/// Reverse-mode differentiation graph. Nodes are appended in evaluation order,
/// so index order is a topological order. One graph per training step.
#[derive(Debug)]
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    bound: HashMap<ParamId, Var>,
    inference: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_index, in_index)` for every element of a permuted tensor.
fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for out in 0..numel {
        f(out, src);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= gather[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Output shape for trailing-axis broadcasting, or `None` if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 {
        Some(a.to_vec())
    } else if na == 1 {
        Some(b.to_vec())
    } else if a.len() > b.len() && a.ends_with(b) {
        Some(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct MmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ca: usize,
    cb: usize,
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            inference: false,
        }
    }

    /// A graph in which bound parameters never require gradients.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracks: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Repeated binds return the same node,
    /// so one graph should only ever see one store.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable && !self.inference);
        self.bound.insert(id, v);
        v
    }

    /// Makes later `param(_, id)` calls resolve to `v` instead of the store value.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&id, &v)| (id, v))
    }

    /// Every node handle, in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<R>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, parents: &[Var]) -> Var {
        let tracks = parents.iter().any(|p| self.nodes[p.0].tracks);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracks,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op<R>, f: impl Fn(R) -> R) -> Var {
        let src = &self.nodes[x.0].value;
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(out, op, &[x])
    }

    // ---- linear algebra -------------------------------------------------

    fn mm_dims(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<MmDims> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        let (batch, ra, ca, rb, cb) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return Err(err()),
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(err());
        }
        Ok(MmDims {
            batch,
            m,
            k,
            n,
            ca,
            cb,
        })
    }

    /// Matrix product `op(a) * op(b)`, where `op` optionally transposes. Rank-3
    /// operands are multiplied batch-wise over the leading axis.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let d = self.mm_dims(a, b, ta, tb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![R::zero(); d.batch * d.m * d.n];
        let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            let a_view = mat_view(&av[i * sa..(i + 1) * sa], d.ca, ta);
            let b_view = mat_view(&bv[i * sb..(i + 1) * sb], d.cb, tb);
            R::gemm(
                d.m,
                d.k,
                d.n,
                a_view,
                b_view,
                &mut out[i * so..(i + 1) * so],
                d.n,
                1,
                false,
            );
        }
        let shape = if self.shape(a).len() == 3 {
            vec![d.batch, d.m, d.n]
        } else {
            vec![d.m, d.n]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x W^T + b` for a weight stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, weight, false, true)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<R>,
        f: impl Fn(R, R) -> R,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb).ok_or_else(|| Error::Shape {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (na, nb) = (av.len(), bv.len());
        let numel: usize = shape.iter().product();
        let out = (0..numel).map(|i| f(av[i % na], bv[i % nb])).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by exact zero".into(),
            });
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: R) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= R::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), |v| v.ln()))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v < R::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Sqrt(x), |v| v.sqrt()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| R::lit(gelu_fwd(v.as_f64())))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), |v| v.sin())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x), |v| v.cos())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| R::one() / (R::one() + (-v).exp()))
    }

    /// Elementwise op with a caller-supplied derivative.
    pub fn map(&mut self, x: Var, f: impl Fn(R) -> R, df: impl Fn(R) -> R) -> Var {
        let deriv = self.value(x).data().iter().map(|&v| df(v)).collect();
        self.unary(x, Op::Map { x, deriv }, f)
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().ok_or(Error::EmptyBatch)?.0)
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Contract(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![R::zero(); src.len()];
        for_each_permuted(&shape, perm, |o, i| out[o] = src[i]);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        match self.shape(x).len() {
            2 => self.permute(x, &[1, 0]),
            _ => Err(Error::Contract("transpose expects a rank-2 tensor".into())),
        }
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "reduction axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + *v;
                }
            }
        }
        if mean {
            let c = R::one() / R::lit(n as f64);
            out.iter_mut().for_each(|v| *v = *v * c);
        }
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        Ok(self.push(value, op, &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, R::one() / R::lit(n as f64))
    }

    // ---- row-wise -------------------------------------------------------

    fn last_dim(&self, x: Var) -> usize {
        *self.shape(x).last().expect("non-empty shape")
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("{op}: NaN input")));
        }
        Ok(())
    }

    /// Softmax over the last axis, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softmax_rows", x)?;
        let d = self.last_dim(x);
        let src = self.value(x);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut sum = R::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / sum);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax_rows", x)?;
        let d = self.last_dim(x);
        let src = self.value(x);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<R>().ln() + max;
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    /// Divides each row by `max(||row||, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: R) -> Var {
        let d = self.last_dim(x);
        let src = self.value(x);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<R>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::L2Normalize { x, eps }, &[x])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: R) -> Var {
        let d = self.last_dim(x);
        let src = self.value(x);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(d) {
            let (mean, rstd) = moments(row, eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::LayerNorm { x, eps }, &[x])
    }

    /// Selects rows of a rank-2 tensor; `None` entries produce zero rows.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows expects a rank-2 tensor, got {shape:?}"
            )));
        }
        if index.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (n, d) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = vec![R::zero(); index.len() * d];
        for (r, ix) in index.iter().enumerate() {
            if let Some(i) = *ix {
                if i >= n {
                    return Err(Error::Index { index: i, len: n });
                }
                out[r * d..(r + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        let value = Tensor::new(vec![index.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of every gradient-requiring leaf reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![R::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracks {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if node.requires_grad {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                node.grad = Some(match node.grad.take() {
                    Some(mut prev) => {
                        for (p, v) in prev.data_mut().iter_mut().zip(t.data()) {
                            *p = *p + *v;
                        }
                        prev
                    }
                    None => t,
                });
            }
        }
        Ok(())
    }

    /// Clears stored leaf gradients.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn backprop(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let d = self.mm_dims(*a, *b, *ta, *tb).expect("validated at forward");
                let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
                let (ta, tb) = (*ta, *tb);
                with_grad!(*a, |ga| {
                    let bv = val(*b);
                    for bi in 0..d.batch {
                        let gv = MatView::row_major(&g[bi * so..(bi + 1) * so], d.n);
                        let b_eff = mat_view(&bv[bi * sb..(bi + 1) * sb], d.cb, tb);
                        let (rsc, csc) = if ta { (1, d.ca) } else { (d.ca, 1) };
                        R::gemm(
                            d.m,
                            d.n,
                            d.k,
                            gv,
                            b_eff.t(),
                            &mut ga[bi * sa..(bi + 1) * sa],
                            rsc,
                            csc,
                            true,
                        );
                    }
                });
                with_grad!(*b, |gb| {
                    let av = val(*a);
                    for bi in 0..d.batch {
                        let gv = MatView::row_major(&g[bi * so..(bi + 1) * so], d.n);
                        let a_eff = mat_view(&av[bi * sa..(bi + 1) * sa], d.ca, ta);
                        let (rsc, csc) = if tb { (1, d.cb) } else { (d.cb, 1) };
                        R::gemm(
                            d.k,
                            d.m,
                            d.n,
                            a_eff.t(),
                            gv,
                            &mut gb[bi * sb..(bi + 1) * sb],
                            rsc,
                            csc,
                            true,
                        );
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                    -R::one()
                } else {
                    R::one()
                };
                with_grad!(*a, |ga| {
                    let n = ga.len();
                    for (k, gv) in g.iter().enumerate() {
                        ga[k % n] = ga[k % n] + *gv;
                    }
                });
                with_grad!(*b, |gb| {
                    let n = gb.len();
                    for (k, gv) in g.iter().enumerate() {
                        gb[k % n] = gb[k % n] + sign * *gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    let (n, nb) = (ga.len(), bv.len());
                    for (k, gv) in g.iter().enumerate() {
                        ga[k % n] = ga[k % n] + *gv * bv[k % nb];
                    }
                });
                with_grad!(*b, |gb| {
                    let (n, na) = (gb.len(), av.len());
                    for (k, gv) in g.iter().enumerate() {
                        gb[k % n] = gb[k % n] + *gv * av[k % na];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    let (n, nb) = (ga.len(), bv.len());
                    for (k, gv) in g.iter().enumerate() {
                        ga[k % n] = ga[k % n] + *gv / bv[k % nb];
                    }
                });
                with_grad!(*b, |gb| {
                    let (n, na) = (gb.len(), av.len());
                    for (k, gv) in g.iter().enumerate() {
                        let y = bv[k % n];
                        gb[k % n] = gb[k % n] - *gv * av[k % na] / (y * y);
                    }
                });
            }
            Op::Scale(x, c) => with_grad!(*x, |gx| {
                for (acc, gv) in gx.iter_mut().zip(g) {
                    *acc = *acc + *gv * *c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => with_grad!(*x, |gx| {
                for (acc, gv) in gx.iter_mut().zip(g) {
                    *acc = *acc + *gv;
                }
            }),
            Op::Neg(x) => with_grad!(*x, |gx| {
                for (acc, gv) in gx.iter_mut().zip(g) {
                    *acc = *acc - *gv;
                }
            }),
            Op::Exp(x) => with_grad!(*x, |gx| {
                for ((acc, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *acc = *acc + *gv * *y;
                }
            }),
            Op::Log(x) => with_grad!(*x, |gx| {
                for ((acc, gv), v) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *acc = *acc + *gv / *v;
                }
            }),
            Op::Sqrt(x) => with_grad!(*x, |gx| {
                let half = R::lit(0.5);
                for ((acc, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *acc = *acc + *gv * half / *y;
                }
            }),
            Op::Gelu(x) => with_grad!(*x, |gx| {
                for ((acc, gv), v) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *acc = *acc + *gv * R::lit(gelu_grad(v.as_f64()));
                }
            }),
            Op::Sin(x) => with_grad!(*x, |gx| {
                for ((acc, gv), v) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *acc = *acc + *gv * v.cos();
                }
            }),
            Op::Cos(x) => with_grad!(*x, |gx| {
                for ((acc, gv), v) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *acc = *acc - *gv * v.sin();
                }
            }),
            Op::Sigmoid(x) => with_grad!(*x, |gx| {
                for ((acc, gv), y) in gx.iter_mut().zip(g).zip(out) {
                    *acc = *acc + *gv * *y * (R::one() - *y);
                }
            }),
            Op::Map { x, deriv } => with_grad!(*x, |gx| {
                for ((acc, gv), dv) in gx.iter_mut().zip(g).zip(deriv) {
                    *acc = *acc + *gv * *dv;
                }
            }),
            Op::Concat { parts, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    with_grad!(p, |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            for (acc, gv) in dst.iter_mut().zip(src) {
                                *acc = *acc + *gv;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => with_grad!(*x, |gx| {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = nodes[i].value.shape()[*axis];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    let dst = &mut gx[base..base + len * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (acc, gv) in dst.iter_mut().zip(src) {
                        *acc = *acc + *gv;
                    }
                }
            }),
            Op::Permute { x, perm } => with_grad!(*x, |gx| {
                for_each_permuted(nodes[x.0].value.shape(), perm, |o, s| {
                    gx[s] = gx[s] + g[o];
                });
            }),
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => with_grad!(*x, |gx| {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let c = if matches!(nodes[i].op, Op::MeanAxis { .. }) {
                    R::one() / R::lit(n as f64)
                } else {
                    R::one()
                };
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (acc, gv) in dst.iter_mut().zip(src) {
                            *acc = *acc + *gv * c;
                        }
                    }
                }
            }),
            Op::SumAll(x) => with_grad!(*x, |gx| {
                let gv = g[0];
                gx.iter_mut().for_each(|acc| *acc = *acc + gv);
            }),
            Op::Softmax(x) => with_grad!(*x, |gx| {
                let d = *nodes[i].value.shape().last().unwrap();
                for ((gr, yr), acc) in g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: R = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for ((a, gv), y) in acc.iter_mut().zip(gr).zip(yr) {
                        *a = *a + *y * (*gv - dot);
                    }
                }
            }),
            Op::LogSoftmax(x) => with_grad!(*x, |gx| {
                let d = *nodes[i].value.shape().last().unwrap();
                for ((gr, yr), acc) in g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                    let total: R = gr.iter().copied().sum();
                    for ((a, gv), y) in acc.iter_mut().zip(gr).zip(yr) {
                        *a = *a + *gv - y.exp() * total;
                    }
                }
            }),
            Op::L2Normalize { x, eps } => with_grad!(*x, |gx| {
                let d = *nodes[i].value.shape().last().unwrap();
                let xv = val(*x);
                for (((gr, yr), xr), acc) in g
                    .chunks(d)
                    .zip(out.chunks(d))
                    .zip(xv.chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let norm = xr.iter().map(|&v| v * v).sum::<R>().sqrt();
                    if norm > *eps {
                        let dot: R = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                        for ((a, gv), y) in acc.iter_mut().zip(gr).zip(yr) {
                            *a = *a + (*gv - *y * dot) / norm;
                        }
                    } else {
                        for (a, gv) in acc.iter_mut().zip(gr) {
                            *a = *a + *gv / *eps;
                        }
                    }
                }
            }),
            Op::LayerNorm { x, eps } => with_grad!(*x, |gx| {
                let d = *nodes[i].value.shape().last().unwrap();
                let xv = val(*x);
                let inv_d = R::one() / R::lit(d as f64);
                for (((gr, yr), xr), acc) in g
                    .chunks(d)
                    .zip(out.chunks(d))
                    .zip(xv.chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let (_, rstd) = moments(xr, *eps);
                    let gmean = gr.iter().copied().sum::<R>() * inv_d;
                    let gymean = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum::<R>() * inv_d;
                    for ((a, gv), y) in acc.iter_mut().zip(gr).zip(yr) {
                        *a = *a + rstd * (*gv - gmean - *y * gymean);
                    }
                }
            }),
            Op::GatherRows { x, index } => with_grad!(*x, |gx| {
                let d = nodes[x.0].value.shape()[1];
                for (r, ix) in index.iter().enumerate() {
                    if let Some(src) = *ix {
                        let dst = &mut gx[src * d..(src + 1) * d];
                        for (acc, gv) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *acc = *acc + *gv;
                        }
                    }
                }
            }),
        }
    }
}

fn slot<'a, R: Real>(
    nodes: &[Node<R>],
    grads: &'a mut [Option<Vec<R>>],
    v: Var,
) -> Option<&'a mut Vec<R>> {
    if !nodes[v.0].tracks {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); n]))
}

fn mat_view<R>(data: &[R], cols: usize, transposed: bool) -> MatView<'_, R> {
    if transposed {
        MatView::transposed(data, cols)
    } else {
        MatView::row_major(data, cols)
    }
}

fn moments<R: Real>(row: &[R], eps: R) -> (R, R) {
    let inv_d = R::one() / R::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<R>() * inv_d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
    (mean, R::one() / (var + eps).sqrt())
}
