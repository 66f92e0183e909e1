use std::collections::BTreeMap;

use super::{c, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Gelu,
    Sigmoid,
    Tanh,
    Square,
    Neg,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// `x / sqrt(mean(x^2) + eps)`: unit root-mean-square.
    RmsNorm,
    /// `x / sqrt(sum(x^2) + eps)`: unit Euclidean norm.
    QkNorm,
}

/// Bucket for the multiply-accumulate counter kept by every graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MacTag {
    Projection,
    AttnScores,
    AttnValues,
    Other,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddConst(Var),
    Unary(Var, Unary),
    Softmax {
        x: Var,
        axis: usize,
    },
    Normalize {
        x: Var,
        kind: NormKind,
        axis: usize,
        eps: S,
    },
    Sum(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Rope {
        x: Var,
        cos: Vec<S>,
        sin: Vec<S>,
    },
}

#[derive(Clone, Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// An append-only tape of operations. Node order is a topological order.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    macs: BTreeMap<MacTag, u64>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the node did not receive any.
    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output shape and broadcast side for a binary elementwise op. The smaller
/// operand must equal the trailing dimensions of the larger.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (big, small) = if numel(a) >= numel(b) { (a, b) } else { (b, a) };
    if small.len() <= big.len() && big[big.len() - small.len()..] == *small {
        Ok(big.to_vec())
    } else {
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn unary_fwd<S: Scalar>(kind: Unary, x: S) -> S {
    match kind {
        Unary::Silu => x * sigmoid(x),
        Unary::Gelu => {
            let inner = c::<S>(GELU_K) * (x + c::<S>(GELU_C) * x * x * x);
            c::<S>(0.5) * x * (S::one() + inner.tanh())
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Square => x * x,
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
    }
}

fn unary_grad<S: Scalar>(kind: Unary, x: S, y: S) -> S {
    match kind {
        Unary::Silu => {
            let s = sigmoid(x);
            s * (S::one() + x * (S::one() - s))
        }
        Unary::Gelu => {
            let k = c::<S>(GELU_K);
            let cc = c::<S>(GELU_C);
            let th = (k * (x + cc * x * x * x)).tanh();
            let half = c::<S>(0.5);
            half * (S::one() + th)
                + half * x * (S::one() - th * th) * k * (S::one() + c::<S>(3.0) * cc * x * x)
        }
        Unary::Sigmoid => y * (S::one() - y),
        Unary::Tanh => S::one() - y * y,
        Unary::Square => c::<S>(2.0) * x,
        Unary::Neg => -S::one(),
        Unary::Exp => y,
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Multiply-accumulate count recorded for `tag` so far.
    pub fn macs(&self, tag: MacTag) -> u64 {
        self.macs.get(&tag).copied().unwrap_or(0)
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    // ----- leaves -----

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.constant(&t))
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    /// Copy of `v` with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_tagged(a, b, MacTag::Other)
    }

    pub fn matmul_tagged(&mut self, a: Var, b: Var, tag: MacTag) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        *self.macs.entry(tag).or_insert(0) += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose expects rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose_raw(self.value(a), m, n);
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    // ----- elementwise -----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Var> {
        let shape = broadcast(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let (la, lb) = (va.len(), vb.len());
        let out: Vec<S> = (0..numel(&shape))
            .map(|i| f(va[i % la], vb[i % lb]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * k).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::Scale(a, k), rg)
    }

    pub fn add_const(&mut self, a: Var, k: S) -> Var {
        let out = self.value(a).iter().map(|&x| x + k).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::AddConst(a), rg)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = self.value(a).iter().map(|&x| unary_fwd(kind, x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::Unary(a, kind), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    // ----- reductions and normalisation -----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(a, axis, None)
    }

    /// Softmax along `axis`; entries where `mask` is `false` get probability 0.
    /// Every softmax group must keep at least one entry.
    pub fn softmax_masked(&mut self, a: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        if let Some(m) = &mask {
            if m.len() != numel(&shape) {
                return Err(Error::Shape {
                    op: "softmax mask",
                    lhs: shape,
                    rhs: vec![m.len()],
                });
            }
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a);
        let mut out = vec![S::zero(); x.len()];
        let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        for o in 0..outer {
            for j in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + j;
                let mut mx = S::neg_infinity();
                for k in 0..len {
                    if keep(idx(k)) {
                        mx = mx.max(x[idx(k)]);
                    }
                }
                if mx == S::neg_infinity() {
                    return Err(Error::invalid("softmax group fully masked"));
                }
                let mut sum = S::zero();
                for k in 0..len {
                    if keep(idx(k)) {
                        let e = (x[idx(k)] - mx).exp();
                        out[idx(k)] = e;
                        sum += e;
                    }
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / sum;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { x: a, axis }, rg))
    }

    pub fn normalize(&mut self, a: Var, kind: NormKind, axis: usize, eps: S) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "normalize axis {axis} out of range for {shape:?}"
            )));
        }
        if eps <= S::zero() {
            return Err(Error::invalid("normalize eps must be positive"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value(a);
        let mut out = vec![S::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + j;
                let r = norm_denominator(kind, (0..len).map(|k| x[idx(k)]), len, eps);
                for k in 0..len {
                    out[idx(k)] = x[idx(k)] / r;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            shape,
            out,
            Op::Normalize {
                x: a,
                kind,
                axis,
                eps,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, S::one() / c(n as f64))
    }

    /// Sum of squared entries of `a - b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.sum(sq))
    }

    // ----- layout -----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    fn rank2(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(a) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::invalid(format!("{op} expects rank 2, got {s:?}"))),
        }
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rank2(a, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} out of {cols}",
                start + len
            )));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (rows, _) = self.rank2(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let cols = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * cols..(r + 1) * cols]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let (_, cols) = self.rank2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows of `a` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rank2(a, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather_rows index {bad} >= {rows}")));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![idx.len(), cols],
            out,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    /// Flat element gather: `out.flat[i] = a.flat[idx[i]]`, reshaped to `shape`.
    /// Covers any lossless rearrangement (patchify, channel concat).
    pub fn gather(&mut self, a: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if numel(shape) != idx.len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "gather",
                lhs: vec![idx.len()],
                rhs: shape.to_vec(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("gather index {bad} >= {n}")));
        }
        let x = self.value(a);
        let out = idx.iter().map(|&i| x[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            shape.to_vec(),
            out,
            Op::Gather {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Rotates column pairs `(2p, 2p+1)` of each row by the angle whose
    /// cosine/sine are stored at `[row, p]`.
    pub fn rope(&mut self, a: Var, cos: Vec<S>, sin: Vec<S>) -> Result<Var> {
        let (rows, cols) = self.rank2(a, "rope")?;
        if cols % 2 != 0 || cos.len() != rows * cols / 2 || sin.len() != cos.len() {
            return Err(Error::invalid(format!(
                "rope tables of len {} for input [{rows}, {cols}]",
                cos.len()
            )));
        }
        let half = cols / 2;
        let x = self.value(a);
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            for p in 0..half {
                let (c_, s_) = (cos[r * half + p], sin[r * half + p]);
                let (x0, x1) = (x[r * cols + 2 * p], x[r * cols + 2 * p + 1]);
                out[r * cols + 2 * p] = x0 * c_ - x1 * s_;
                out[r * cols + 2 * p + 1] = x0 * s_ + x1 * c_;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![rows, cols], out, Op::Rope { x: a, cos, sin }, rg))
    }

    // ----- reverse mode -----

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = S::zero();
                            for j in 0..n {
                                s += g[i * n + j] * vb[kk * n + j];
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = va[i * k + kk];
                            for j in 0..n {
                                gb[kk * n + j] += aik * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                acc(*a, &mut |ga| {
                    let l = ga.len();
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i % l] += gi;
                    }
                });
                acc(*b, &mut |gb| {
                    let l = gb.len();
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % l] += sign * gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    let l = ga.len();
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i % l] += gi * vb[i % vb.len()];
                    }
                });
                acc(*b, &mut |gb| {
                    let l = gb.len();
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % l] += gi * va[i % va.len()];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |ga| {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi * *k;
                }
            }),
            Op::AddConst(a) | Op::Reshape(a) => acc(*a, &mut |ga| {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }),
            Op::Unary(a, kind) => {
                let xa = self.value(*a);
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * unary_grad(*kind, xa[i], y[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + j;
                            let dot: S = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Normalize { x, kind, axis, eps } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let xv = self.value(*x);
                let y = &node.value;
                let denom_len = match kind {
                    NormKind::RmsNorm => c::<S>(len as f64),
                    NormKind::QkNorm => S::one(),
                };
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + j;
                            let r = norm_denominator(*kind, (0..len).map(|k| xv[idx(k)]), len, *eps);
                            let dot: S = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                gx[idx(k)] += (g[idx(k)] - y[idx(k)] * dot / denom_len) / r;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let (rows, len) = (node.shape[0], node.shape[1]);
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for k in 0..len {
                            gx[r * cols + start + k] += g[r * len + k];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let cols = self.shape(p)[1];
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for k in 0..cols {
                                gp[r * cols + k] += g[r * total + offset + k];
                            }
                        }
                    });
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |gp| {
                        for (x, &gi) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *x += gi;
                        }
                    });
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = node.shape[1];
                acc(*x, &mut |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for k in 0..cols {
                            gx[src * cols + k] += g[r * cols + k];
                        }
                    }
                });
            }
            Op::Gather { x, idx } => acc(*x, &mut |gx| {
                for (&src, &gi) in idx.iter().zip(g) {
                    gx[src] += gi;
                }
            }),
            Op::Rope { x, cos, sin } => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let half = cols / 2;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for p in 0..half {
                            let (c_, s_) = (cos[r * half + p], sin[r * half + p]);
                            let (g0, g1) = (g[r * cols + 2 * p], g[r * cols + 2 * p + 1]);
                            gx[r * cols + 2 * p] += g0 * c_ + g1 * s_;
                            gx[r * cols + 2 * p + 1] += -g0 * s_ + g1 * c_;
                        }
                    }
                });
            }
        }
    }
}

fn norm_denominator<S: Scalar>(kind: NormKind, xs: impl Iterator<Item = S>, len: usize, eps: S) -> S {
    let ss: S = xs.map(|v| v * v).sum();
    match kind {
        NormKind::RmsNorm => (ss / c(len as f64) + eps).sqrt(),
        NormKind::QkNorm => (ss + eps).sqrt(),
    }
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn transpose_raw<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(&t(&[2, 2], &[1.5, -2.0, 3.0, 4.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p), &[1.5, -2.0, 3.0, 4.0]);

        let a = g.constant(&t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(&t(&[2, 1], &[3.0, 4.0]));
        let d = g.matmul(a, b).unwrap();
        assert_eq!(g.value(d), &[11.0]);
        assert_eq!(g.shape(d), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn add_zero_and_silu_zero() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[3], &[1.0, -2.0, 0.5]));
        let z = g.constant(&Tensor::zeros(&[3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let s = g.scalar(0.0);
        let sy = g.silu(s);
        assert_eq!(g.item(sy), 0.0);
    }

    #[test]
    fn broadcast_bias_over_rows() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.param(&t(&[3], &[10., 20., 30.]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y), &[11., 22., 33., 14., 25., 36.]);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[2., 2., 2.]);
        let bad = g.constant(&Tensor::zeros(&[2]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[3], &[0.7, 0.7, 0.7]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(&t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-12);
        assert!(g.value(y)[1].abs() < 1e-12);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_mask_zeroes_entries() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2, 2], &[1.0, 5.0, 2.0, 2.0]));
        let y = g.softmax_masked(x, 1, Some(vec![true, false, true, true])).unwrap();
        assert_eq!(g.value(y), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn norms() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[3], &[2.0, 2.0, 2.0]));
        let y = g.normalize(x, NormKind::RmsNorm, 0, 1e-12).unwrap();
        for &v in g.value(y) {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let v = g.constant(&t(&[3], &[3.0, -4.0, 12.0]));
        let y = g.normalize(v, NormKind::QkNorm, 0, 1e-12).unwrap();
        let n: f64 = g.value(y).iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(g.normalize(v, NormKind::QkNorm, 0, 0.0).is_err());
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2, 2], &[1., 2., 3., 4.]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1., 2.]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn least_squares_gradient_matches_hand_derivation() {
        // loss = ||W x - y||^2  =>  dL/dW = 2 (W x - y) x^T
        let w = t(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]);
        let x = t(&[3, 1], &[1.0, -2.0, 0.5]);
        let y = t(&[2, 1], &[0.3, -0.1]);
        let mut g = Graph::new();
        let wv = g.param(&w);
        let xv = g.constant(&x);
        let yv = g.constant(&y);
        let wx = g.matmul(wv, xv).unwrap();
        let l = g.sq_dist(wx, yv).unwrap();
        let grads = g.backward(l).unwrap();
        let r: Vec<f64> = (0..2)
            .map(|i| (0..3).map(|k| w.data()[i * 3 + k] * x.data()[k]).sum::<f64>() - y.data()[i])
            .collect();
        let expected: Vec<f64> = (0..2)
            .flat_map(|i| (0..3).map(move |k| (i, k)))
            .map(|(i, k)| 2.0 * r[i] * x.data()[k])
            .collect();
        for (a, b) in grads.get(wv).unwrap().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1., 2.]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1., 2.]);
    }

    #[test]
    fn mac_counter_tracks_tags() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::zeros(&[3, 4]));
        let b = g.constant(&Tensor::zeros(&[4, 5]));
        g.matmul_tagged(a, b, MacTag::AttnScores).unwrap();
        g.matmul(a, b).unwrap();
        assert_eq!(g.macs(MacTag::AttnScores), 60);
        assert_eq!(g.macs(MacTag::Other), 60);
        assert_eq!(g.total_macs(), 120);
    }
}
