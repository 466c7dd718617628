//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes
//! are appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] walks it once in reverse.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, numel, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Sparse linear operator over rows: output row `o` is the weighted sum of
/// the listed input rows. Gathers, permutations, zero padding and
/// overlap-averaging are all expressed this way.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMap {
    rows_in: usize,
    row_len: usize,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Option<Vec<f64>>,
}

impl RowMap {
    /// One source row per output row; `None` yields a zero row.
    pub fn gather(rows_in: usize, row_len: usize, sources: &[Option<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(sources.len() + 1);
        let mut src = Vec::with_capacity(sources.len());
        offsets.push(0);
        for s in sources {
            if let Some(s) = s {
                debug_assert!(*s < rows_in);
                src.push(*s);
            }
            offsets.push(src.len());
        }
        RowMap {
            rows_in,
            row_len,
            offsets,
            sources: src,
            weights: None,
        }
    }

    pub fn weighted(rows_in: usize, row_len: usize, lists: &[Vec<(usize, f64)>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut src = Vec::new();
        let mut w = Vec::new();
        offsets.push(0);
        for l in lists {
            for &(s, wt) in l {
                debug_assert!(s < rows_in);
                src.push(s);
                w.push(wt);
            }
            offsets.push(src.len());
        }
        RowMap {
            rows_in,
            row_len,
            offsets,
            sources: src,
            weights: Some(w),
        }
    }

    pub fn rows_in(&self) -> usize {
        self.rows_in
    }

    pub fn rows_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    /// Applies the map to plain data.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.row_len;
        let mut out = vec![0.0; self.rows_out() * d];
        for o in 0..self.rows_out() {
            let dst = &mut out[o * d..(o + 1) * d];
            for e in self.offsets[o]..self.offsets[o + 1] {
                let s = self.sources[e];
                let w = self.weights.as_ref().map_or(1.0, |w| w[e]);
                for (dv, xv) in dst.iter_mut().zip(&x[s * d..(s + 1) * d]) {
                    *dv += w * xv;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: &[f64], gx: &mut [f64]) {
        let d = self.row_len;
        for o in 0..self.rows_out() {
            let src = &g[o * d..(o + 1) * d];
            for e in self.offsets[o]..self.offsets[o + 1] {
                let s = self.sources[e];
                let w = self.weights.as_ref().map_or(1.0, |w| w[e]);
                for (gv, sv) in gx[s * d..(s + 1) * d].iter_mut().zip(src) {
                    *gv += w * sv;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    BiasAdd(NodeId, NodeId),
    MulRows(NodeId, NodeId),
    Reshape(NodeId),
    Transpose(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Mean { x: NodeId, axes: Vec<usize> },
    Sum(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(NodeId),
    L2Normalize { x: NodeId, norms: Vec<f64> },
    StopGradient,
    MapRows { x: NodeId, map: RowMap },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    ArcMargin { cos: NodeId, labels: Vec<usize>, margin: f64, scale: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

static NO_PARAMS: ParamStore = ParamStore::new();

/// Recorded forward computation over a parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    bound: BTreeMap<ParamId, NodeId>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (numel(shape) / last, last)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

/// Target-class ArcFace logit and its derivative with respect to the cosine.
pub(crate) fn arc_target(cos: f64, margin: f64, scale: f64) -> (f64, f64) {
    let c = cos.clamp(-1.0, 1.0);
    let (sm, cm) = (libm::sin(margin), libm::cos(margin));
    // theta <= pi - m  <=>  cos(theta) >= cos(pi - m) = -cos(m)
    if c >= -cm {
        let s = libm::sqrt((1.0 - c * c).max(0.0));
        let value = scale * (c * cm - s * sm);
        let deriv = if s > 0.0 {
            scale * (cm + c * sm / s)
        } else {
            scale * cm
        };
        (value, deriv)
    } else {
        (scale * (c - margin * sm), scale)
    }
}

impl Graph<'static> {
    /// Graph with no trainable parameters.
    pub fn detached() -> Self {
        Graph::new(&NO_PARAMS)
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the loss with respect to `id`, available after backward.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id.0)?.as_ref()?;
        Tensor::new(self.shape(id).to_vec(), g.clone()).ok()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("constant", value, Op::Constant, false)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.bound.get(&id) {
            return Ok(n);
        }
        let value = self.store.value(id).clone();
        let n = self.push("param", value, Op::Param, true)?;
        self.bound.insert(id, n);
        Ok(n)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// Batched product `[g,m,k] x [g,k,n]`, or `[g,m,k] x [g,n,k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            let ab = &da[i * m * k..(i + 1) * m * k];
            let bb = &db[i * k * n..(i + 1) * k * n];
            let cb = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                matmul_nt_acc(ab, bb, cb, m, k, n);
            } else {
                matmul_acc(ab, bb, cb, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(
            "batch_matmul",
            Tensor::new(vec![g, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        )
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(name, sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let v = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, v, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn map_unary(&mut self, name: &'static str, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(name, t, op, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.map_unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary("gelu", x, gelu, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary("softplus", x, softplus, Op::Softplus(x))
    }

    /// Identity forward; contributes nothing to ancestors in backward.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        self.push("stop_gradient", v, Op::StopGradient, false)
    }

    /// `x[.., n] + b[n]`, broadcasting the bias over leading axes.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let (_, n) = split_last(sx);
        if sb.len() != 1 || sb[0] != n || sx.is_empty() {
            return Err(Error::shape("bias_add", sx, sb));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let t = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        self.push("bias_add", t, Op::BiasAdd(x, b), rg)
    }

    /// Scales each row of `x[r, c]` by the scalar `s[r]`.
    pub fn mul_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 2 || ss.len() != 1 || ss[0] != sx[0] {
            return Err(Error::shape("mul_rows", sx, ss));
        }
        let c = sx[1];
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (row, f) in data.chunks_mut(c).zip(sv) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let t = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        self.push("mul_rows", t, Op::MulRows(x, s), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape("transpose", sx, &[2]));
        }
        let (r, c) = (sx[0], sx[1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Empty("concat"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, len]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push("slice", Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg)
    }

    /// Mean over `axes`, which are removed from the output shape.
    pub fn mean(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() || axes.iter().any(|&a| a >= s.len()) {
            return Err(Error::shape("mean", &s, &axes));
        }
        let out_shape: Vec<usize> = s
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let count: usize = axes.iter().map(|&a| s[a]).product();
        let mut out = vec![0.0; numel(&out_shape)];
        let d = self.value(x).data();
        for (i, v) in d.iter().enumerate() {
            out[reduced_index(i, &s, &axes)] += v;
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::new(out_shape, out)?, Op::Mean { x, axes }, rg)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Layer normalisation over the last axis with `gain`/`bias` of that width.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let (rows, n) = split_last(&sx);
        if sx.is_empty() || self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gain)));
        }
        let d = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last axis; entries with `mask[i] == false` get
    /// probability exactly zero. Every row needs at least one kept entry.
    pub fn masked_softmax(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(Error::shape("softmax", &sx, &[1]));
        }
        if let Some(m) = mask {
            if m.len() != numel(&sx) {
                return Err(Error::shape("softmax mask", &sx, &[m.len()]));
            }
        }
        let (rows, n) = split_last(&sx);
        let d = self.value(x).data();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let keep = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let row = &d[r * n..(r + 1) * n];
            let mx = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::Invalid("softmax row fully masked".into()));
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if keep(j) {
                    o[j] = libm::exp(row[j] - mx);
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(&[x]);
        self.push("softmax", Tensor::new(sx, out)?, Op::Softmax(x), rg)
    }

    /// Divides each last-axis vector by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(Error::shape("l2_normalize", &sx, &[1]));
        }
        let (rows, n) = split_last(&sx);
        let d = self.value(x).data();
        let mut norms = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let nr = libm::sqrt(dot(row, row));
            if nr == 0.0 {
                return Err(Error::ZeroNorm("l2_normalize"));
            }
            norms[r] = nr;
            for j in 0..n {
                out[r * n + j] = row[j] / nr;
            }
        }
        let rg = self.rg(&[x]);
        self.push("l2_normalize", Tensor::new(sx, out)?, Op::L2Normalize { x, norms }, rg)
    }

    /// Applies a [`RowMap`]; `out_shape` must hold `rows_out * row_len` entries.
    pub fn map_rows(&mut self, x: NodeId, map: RowMap, out_shape: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x);
        if numel(sx) != map.rows_in * map.row_len {
            return Err(Error::shape("map_rows", sx, &[map.rows_in, map.row_len]));
        }
        if numel(out_shape) != map.rows_out() * map.row_len {
            return Err(Error::shape("map_rows", out_shape, &[map.rows_out(), map.row_len]));
        }
        let out = map.apply(self.value(x).data());
        let rg = self.rg(&[x]);
        self.push("map_rows", Tensor::new(out_shape.to_vec(), out)?, Op::MapRows { x, map }, rg)
    }

    /// Mean softmax cross-entropy of `logits[b, n]` against `labels`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let (b, n) = (s[0], s[1]);
        if let Some(&l) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange { label: l, classes: n });
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; b * n];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &d[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
            let lse = mx + libm::log(z);
            loss += lse - row[labels[r]];
            for j in 0..n {
                probs[r * n + j] = libm::exp(row[j] - lse);
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// ArcFace logits from cosines `cos[b, n]`: the target column becomes
    /// `scale * cos(theta + margin)` (linearised past `pi - margin`), the
    /// others `scale * cos`.
    pub fn arc_margin(&mut self, cos: NodeId, labels: &[usize], margin: f64, scale: f64) -> Result<NodeId> {
        let s = self.shape(cos).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("arc_margin", &s, &[labels.len()]));
        }
        let n = s[1];
        if let Some(&l) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange { label: l, classes: n });
        }
        let mut out: Vec<f64> = self.value(cos).data().iter().map(|c| scale * c).collect();
        for (r, &l) in labels.iter().enumerate() {
            out[r * n + l] = arc_target(self.value(cos).data()[r * n + l], margin, scale).0;
        }
        let rg = self.rg(&[cos]);
        self.push(
            "arc_margin",
            Tensor::new(s, out)?,
            Op::ArcMargin {
                cos,
                labels: labels.to_vec(),
                margin,
                scale,
            },
            rg,
        )
    }

    /// Reverse accumulation from the scalar `loss`. May run once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut by_param = vec![None; self.store.len()];
        for (&pid, &nid) in &self.bound {
            by_param[pid.0] = grads[nid.0].clone();
        }
        self.grads = grads;
        Ok(Gradients { by_param })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |id: NodeId| nodes[id.0].value.data();
        // Accumulator for a parent, allocated lazily; `None` when the parent
        // does not need gradients.
        macro_rules! acc {
            ($id:expr) => {{
                let id: NodeId = $id;
                if nodes[id.0].requires_grad {
                    Some(grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.numel()]))
                } else {
                    None
                }
            }};
        }
        match &nodes[i].op {
            Op::Constant | Op::Param | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = acc!(*a) {
                    matmul_nt_acc(g, val(*b), ga, m, n, k);
                }
                if let Some(gb) = acc!(*b) {
                    matmul_tn_acc(val(*a), g, gb, m, k, n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = nodes[i].value.shape()[2];
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bb = &db[t * k * n..(t + 1) * k * n];
                        let gab = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            // dA = G B   with B stored [n, k]
                            matmul_acc(gt, bb, gab, m, n, k);
                        } else {
                            matmul_nt_acc(gt, bb, gab, m, n, k);
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let ab = &da[t * m * k..(t + 1) * m * k];
                        let gbb = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = G^T A
                            matmul_tn_acc(gt, ab, gbb, m, n, k);
                        } else {
                            matmul_tn_acc(ab, gt, gbb, m, k, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * db[j];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * da[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] / db[j];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for j in 0..g.len() {
                        gb[j] -= g[j] * da[j] / (db[j] * db[j]);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::BiasAdd(x, b) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
                if let Some(gb) = acc!(*b) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::MulRows(x, s) => {
                let c = nodes[x.0].value.shape()[1];
                let (dx, ds) = (val(*x), val(*s));
                if let Some(gx) = acc!(*x) {
                    for (r, f) in ds.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[r * c + j] * f;
                        }
                    }
                }
                if let Some(gs) = acc!(*s) {
                    for (r, gsr) in gs.iter_mut().enumerate() {
                        *gsr += dot(&g[r * c..(r + 1) * c], &dx[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = acc!(*x) {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[i].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape()[*axis] * inner;
                    if let Some(gp) = acc!(*p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            gp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, v)| *a += v);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = nodes[x.0].value.shape();
                let len = nodes[i].value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let extent = s[*axis];
                if let Some(gx) = acc!(*x) {
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        gx[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Mean { x, axes } => {
                let s = nodes[x.0].value.shape();
                let count: usize = axes.iter().map(|&a| s[a]).product();
                let inv = 1.0 / count as f64;
                if let Some(gx) = acc!(*x) {
                    for (j, gv) in gx.iter_mut().enumerate() {
                        *gv += g[reduced_index(j, s, axes)] * inv;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Relu(x) => {
                let dx = val(*x);
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        if dx[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let dx = val(*x);
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        let v = dx[j];
                        gx[j] += g[j] * (std_normal_cdf(v) + v * std_normal_pdf(v));
                    }
                }
            }
            Op::Softplus(x) => {
                let dx = val(*x);
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * sigmoid(dx[j]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = nodes[gain.0].value.numel();
                let gv = val(*gain);
                if let Some(gg) = acc!(*gain) {
                    for (r, row) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            gg[j] += row[j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let nf = n as f64;
                    for (r, row) in g.chunks(n).enumerate() {
                        let h = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = row[j] * gv[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        for j in 0..n {
                            let dh = row[j] * gv[j];
                            gx[r * n + j] += inv_std[r] * (dh - s1 / nf - h[j] * s2 / nf);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let (_, n) = split_last(nodes[i].value.shape());
                if let Some(gx) = acc!(*x) {
                    for (r, row) in g.chunks(n).enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let s = dot(row, yr);
                        for j in 0..n {
                            gx[r * n + j] += yr[j] * (row[j] - s);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = nodes[i].value.data();
                let (_, n) = split_last(nodes[i].value.shape());
                if let Some(gx) = acc!(*x) {
                    for (r, row) in g.chunks(n).enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let s = dot(row, yr);
                        for j in 0..n {
                            gx[r * n + j] += (row[j] - yr[j] * s) / norms[r];
                        }
                    }
                }
            }
            Op::MapRows { x, map } => {
                if let Some(gx) = acc!(*x) {
                    map.apply_transpose(g, gx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let n = probs.len() / b;
                let scale = g[0] / b as f64;
                if let Some(gl) = acc!(*logits) {
                    for r in 0..b {
                        for j in 0..n {
                            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                            gl[r * n + j] += scale * (probs[r * n + j] - onehot);
                        }
                    }
                }
            }
            Op::ArcMargin {
                cos,
                labels,
                margin,
                scale,
            } => {
                let n = nodes[i].value.shape()[1];
                let dc = val(*cos);
                if let Some(gc) = acc!(*cos) {
                    for (j, gv) in gc.iter_mut().enumerate() {
                        let (r, col) = (j / n, j % n);
                        let d = if col == labels[r] {
                            arc_target(dc[j], *margin, *scale).1
                        } else {
                            *scale
                        };
                        *gv += g[j] * d;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Flat index into the reduced tensor for flat input index `i`.
fn reduced_index(i: usize, shape: &[usize], axes: &[usize]) -> usize {
    let mut rem = i;
    let mut coords = [0usize; 8];
    let rank = shape.len();
    debug_assert!(rank <= 8);
    for d in (0..rank).rev() {
        coords[d] = rem % shape[d];
        rem /= shape[d];
    }
    let mut out = 0;
    for d in 0..rank {
        if !axes.contains(&d) {
            out = out * shape[d] + coords[d];
        }
    }
    out
}
