//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough saved state to run its backward
//! rule, so node order is always a valid topological order.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn_rows, pairwise_sum};
use super::param::{ParamId, ParamStore};
use super::tensor::{broadcast_offsets, broadcast_shape, plan_broadcast, strides_of, BroadcastPlan, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::exec::for_each_chunk;

/// Magnitude of the additive mask applied to non-attendable logits.
pub const MASK_LARGE: f64 = 1e9;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every op output is scanned for NaN/Inf and fails with a numeric error.
    pub fn with_finite_checks() -> Self {
        Tape { nodes: Vec::new(), check_finite: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output at tape node {} (shape {:?})",
                self.nodes.len(),
                value.shape()
            )));
        }
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to a stored parameter; see [`ParamStore::accumulate`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, param: Some(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn param_links(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
    }

    // ---- elementwise -------------------------------------------------------

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let pa = plan_broadcast(&shape, ta.shape());
        let pb = plan_broadcast(&shape, tb.shape());
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(n);
        match (&pa, &pb) {
            (BroadcastPlan::Same, BroadcastPlan::Same) => {
                out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
            (BroadcastPlan::Same, BroadcastPlan::Cyclic(per)) => {
                out.extend(da.iter().enumerate().map(|(i, &x)| f(x, db[i % per])));
            }
            (BroadcastPlan::Cyclic(per), BroadcastPlan::Same) => {
                out.extend(db.iter().enumerate().map(|(i, &y)| f(da[i % per], y)));
            }
            _ => {
                let oa = offsets(&pa, &shape);
                let ob = offsets(&pb, &shape);
                out.extend(oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])));
            }
        }
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::Shift(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg)
    }

    // ---- linear algebra and layout -----------------------------------------

    /// Batched matrix product `[..×p×q] · [..×q×r]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(dim_err(format!("matmul shape mismatch: {sa:?} × {sb:?}")));
        }
        let (p, q, r) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let out = if sb.len() == 2 {
            let rows = ta.len() / q;
            let mut out = vec![0.0; rows * r];
            let block = 32;
            let (ad, bd) = (ta.data(), tb.data());
            for_each_chunk(&mut out, block * r, block * q * r, |c, chunk| {
                let m = chunk.len() / r;
                gemm_nn(&ad[c * block * q..(c * block + m) * q], bd, chunk, m, q, r);
            });
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = r;
            Tensor::from_parts(shape, out)
        } else {
            let ba = &sa[..sa.len() - 2];
            let bb = &sb[..sb.len() - 2];
            let bo = broadcast_shape(ba, bb)
                .map_err(|_| dim_err(format!("matmul batch mismatch: {sa:?} × {sb:?}")))?;
            let oa = broadcast_offsets(&bo, ba);
            let ob = broadcast_offsets(&bo, bb);
            let nb = oa.len();
            let mut out = vec![0.0; nb * p * r];
            let (ad, bd) = (ta.data(), tb.data());
            for_each_chunk(&mut out, p * r, p * q * r, |i, chunk| {
                let (ia, ib) = (oa[i] * p * q, ob[i] * q * r);
                gemm_nn(&ad[ia..ia + p * q], &bd[ib..ib + q * r], chunk, p, q, r);
            });
            let mut shape = bo;
            shape.extend([p, r]);
            Tensor::from_parts(shape, out)
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(axes)?;
        let rg = self.rg(a);
        self.push(t, Op::Permute(a, axes.to_vec()), rg)
    }

    pub fn transpose_last_two(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(dim_err(format!("transpose of rank-{r} tensor")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(pairwise_sum(self.value(a).data()));
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::scalar(pairwise_sum(v.data()) / v.len() as f64);
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// Sum along `axis`, keeping it with size 1. Uses pairwise summation.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(dim_err(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let data = v.data();
        let mut out = vec![0.0; outer * inner];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for j in 0..inner {
                for (k, slot) in buf.iter_mut().enumerate() {
                    *slot = data[(o * n + k) * inner + j];
                }
                out[o * inner + j] = pairwise_sum(&buf);
            }
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = 1;
        let rg = self.rg(a);
        self.push(Tensor::from_parts(oshape, out), Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| dim_err(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- attention primitives -------------------------------------------------

    /// Softmax over the last axis after adding an optional additive mask.
    ///
    /// Mask entries at or below `-MASK_LARGE / 2` mark non-attendable slots; a
    /// row with every slot masked is rejected.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let l = *shape.last().ok_or_else(|| dim_err("softmax of a scalar"))?;
        let mut logits = tx.data().to_vec();
        if let Some(m) = mask {
            let bs = broadcast_shape(&shape, m.shape())?;
            if bs != shape {
                return Err(dim_err(format!("mask {:?} does not broadcast to {shape:?}", m.shape())));
            }
            let plan = plan_broadcast(&shape, m.shape());
            let offs = offsets(&plan, &shape);
            let md = m.data();
            for (row, orow) in logits.chunks_mut(l).zip(offs.chunks(l)) {
                if orow.iter().all(|&o| md[o] <= -MASK_LARGE / 2.0) {
                    return Err(Error::Contract("fully masked attention row".into()));
                }
                for (v, &o) in row.iter_mut().zip(orow) {
                    *v += md[o];
                }
            }
        }
        for row in logits.chunks_mut(l) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, logits), Op::Softmax(x), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length D).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&0);
        if d < 1 {
            return Err(dim_err("layer norm needs a last dimension of at least 1"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(dim_err(format!(
                "layer norm affine shapes {:?}/{:?} vs D={d}",
                tg.shape(),
                tb.shape()
            )));
        }
        let (g, b) = (tg.data(), tb.data());
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for k in 0..d {
                let h = (row[k] - mean) * inv;
                xhat[r * d + k] = h;
                out[r * d + k] = h * g[k] + b[k];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err(format!("narrow({axis}, {start}, {len}) on {shape:?}")));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        let rg = self.rg(a);
        self.push(Tensor::from_parts(oshape, out), Op::Narrow { x: a, axis, start }, rg)
    }

    /// Selects rows of a `[G×D]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(dim_err(format!("gather_rows needs a matrix, got {:?}", t.shape())));
        }
        let (g, d) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(dim_err("gather_rows with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= g {
                return Err(dim_err(format!("row id {i} out of range for {g} rows")));
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(Tensor::from_parts(vec![ids.len(), d], out), Op::GatherRows { table, ids: ids.to_vec() }, rg)
    }

    // ---- backward ------------------------------------------------------------

    /// Gradients of a one-element `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(self, &grads);
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_reduced(grads, *a, g, out_shape, |x| x);
                self.acc_reduced(grads, *b, g, out_shape, |x| x);
            }
            Op::Sub(a, b) => {
                self.acc_reduced(grads, *a, g, out_shape, |x| x);
                self.acc_reduced(grads, *b, g, out_shape, |x| -x);
            }
            Op::Mul(a, b) => {
                for (me, other) in [(*a, *b), (*b, *a)] {
                    if !self.rg(me) {
                        continue;
                    }
                    let to = self.value(other);
                    let plan = plan_broadcast(out_shape, to.shape());
                    let offs = offsets(&plan, out_shape);
                    let od = to.data();
                    let prod: Vec<f64> = g.data().iter().zip(&offs).map(|(gv, &o)| gv * od[o]).collect();
                    let pt = Tensor::from_parts(out_shape.to_vec(), prod);
                    self.acc_reduced(grads, me, &pt, out_shape, |x| x);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|x| x * c));
            }
            Op::Shift(a) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g.data().iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                self.acc(grads, *a, Tensor::from_parts(out_shape.to_vec(), d));
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let d = g.data().iter().zip(x).map(|(gv, &xv)| gv * sign(xv)).collect();
                self.acc(grads, *a, Tensor::from_parts(out_shape.to_vec(), d));
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let d = g.data().iter().zip(x).map(|(gv, &xv)| 2.0 * gv * xv).collect();
                self.acc(grads, *a, Tensor::from_parts(out_shape.to_vec(), d));
            }
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, g, grads),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                self.acc(grads, *a, g.permute(&inv).expect("inverse permutation"));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                let fill = g.data()[0] / v.len() as f64;
                self.acc(grads, *a, Tensor::full(v.shape().to_vec(), fill));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let dst = (o * n + k) * inner;
                        d[dst..dst + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc(grads, *a, Tensor::from_parts(shape, d));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let l = *out_shape.last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(l).zip(y.chunks(l)).zip(g.data().chunks(l)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for k in 0..l {
                        drow[k] = yrow[k] * (grow[k] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(out_shape.to_vec(), d));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *out_shape.last().unwrap();
                let gd = g.data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for k in 0..d {
                            dg[k] += grow[k] * hrow[k];
                            db[k] += grow[k];
                        }
                    }
                    self.acc(grads, *gain, Tensor::from_parts(vec![d], dg));
                    self.acc(grads, *bias, Tensor::from_parts(vec![d], db));
                }
                if self.rg(*x) {
                    let gamma = self.value(*gain).data();
                    let mut dx = vec![0.0; gd.len()];
                    for (r, (grow, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for k in 0..d {
                            let dh = grow[k] * gamma[k];
                            s1 += dh;
                            s2 += dh * hrow[k];
                        }
                        let inv = inv_std[r];
                        for k in 0..d {
                            let dh = grow[k] * gamma[k];
                            dx[r * d + k] = inv / d as f64 * (d as f64 * dh - s1 - hrow[k] * s2);
                        }
                    }
                    self.acc(grads, *x, Tensor::from_parts(out_shape.to_vec(), dx));
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let len = out_shape[*axis];
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, Tensor::from_parts(shape, d));
            }
            Op::GatherRows { table, ids } => {
                let shape = self.shape(*table).to_vec();
                let dd = shape[1];
                let mut d = vec![0.0; shape[0] * dd];
                for (r, &id) in ids.iter().enumerate() {
                    for k in 0..dd {
                        d[id * dd + k] += g.data()[r * dd + k];
                    }
                }
                self.acc(grads, *table, Tensor::from_parts(shape, d));
            }
        }
    }

    fn backward_matmul(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let (p, q, r) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ad, bd, gd) = (ta.data(), tb.data(), g.data());
        if sb.len() == 2 {
            let rows = ta.len() / q;
            if self.rg(a) {
                let mut da = vec![0.0; rows * q];
                let block = 32;
                for_each_chunk(&mut da, block * q, block * q * r, |c, chunk| {
                    let m = chunk.len() / q;
                    gemm_nt(&gd[c * block * r..(c * block + m) * r], bd, chunk, m, q, r);
                });
                self.acc(grads, a, Tensor::from_parts(sa.to_vec(), da));
            }
            if self.rg(b) {
                let mut db = vec![0.0; q * r];
                for_each_chunk(&mut db, r, rows * r, |k, row| gemm_tn_rows(ad, gd, row, k, rows, q, r));
                self.acc(grads, b, Tensor::from_parts(sb.to_vec(), db));
            }
            return;
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let bo = broadcast_shape(ba, bb).expect("checked in forward");
        let oa = broadcast_offsets(&bo, ba);
        let ob = broadcast_offsets(&bo, bb);
        if self.rg(a) {
            let mut da = vec![0.0; ta.len()];
            if ba == bo.as_slice() {
                for_each_chunk(&mut da, p * q, p * q * r, |i, chunk| {
                    let ib = ob[i] * q * r;
                    gemm_nt(&gd[i * p * r..(i + 1) * p * r], &bd[ib..ib + q * r], chunk, p, q, r);
                });
            } else {
                for i in 0..oa.len() {
                    let (ia, ib) = (oa[i] * p * q, ob[i] * q * r);
                    gemm_nt(&gd[i * p * r..(i + 1) * p * r], &bd[ib..ib + q * r], &mut da[ia..ia + p * q], p, q, r);
                }
            }
            self.acc(grads, a, Tensor::from_parts(sa.to_vec(), da));
        }
        if self.rg(b) {
            let mut db = vec![0.0; tb.len()];
            if bb == bo.as_slice() {
                for_each_chunk(&mut db, q * r, p * q * r, |i, chunk| {
                    let ia = oa[i] * p * q;
                    gemm_tn_rows(&ad[ia..ia + p * q], &gd[i * p * r..(i + 1) * p * r], chunk, 0, p, q, r);
                });
            } else {
                for i in 0..ob.len() {
                    let (ia, ib) = (oa[i] * p * q, ob[i] * q * r);
                    gemm_tn_rows(&ad[ia..ia + p * q], &gd[i * p * r..(i + 1) * p * r], &mut db[ib..ib + q * r], 0, p, q, r);
                }
            }
            self.acc(grads, b, Tensor::from_parts(sb.to_vec(), db));
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    /// Accumulates `f(g)` into `v`, summing over axes that `v` was broadcast along.
    fn acc_reduced(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, out_shape: &[usize], f: impl Fn(f64) -> f64) {
        if !self.rg(v) {
            return;
        }
        let in_shape = self.shape(v).to_vec();
        let n_in: usize = in_shape.iter().product();
        let plan = plan_broadcast(out_shape, &in_shape);
        let mut d = vec![0.0; n_in];
        match plan {
            BroadcastPlan::Same => {
                for (o, &gv) in d.iter_mut().zip(g.data()) {
                    *o = f(gv);
                }
            }
            BroadcastPlan::Cyclic(per) => {
                for chunk in g.data().chunks(per) {
                    for (o, &gv) in d.iter_mut().zip(chunk) {
                        *o += f(gv);
                    }
                }
            }
            BroadcastPlan::General(offs) => {
                for (&o, &gv) in offs.iter().zip(g.data()) {
                    d[o] += f(gv);
                }
            }
        }
        self.acc(grads, v, Tensor::from_parts(in_shape, d));
    }
}

fn offsets(plan: &BroadcastPlan, out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    match plan {
        BroadcastPlan::Same => (0..n).collect(),
        BroadcastPlan::Cyclic(per) => (0..n).map(|i| i % per).collect(),
        BroadcastPlan::General(o) => o.clone(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = strides_of(shape)[axis];
    (outer, shape[axis], inner)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
