use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{as_matrix, Tensor};
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    RowScale(usize, usize),
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Rotary { x: usize, pos: Vec<usize>, heads: usize },
    Attention { q: usize, k: usize, v: usize, q_pos: Vec<usize>, k_pos: Vec<usize>, heads: usize, probs: Vec<f64> },
    GatherRows { src: usize, idx: Vec<usize> },
    MergeRows { base: usize, upd: usize, idx: Vec<usize> },
    ConcatRows(Vec<usize>),
    Column { x: usize, col: usize },
    Reshape(usize),
    Sum(usize),
    Nll { logits: usize, picks: Vec<(usize, usize, f64)>, probs: Vec<f64> },
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], j: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[j].requires_grad {
        return;
    }
    let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: impl Iterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops. Values are computed eagerly; backward
/// information is kept only for nodes that depend on a gradient-carrying leaf.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grad_enabled: bool,
    backward_done: bool,
}

/// Result of a backward pass: gradients for every gradient-carrying leaf.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    leaves: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::variable`] or [`Tape::param`].
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get(v.idx).and_then(|g| g.as_deref())
    }

    /// `(param slot, gradient)` pairs in recording order.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.params.iter().filter_map(move |&(slot, idx)| {
            self.leaves[idx].as_deref().map(|g| (slot, g))
        })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "var from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(v.idx)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.backward_done = false;
        let idx = self.nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, idx }
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(t, Op::Leaf, rg)
    }

    /// A model parameter identified by its slot in a parameter store.
    pub fn param(&mut self, slot: usize, t: &Tensor) -> Var {
        let rg = self.grad_enabled;
        let mut v = t.clone();
        v.zero_grad();
        self.push(v, Op::Param(slot), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (m, k) = as_matrix(&self.nodes[ia].value)?;
        let (k2, n) = as_matrix(&self.nodes[ib].value)?;
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.nodes[ia].value.shape(),
                self.nodes[ib].value.shape()
            ));
        }
        let data = kernels::matmul(self.nodes[ia].value.data(), self.nodes[ib].value.data(), m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(ia, ib), rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return shape_err(format!("elementwise op on {:?} and {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::new(va.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(t, Op::Mul(ia, ib), rg))
    }

    /// `x[m x n] + b[n]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let n = vx.cols();
        if vb.numel() != n {
            return shape_err(format!("bias of {} values for rows of width {n}", vb.numel()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(vb.data()) {
                *v += bb;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(ix) || self.rg(ib);
        Ok(self.push(t, Op::AddRow(ix, ib), rg))
    }

    /// `x * w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Scale(ix, c), rg))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.check(x)?, self.check(s)?);
        let (vx, vs) = (&self.nodes[ix].value, &self.nodes[is].value);
        let n = vx.cols();
        if vs.numel() != vx.rows() {
            return shape_err(format!("{} row scales for {} rows", vs.numel(), vx.rows()));
        }
        let mut data = vx.data().to_vec();
        for (row, &sv) in data.chunks_mut(n).zip(vs.data()) {
            for v in row.iter_mut() {
                *v *= sv;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(ix) || self.rg(is);
        Ok(self.push(t, Op::RowScale(ix, is), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Result<(usize, Tensor)> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        Ok((ix, Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (ix, t) = self.unary(x, kernels::sigmoid)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Sigmoid(ix), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (ix, t) = self.unary(x, |a| a.max(0.0))?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Relu(ix), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (ix, t) = self.unary(x, kernels::gelu)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Gelu(ix), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if axis >= v.shape().len() {
            return shape_err(format!("softmax axis {axis} on shape {:?}", v.shape()));
        }
        let t = Tensor::new(v.shape().to_vec(), kernels::softmax_axis(v.data(), v.shape(), axis))?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Softmax { x: ix, axis }, rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (vx, vg, vb) = (&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value);
        let n = vx.cols();
        if n < 2 {
            return shape_err("layer_norm needs a last axis of length >= 2");
        }
        if vg.numel() != n || vb.numel() != n {
            return shape_err("layer_norm gain/bias width mismatch");
        }
        let (y, xhat, rstd) = kernels::layer_norm(vx.data(), n, vg.data(), vb.data(), eps);
        let t = Tensor::new(vx.shape().to_vec(), y)?;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        let op = if rg {
            Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, rstd }
        } else {
            Op::Leaf
        };
        Ok(self.push(t, op, rg))
    }

    /// Rotary position phase on `[t x d]` rows split into `heads` heads.
    pub fn rotary(&mut self, x: Var, pos: &[usize], heads: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let d = v.cols();
        if heads == 0 || !d.is_multiple_of(heads) || !(d / heads).is_multiple_of(2) {
            return shape_err(format!("rotary needs an even head width; d={d}, heads={heads}"));
        }
        if pos.len() != v.rows() {
            return shape_err("rotary position count mismatch");
        }
        let t = Tensor::new(v.shape().to_vec(), kernels::rotary(v.data(), d, pos, heads, 1.0))?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Rotary { x: ix, pos: pos.to_vec(), heads }, rg))
    }

    /// Causal multi-head attention: query `i` sees keys with `k_pos <= q_pos[i]`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_pos: &[usize],
        k_pos: &[usize],
        heads: usize,
    ) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (vq, vk, vv) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        let d = vq.cols();
        if vk.cols() != d || vv.cols() != d || vk.rows() != vv.rows() {
            return shape_err("attention q/k/v width or key count mismatch");
        }
        if q_pos.len() != vq.rows() || k_pos.len() != vk.rows() {
            return shape_err("attention position count mismatch");
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("{heads} heads do not divide width {d}"));
        }
        if k_pos.windows(2).any(|w| w[0] >= w[1]) {
            return shape_err("attention key positions must be strictly ascending");
        }
        let rg = self.rg(iq) || self.rg(ik) || self.rg(iv);
        let (out, probs) =
            kernels::attention(vq.data(), vk.data(), vv.data(), d, q_pos, k_pos, heads, rg);
        let t = Tensor::new(vec![q_pos.len(), d], out)?;
        let op = Op::Attention {
            q: iq,
            k: ik,
            v: iv,
            q_pos: q_pos.to_vec(),
            k_pos: k_pos.to_vec(),
            heads,
            probs,
        };
        Ok(self.push(t, op, rg))
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let is = self.check(src)?;
        let t = self.nodes[is].value.select_rows(idx)?;
        let rg = self.rg(is);
        Ok(self.push(t, Op::GatherRows { src: is, idx: idx.to_vec() }, rg))
    }

    /// Copy of `base` whose rows `idx[r]` are replaced by row `r` of `upd`.
    pub fn merge_rows(&mut self, base: Var, upd: Var, idx: &[usize]) -> Result<Var> {
        let (ib, iu) = (self.check(base)?, self.check(upd)?);
        let (vb, vu) = (&self.nodes[ib].value, &self.nodes[iu].value);
        let c = vb.cols();
        if vu.cols() != c || vu.rows() != idx.len() {
            return shape_err("merge_rows update shape mismatch");
        }
        let mut seen = vec![false; vb.rows()];
        for &i in idx {
            if i >= vb.rows() || seen[i] {
                return Err(Error::Index(format!("merge_rows index {i} invalid or repeated")));
            }
            seen[i] = true;
        }
        let mut data = vb.data().to_vec();
        for (r, &i) in idx.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(vu.row(r));
        }
        let t = Tensor::new(vb.shape().to_vec(), data)?;
        let rg = self.rg(ib) || self.rg(iu);
        Ok(self.push(t, Op::MergeRows { base: ib, upd: iu, idx: idx.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut ids = Vec::with_capacity(parts.len());
        for &p in parts {
            ids.push(self.check(p)?);
        }
        let Some(&first) = ids.first() else {
            return shape_err("concat_rows of nothing");
        };
        let c = self.nodes[first].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &ids {
            let v = &self.nodes[i].value;
            if v.cols() != c {
                return shape_err("concat_rows width mismatch");
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = ids.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(ids), rg))
    }

    /// Column `col` of a matrix as an `[m x 1]` tensor.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let n = v.cols();
        if col >= n {
            return Err(Error::Index(format!("column {col} of width {n}")));
        }
        let data: Vec<f64> = v.data().chunks(n).map(|r| r[col]).collect();
        let t = Tensor::new(vec![data.len(), 1], data)?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Column { x: ix, col }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.nodes[ix].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(ix);
        Ok(self.push(t, Op::Reshape(ix), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        let rg = self.rg(ix);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), rg))
    }

    /// `sum_k weight_k * (-log softmax(logits[row_k])[target_k])`.
    pub fn nll(&mut self, logits: Var, picks: &[(usize, usize, f64)]) -> Result<Var> {
        let il = self.check(logits)?;
        let v = &self.nodes[il].value;
        let (rows, vocab) = (v.rows(), v.cols());
        let rg = self.rg(il);
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(if rg { picks.len() * vocab } else { 0 });
        for &(r, target, w) in picks {
            if r >= rows {
                return Err(Error::Index(format!("logit row {r} of {rows}")));
            }
            if target >= vocab {
                return Err(Error::Index(format!("target {target} outside vocabulary of {vocab}")));
            }
            let row = v.row(r);
            let lse = kernels::log_sum_exp(row);
            total += w * (lse - row[target]);
            if rg {
                probs.extend(row.iter().map(|x| (x - lse).exp()));
            }
        }
        let op = Op::Nll { logits: il, picks: picks.to_vec(), probs };
        Ok(self.push(Tensor::scalar(total), op, rg))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.nll(logits, &[(0, target, 1.0)])
    }

    /// Reverse pass from a scalar `loss`. Each tape supports one backward per
    /// forward; recording a new op re-arms it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Tape("loss is detached from this tape".into()));
        }
        if !self.grad_enabled {
            return Err(Error::Tape("backward on an inference-only tape".into()));
        }
        if self.backward_done {
            return Err(Error::Tape("backward already ran; record a new forward first".into()));
        }
        if self.nodes[loss.idx].value.numel() != 1 {
            return shape_err("backward needs a scalar loss");
        }
        self.backward_done = true;

        let n = loss.idx + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.idx].requires_grad {
            grads[loss.idx] = Some(vec![1.0]);
        }
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params = Vec::new();

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Leaf | Op::Param(_) => {
                    let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    if let Op::Param(slot) = node.op {
                        params.push((slot, i));
                    }
                    leaves[i] = Some(g);
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        // Leaves recorded after the loss cannot influence it.
        for (i, node) in self.nodes.iter().enumerate().skip(n) {
            if node.requires_grad && matches!(node.op, Op::Leaf | Op::Param(_)) {
                if let Op::Param(slot) = node.op {
                    params.push((slot, i));
                }
                leaves[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        params.reverse();
        Ok(Gradients { tape: self.id, leaves, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($j:expr, |$dst:ident| $body:block) => {
                accumulate(nodes, grads, $j, |$dst: &mut [f64]| $body)
            };
        }
        let val = |j: usize| &nodes[j].value;
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(val(*a)).expect("validated");
                let n = val(*b).cols();
                with_grad!(*a, |da| {
                    kernels::matmul_nt_acc(g, val(*b).data(), m, k, n, da);
                });
                with_grad!(*b, |db| {
                    kernels::matmul_tn_acc(val(*a).data(), g, m, k, n, db);
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |da| { add_into(da, g.iter().copied()); });
                with_grad!(*b, |db| { add_into(db, g.iter().copied()); });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |da| { add_into(da, g.iter().copied()); });
                with_grad!(*b, |db| { add_into(db, g.iter().map(|x| -x)); });
            }
            Op::Mul(a, b) => {
                with_grad!(*a, |da| {
                    add_into(da, g.iter().zip(val(*b).data()).map(|(x, y)| x * y));
                });
                with_grad!(*b, |db| {
                    add_into(db, g.iter().zip(val(*a).data()).map(|(x, y)| x * y));
                });
            }
            Op::AddRow(x, b) => {
                let n = val(*x).cols();
                with_grad!(*x, |dx| { add_into(dx, g.iter().copied()); });
                with_grad!(*b, |db| {
                    for row in g.chunks(n) {
                        add_into(db, row.iter().copied());
                    }
                });
            }
            Op::Scale(x, c) => {
                with_grad!(*x, |dx| { add_into(dx, g.iter().map(|v| v * c)); });
            }
            Op::RowScale(x, s) => {
                let n = val(*x).cols();
                let sv = val(*s).data();
                with_grad!(*x, |dx| {
                    for (r, (drow, grow)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        add_into(drow, grow.iter().map(|v| v * sv[r]));
                    }
                });
                with_grad!(*s, |ds| {
                    let xv = val(*x).data();
                    for (r, d) in ds.iter_mut().enumerate() {
                        *d += kernels::dot(&g[r * n..(r + 1) * n], &xv[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                with_grad!(*x, |dx| {
                    add_into(dx, g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)));
                });
            }
            Op::Relu(x) => {
                with_grad!(*x, |dx| {
                    add_into(
                        dx,
                        g.iter().zip(val(*x).data()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }),
                    );
                });
            }
            Op::Gelu(x) => {
                with_grad!(*x, |dx| {
                    add_into(dx, g.iter().zip(val(*x).data()).map(|(gv, xv)| gv * kernels::gelu_grad(*xv)));
                });
            }
            Op::Softmax { x, axis } => {
                with_grad!(*x, |dx| {
                    let shape = out.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let n = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let y = out.data();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + ii;
                            let s: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = val(*x).cols();
                let gv = val(*gain).data();
                with_grad!(*gain, |dg| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        add_into(dg, grow.iter().zip(hrow).map(|(a, b)| a * b));
                    }
                });
                with_grad!(*bias, |db| {
                    for grow in g.chunks(n) {
                        add_into(db, grow.iter().copied());
                    }
                });
                with_grad!(*x, |dx| {
                    let mut dh = vec![0.0; n];
                    for r in 0..rstd.len() {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        for c in 0..n {
                            dh[c] = grow[c] * gv[c];
                        }
                        let m1 = dh.iter().sum::<f64>() / n as f64;
                        let m2 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            dx[r * n + c] += rstd[r] * (dh[c] - m1 - hrow[c] * m2);
                        }
                    }
                });
            }
            Op::Rotary { x, pos, heads } => {
                with_grad!(*x, |dx| {
                    let d = out.cols();
                    add_into(dx, kernels::rotary(g, d, pos, *heads, -1.0).into_iter());
                });
            }
            Op::Attention { q, k, v, q_pos, k_pos, heads, probs } => {
                let d = out.cols();
                let tq = q_pos.len();
                let tk = k_pos.len();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                let mut ds = vec![0.0; tk];
                for i in 0..tq {
                    let nvis = kernels::visible_keys(k_pos, q_pos[i]);
                    for h in 0..*heads {
                        let p = &probs[(h * tq + i) * tk..(h * tq + i) * tk + nvis];
                        let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
                        let mut s = 0.0;
                        for j in 0..nvis {
                            let vh = &vv[j * d + h * dh..j * d + (h + 1) * dh];
                            let dp = kernels::dot(go, vh);
                            ds[j] = dp;
                            s += dp * p[j];
                            let dvh = &mut dv[j * d + h * dh..j * d + (h + 1) * dh];
                            for (a, &b) in dvh.iter_mut().zip(go) {
                                *a += p[j] * b;
                            }
                        }
                        let qh = &qv[i * d + h * dh..i * d + (h + 1) * dh];
                        for j in 0..nvis {
                            let dsj = p[j] * (ds[j] - s) * scale;
                            if dsj == 0.0 {
                                continue;
                            }
                            let kh = &kv[j * d + h * dh..j * d + (h + 1) * dh];
                            let dqh = &mut dq[i * d + h * dh..i * d + (h + 1) * dh];
                            for (a, &b) in dqh.iter_mut().zip(kh) {
                                *a += dsj * b;
                            }
                            let dkh = &mut dk[j * d + h * dh..j * d + (h + 1) * dh];
                            for (a, &b) in dkh.iter_mut().zip(qh) {
                                *a += dsj * b;
                            }
                        }
                    }
                }
                with_grad!(*q, |t| { add_into(t, dq.iter().copied()); });
                with_grad!(*k, |t| { add_into(t, dk.iter().copied()); });
                with_grad!(*v, |t| { add_into(t, dv.iter().copied()); });
            }
            Op::GatherRows { src, idx } => {
                let c = out.cols();
                with_grad!(*src, |ds| {
                    for (r, &si) in idx.iter().enumerate() {
                        add_into(&mut ds[si * c..(si + 1) * c], g[r * c..(r + 1) * c].iter().copied());
                    }
                });
            }
            Op::MergeRows { base, upd, idx } => {
                let c = out.cols();
                with_grad!(*base, |db| {
                    let mut gb = g.to_vec();
                    for &i in idx {
                        gb[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                    }
                    add_into(db, gb.into_iter());
                });
                with_grad!(*upd, |du| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut du[r * c..(r + 1) * c], g[i * c..(i + 1) * c].iter().copied());
                    }
                });
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &j in ids {
                    let len = val(j).numel();
                    with_grad!(j, |dj| { add_into(dj, g[off..off + len].iter().copied()); });
                    off += len;
                }
            }
            Op::Column { x, col } => {
                let n = val(*x).cols();
                with_grad!(*x, |dx| {
                    for (r, gv) in g.iter().enumerate() {
                        dx[r * n + col] += gv;
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |dx| { add_into(dx, g.iter().copied()); });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                with_grad!(*x, |dx| { dx.iter_mut().for_each(|v| *v += g0); });
            }
            Op::Nll { logits, picks, probs } => {
                let vocab = val(*logits).cols();
                let g0 = g[0];
                with_grad!(*logits, |dl| {
                    for (kk, &(r, target, w)) in picks.iter().enumerate() {
                        let p = &probs[kk * vocab..(kk + 1) * vocab];
                        let drow = &mut dl[r * vocab..(r + 1) * vocab];
                        for (c, (dv, pv)) in drow.iter_mut().zip(p).enumerate() {
                            let onehot = if c == target { 1.0 } else { 0.0 };
                            *dv += g0 * w * (pv - onehot);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.input(Tensor::scalar(4.0));
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
        let z = tape.scale(y, 2.0).unwrap();
        assert!(tape.backward(z).is_ok());
    }

    #[test]
    fn detached_loss_is_an_error() {
        let mut other = Tape::new();
        let foreign = other.variable(Tensor::scalar(1.0));
        let mut tape = Tape::new();
        tape.variable(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(foreign), Err(Error::Tape(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::inference();
        let u = tape.input(Tensor::vector(vec![0.0; 4]));
        let l = tape.cross_entropy(u, 2).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-15);
        let z = tape.input(Tensor::vector(vec![1f64.ln(), 3f64.ln()]));
        let l = tape.cross_entropy(z, 0).unwrap();
        assert!((tape.value(l).item().unwrap() + 0.25f64.ln()).abs() < 1e-15);
        let sharp = tape.input(Tensor::vector(vec![-40.0, 40.0, -40.0]));
        let l = tape.cross_entropy(sharp, 1).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-30);
        assert!(matches!(tape.cross_entropy(sharp, 3), Err(Error::Index(_))));
    }
}
