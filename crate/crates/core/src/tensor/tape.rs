use std::rc::Rc;

use super::kernels::{col2im, im2col, mm_nn, mm_nt, mm_tn};
use super::Tensor;
use crate::error::{contract, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast2(Var),
    SwapAxes12(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x + b`, with `b`'s shape matching `x.shape[axis..axis + b.rank]`.
    AddBcast(Var, Var, usize),
    MulBcast(Var, Var, usize),
    Relu(Var),
    Softmax(Var),
    MeanAxis(Var, usize),
    Sum(Var),
    Mean(Var),
    SumAbs(Var),
    /// Saved softmax probabilities live in the node's `saved` slot.
    CrossEntropy(Var, Rc<[usize]>),
    /// Saved im2col matrix lives in the node's `saved` slot.
    Conv2d(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    saved: Option<Vec<f64>>,
}

/// Record of primitive applications for one forward pass.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order and the backward sweep simply walks the node list from the end.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Accumulates the gradient of each `vars[i]` into `tensors[i]`.
    pub fn write_into<'a>(
        &mut self,
        tensors: impl IntoIterator<Item = &'a mut Tensor>,
        vars: &[Var],
    ) -> Result<()> {
        for (t, &v) in tensors.into_iter().zip(vars) {
            if !t.requires_grad() {
                continue;
            }
            match self.take(v) {
                Some(g) => t.accumulate_grad(&g)?,
                // Unreachable parameter: its gradient is identically zero.
                None => t.accumulate_grad(&vec![0.0; t.len()])?,
            }
        }
        Ok(())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad, saved: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shapes are consistent")
    }

    /// Records `t` as a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(shape_err("constant", format!("shape {shape:?} with {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// A leaf that receives a gradient, independent of any [`Tensor`].
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(shape_err("variable", format!("shape {shape:?} with {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, true))
    }

    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `[B,m,k] × [B,k,n] → [B,m,n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bt {
            mm_nn(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![bt, m, n], out, Op::BatchMatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose_last2", format!("{s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(self.value(x), r, c);
        let mut shape = s;
        let k = shape.len();
        shape.swap(k - 2, k - 1);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::TransposeLast2(x), rg))
    }

    /// `[a,b,c,d] → [a,c,b,d]`
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("swap_axes12", format!("{s:?}")));
        }
        let out = swap12(self.value(x), s[0], s[1], s[2], s[3]);
        let rg = self.rg(x);
        Ok(self.push(vec![s[0], s[2], s[1], s[3]], out, Op::SwapAxes12(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    /// `x + b` where `b` spans axes `axis..axis + rank(b)` of `x` and is
    /// broadcast over all remaining axes.
    pub fn add_bcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (outer, mid, inner) = self.bcast_dims("add_bcast", x, b, axis)?;
        let (vx, vb) = (self.value(x), self.value(b));
        let mut out = vec![0.0; vx.len()];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let bm = vb[m];
                for i in 0..inner {
                    out[base + i] = vx[base + i] + bm;
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBcast(x, b, axis), rg))
    }

    /// `x ⊙ s` with the same broadcasting rule as [`Tape::add_bcast`].
    pub fn mul_bcast(&mut self, x: Var, s: Var, axis: usize) -> Result<Var> {
        let (outer, mid, inner) = self.bcast_dims("mul_bcast", x, s, axis)?;
        let (vx, vs) = (self.value(x), self.value(s));
        let mut out = vec![0.0; vx.len()];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let sm = vs[m];
                for i in 0..inner {
                    out[base + i] = vx[base + i] * sm;
                }
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulBcast(x, s, axis), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let c = *s.last().expect("tensors have rank >= 1");
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(s, out, Op::Softmax(x), rg)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(shape_err("mean_axis", format!("axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let vx = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &vx[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::MeanAxis(x, axis), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![v], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let v = vx.iter().sum::<f64>() / vx.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![v], Op::Mean(x), rg)
    }

    /// `Σ|x|`, used for L1 penalties.
    pub fn sum_abs(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|v| v.abs()).sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![v], Op::SumAbs(x), rg)
    }

    /// Mean softmax cross-entropy of `logits[B,K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(shape_err("cross_entropy", format!("label {bad} with {k} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        let v = self.push(vec![1], vec![loss], Op::CrossEntropy(logits, labels.into()), rg);
        self.nodes[v.0].saved = Some(probs);
        Ok(v)
    }

    /// Stride-1 "same" cross-correlation: `x[B,Ci,H,W] ⋆ w[Co,Ci,k,k] → [B,Co,H,W]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(shape_err("conv2d", format!("input {sx:?} kernel {sw:?}")));
        }
        let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[0], sw[2]);
        let cols = im2col(self.value(x), b, ci, h, wd, k);
        let ck = ci * k * k;
        let hw = h * wd;
        // [B*HW, Co] = cols · wᵀ
        let mut om = vec![0.0; b * hw * co];
        mm_nt(&cols, self.value(w), &mut om, b * hw, ck, co);
        let mut out = vec![0.0; b * co * hw];
        for bi in 0..b {
            for p in 0..hw {
                let src = &om[(bi * hw + p) * co..(bi * hw + p + 1) * co];
                for (c, &v) in src.iter().enumerate() {
                    out[(bi * co + c) * hw + p] = v;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        let v = self.push(vec![b, co, h, wd], out, Op::Conv2d(x, w), rg);
        if rg {
            self.nodes[v.0].saved = Some(cols);
        }
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn bcast_dims(&self, op: &'static str, x: Var, b: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if axis + sb.len() > sx.len() || sx[axis..axis + sb.len()] != *sb {
            return Err(shape_err(op, format!("{sb:?} does not match {sx:?} at axis {axis}")));
        }
        Ok((
            sx[..axis].iter().product(),
            numel(sb),
            sx[axis + sb.len()..].iter().product(),
        ))
    }

    /// Back-propagates from the scalar `loss`, consuming the tape. Leaf
    /// gradients are retained; intermediate ones are dropped once used.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.backward_retaining(loss, &[])
    }

    /// Like [`Tape::backward`] but also retains gradients of the listed
    /// intermediate values.
    pub fn backward_retaining(self, loss: Var, keep: &[Var]) -> Result<Gradients> {
        if self.nodes.get(loss.0).map(|n| n.value.len()) != Some(1) {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes.get(loss.0).map(|n| n.shape.clone())
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) || keep.iter().any(|k| k.0 == idx) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn transpose_blocks(v: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (blk, src) in v.chunks(r * c).enumerate() {
        let dst = &mut out[blk * r * c..(blk + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn swap12(v: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&v[src..src + d]);
            }
        }
    }
    out
}

fn accum(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    let shp = |v: Var| nodes[v.0].shape.as_slice();
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k, n) = (shp(a)[0], shp(a)[1], shp(b)[1]);
            if rg(a) {
                let mut da = vec![0.0; m * k];
                mm_nt(g, val(b), &mut da, m, n, k);
                accum(grads, nodes, a, da);
            }
            if rg(b) {
                let mut db = vec![0.0; k * n];
                mm_tn(val(a), g, &mut db, k, m, n);
                accum(grads, nodes, b, db);
            }
        }
        &Op::BatchMatMul(a, b) => {
            let (bt, m, k, n) = (shp(a)[0], shp(a)[1], shp(a)[2], shp(b)[2]);
            if rg(a) {
                let mut da = vec![0.0; bt * m * k];
                for i in 0..bt {
                    mm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &val(b)[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accum(grads, nodes, a, da);
            }
            if rg(b) {
                let mut db = vec![0.0; bt * k * n];
                for i in 0..bt {
                    mm_tn(
                        &val(a)[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut db[i * k * n..(i + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                accum(grads, nodes, b, db);
            }
        }
        &Op::TransposeLast2(x) => {
            let s = shp(x);
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            // Gradient is the transpose of g, whose trailing block is c×r.
            accum(grads, nodes, x, transpose_blocks(g, c, r));
        }
        &Op::SwapAxes12(x) => {
            let s = &node.shape;
            accum(grads, nodes, x, swap12(g, s[0], s[1], s[2], s[3]));
        }
        &Op::Reshape(x) => accum(grads, nodes, x, g.to_vec()),
        &Op::Add(a, b) => {
            accum(grads, nodes, a, g.to_vec());
            accum(grads, nodes, b, g.to_vec());
        }
        &Op::Mul(a, b) => {
            if rg(a) {
                accum(grads, nodes, a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
            }
            if rg(b) {
                accum(grads, nodes, b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
            }
        }
        &Op::Scale(x, c) => accum(grads, nodes, x, g.iter().map(|v| v * c).collect()),
        &Op::AddBcast(x, b, axis) => {
            accum(grads, nodes, x, g.to_vec());
            if rg(b) {
                let (outer, mid, inner) = bcast_split(shp(x), shp(b), axis);
                let mut db = vec![0.0; mid];
                for o in 0..outer {
                    for (m, d) in db.iter_mut().enumerate() {
                        let base = (o * mid + m) * inner;
                        *d += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                accum(grads, nodes, b, db);
            }
        }
        &Op::MulBcast(x, s, axis) => {
            let (outer, mid, inner) = bcast_split(shp(x), shp(s), axis);
            let (vx, vs) = (val(x), val(s));
            if rg(x) {
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[base + i] * vs[m];
                        }
                    }
                }
                accum(grads, nodes, x, dx);
            }
            if rg(s) {
                let mut ds = vec![0.0; mid];
                for o in 0..outer {
                    for (m, d) in ds.iter_mut().enumerate() {
                        let base = (o * mid + m) * inner;
                        *d += g[base..base + inner]
                            .iter()
                            .zip(&vx[base..base + inner])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                accum(grads, nodes, s, ds);
            }
        }
        &Op::Relu(x) => {
            let dx = g.iter().zip(val(x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
            accum(grads, nodes, x, dx);
        }
        &Op::Softmax(x) => {
            let c = *node.shape.last().expect("rank >= 1");
            let mut dx = vec![0.0; g.len()];
            for ((gr, yr), dr) in g.chunks(c).zip(node.value.chunks(c)).zip(dx.chunks_mut(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - dot);
                }
            }
            accum(grads, nodes, x, dx);
        }
        &Op::MeanAxis(x, axis) => {
            let s = shp(x);
            let outer: usize = s[..axis].iter().product();
            let len = s[axis];
            let inner: usize = s[axis + 1..].iter().product();
            let inv = 1.0 / len as f64;
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for a in 0..len {
                    let dst = &mut dx[(o * len + a) * inner..(o * len + a + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, v)| *d = v * inv);
                }
            }
            accum(grads, nodes, x, dx);
        }
        &Op::Sum(x) => accum(grads, nodes, x, vec![g[0]; val(x).len()]),
        &Op::Mean(x) => {
            let n = val(x).len();
            accum(grads, nodes, x, vec![g[0] / n as f64; n]);
        }
        &Op::SumAbs(x) => {
            let dx = val(x).iter().map(|&v| g[0] * sign(v)).collect();
            accum(grads, nodes, x, dx);
        }
        Op::CrossEntropy(logits, labels) => {
            let probs = node.saved.as_ref().expect("cross entropy saves probabilities");
            let k = shp(*logits)[1];
            let b = labels.len() as f64;
            let mut dx = probs.clone();
            for (row, &y) in dx.chunks_mut(k).zip(labels.iter()) {
                row[y] -= 1.0;
                row.iter_mut().for_each(|v| *v *= g[0] / b);
            }
            accum(grads, nodes, *logits, dx);
        }
        &Op::Conv2d(x, w) => {
            let cols = node.saved.as_ref().expect("conv saves im2col buffer");
            let (sx, sw) = (shp(x), shp(w));
            let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (co, k) = (sw[0], sw[2]);
            let hw = h * wd;
            let ck = ci * k * k;
            let mut gm = vec![0.0; b * hw * co];
            for bi in 0..b {
                for c in 0..co {
                    let src = &g[(bi * co + c) * hw..(bi * co + c + 1) * hw];
                    for (p, &v) in src.iter().enumerate() {
                        gm[(bi * hw + p) * co + c] = v;
                    }
                }
            }
            if rg(w) {
                let mut dw = vec![0.0; co * ck];
                mm_tn(&gm, cols, &mut dw, co, b * hw, ck);
                accum(grads, nodes, w, dw);
            }
            if rg(x) {
                let mut dcols = vec![0.0; b * hw * ck];
                mm_nn(&gm, val(w), &mut dcols, b * hw, co, ck);
                let mut dx = vec![0.0; b * ci * hw];
                col2im(&dcols, &mut dx, b, ci, h, wd, k);
                accum(grads, nodes, x, dx);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn bcast_split(sx: &[usize], sb: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        sx[..axis].iter().product(),
        numel(sb),
        sx[axis + sb.len()..].iter().product(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_and_softmax_definitions() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
        let z = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let s = tape.softmax(z);
        for &p in tape.value(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_sum_gradient() {
        let x = t(vec![3], vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = t(vec![1, 2], vec![0.0, 0.0]);
        let mut tape = Tape::new();
        let zv = tape.leaf(&z);
        let loss = tape.cross_entropy(zv, &[0]).unwrap();
        assert!((tape.value(loss)[0] - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(zv).unwrap(), &[-0.5, 0.5]);
    }

    #[test]
    fn shape_errors_name_the_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = t(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        assert!(tape.backward(xv).is_err());
    }

    #[test]
    fn write_into_populates_grads() {
        let mut w = t(vec![2], vec![3.0, -1.0]);
        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        let l = tape.sum_abs(wv);
        let mut g = tape.backward(l).unwrap();
        g.write_into([&mut w], &[wv]).unwrap();
        assert_eq!(w.grad().unwrap(), &[1.0, -1.0]);
    }
}
