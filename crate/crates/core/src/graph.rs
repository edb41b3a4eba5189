//! Reverse-mode automatic differentiation over a fixed op set.
//!
//! A [`Graph`] is an eagerly-evaluated Wengert tape: every op computes its
//! value when recorded, and [`Graph::backward`] replays the tape in reverse,
//! accumulating gradients by summation at fan-out points. One graph is
//! single-threaded; independent graphs can run concurrently.
//!
//! Shape mismatches are contract violations and panic with both shapes in
//! the message. Numeric validity (no NaN/Inf on finite input) is checked
//! after every forward op when debug assertions are enabled.

use crate::tensor::{strides_for, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, #[allow(dead_code)] f64),
    MulScalar(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Matmul(NodeId, NodeId),
    SumAxis { x: NodeId, axis: usize, keepdim: bool },
    SumAll(NodeId),
    Softmax { x: NodeId, axis: usize },
    RmsNorm { x: NodeId, gain: NodeId, eps: f64 },
    Rope { x: NodeId, positions: Vec<usize>, base: f64 },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    Concat { axis: usize, parts: Vec<NodeId> },
    Slice { x: NodeId, axis: usize, start: usize, end: usize },
    Reshape(NodeId),
    Permute { x: NodeId, perm: Vec<usize> },
    Embed { table: NodeId, ids: Vec<usize> },
    CosineRows { a: NodeId, b: NodeId, eps: f64 },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sigmoid(..) => "sigmoid",
        Op::Matmul(..) => "matmul",
        Op::SumAxis { .. } => "sum_axis",
        Op::SumAll(..) => "sum_all",
        Op::Softmax { .. } => "softmax",
        Op::RmsNorm { .. } => "rms_norm",
        Op::Rope { .. } => "rope_apply",
        Op::Conv2d { .. } => "conv2d",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(..) => "reshape",
        Op::Permute { .. } => "permute",
        Op::Embed { .. } => "embed",
        Op::CosineRows { .. } => "cosine_rows",
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Eager computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Graph without the per-op finiteness panic; callers inspect
    /// [`Graph::first_non_finite`] instead.
    pub fn new_unchecked() -> Self {
        Graph { nodes: Vec::new(), check_finite: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// First node whose value is non-finite, with its op name.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, op_name(&n.op)))
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        if self.check_finite && !value.is_finite() {
            panic!("non-finite value produced by op `{}`", op_name(&op));
        }
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    // ----- leaves ---------------------------------------------------------

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar(v))
    }

    // ----- elementwise binary (broadcasting) ------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_forward(a, b, |x, y| x + y, "add");
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_forward(a, b, |x, y| x - y, "sub");
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_forward(a, b, |x, y| x * y, "mul");
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary_forward(a, b, |x, y| x / y, "div");
        self.push(Op::Div(a, b), v)
    }

    fn binary_forward(
        &self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        name: &str,
    ) -> Tensor {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).unwrap_or_else(|| {
            panic!("{name}: shapes {:?} and {:?} do not broadcast", ta.shape(), tb.shape())
        });
        let sa = bcast_strides(ta.shape(), &out_shape);
        let sb = bcast_strides(tb.shape(), &out_shape);
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut it = MultiIndex::new(&out_shape);
        for _ in 0..n {
            let (oa, ob) = (it.offset(&sa), it.offset(&sb));
            data.push(f(ta.data()[oa], tb.data()[ob]));
            it.step();
        }
        Tensor::new(out_shape, data)
    }

    // ----- elementwise unary ----------------------------------------------

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * c);
        self.push(Op::MulScalar(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(stable_sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    /// x * sigmoid(x), composed from primitives.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    // ----- matmul ----------------------------------------------------------

    /// 2-D or batched matrix product. Batch prefixes must match; a rank-2
    /// operand broadcasts over the other side's batch prefix.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let v = matmul_forward(ta, tb);
        self.push(Op::Matmul(a, b), v)
    }

    // ----- reductions ------------------------------------------------------

    pub fn sum_axis(&mut self, x: NodeId, axis: usize, keepdim: bool) -> NodeId {
        let t = &self.nodes[x].value;
        assert!(axis < t.rank(), "sum_axis: axis {} out of range for {:?}", axis, t.shape());
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += t.data()[base + i];
                }
            }
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let v = Tensor::new(shape, data);
        self.push(Op::SumAxis { x, axis, keepdim }, v)
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize, keepdim: bool) -> NodeId {
        let len = self.nodes[x].value.shape()[axis];
        let s = self.sum_axis(x, axis, keepdim);
        self.mul_scalar(s, 1.0 / len as f64)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.numel();
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    // ----- normalizations ---------------------------------------------------

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let t = &self.nodes[x].value;
        assert!(axis < t.rank(), "softmax: axis {} out of range for {:?}", axis, t.shape());
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut data = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(t.data()[at(l)]);
                }
                let mut z = 0.0;
                for l in 0..len {
                    let e = (t.data()[at(l)] - mx).exp();
                    data[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    data[at(l)] /= z;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), data);
        self.push(Op::Softmax { x, axis }, v)
    }

    /// RMS normalization over the last axis: `x * gain / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> NodeId {
        let (tx, tg) = (&self.nodes[x].value, &self.nodes[gain].value);
        let c = *tx.shape().last().expect("rms_norm: rank-0 input");
        assert!(c > 0, "rms_norm: empty last axis");
        assert_eq!(
            tg.shape(),
            &[c],
            "rms_norm: gain shape {:?} must be [{}] for input {:?}",
            tg.shape(),
            c,
            tx.shape()
        );
        let rows = tx.numel() / c;
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xs = &tx.data()[r * c..(r + 1) * c];
            let m = xs.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (m + eps).sqrt();
            for j in 0..c {
                data[r * c + j] = xs[j] * tg.data()[j] * inv;
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), data);
        self.push(Op::RmsNorm { x, gain, eps }, v)
    }

    // ----- positional rotation ----------------------------------------------

    /// Rotary position embedding. The first axis indexes positions, the last
    /// axis is rotated in consecutive pairs by `theta_j = pos * base^(-2j/d)`.
    pub fn rope(&mut self, x: NodeId, positions: &[usize], base: f64) -> NodeId {
        let t = &self.nodes[x].value;
        assert!(t.rank() >= 2, "rope_apply: need rank >= 2, got {:?}", t.shape());
        let d = *t.shape().last().unwrap();
        assert!(d % 2 == 0, "rope_apply: head dimension {} must be even", d);
        let n = t.shape()[0];
        assert_eq!(positions.len(), n, "rope_apply: {} positions for {} rows", positions.len(), n);
        let v = rope_transform(t, positions, base, false);
        self.push(Op::Rope { x, positions: positions.to_vec(), base }, v)
    }

    // ----- convolution -------------------------------------------------------

    /// 2-D convolution, NHWC layout, zero padding. `x`: [B,H,W,Ci],
    /// `w`: [KH,KW,Ci,Co]. Bias is a separate broadcast add.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let (tx, tw) = (&self.nodes[x].value, &self.nodes[w].value);
        assert_eq!(tx.rank(), 4, "conv2d: input must be [B,H,W,C], got {:?}", tx.shape());
        assert_eq!(tw.rank(), 4, "conv2d: kernel must be [KH,KW,Ci,Co], got {:?}", tw.shape());
        assert_eq!(
            tx.shape()[3],
            tw.shape()[2],
            "conv2d: channel mismatch between input {:?} and kernel {:?}",
            tx.shape(),
            tw.shape()
        );
        let v = conv2d_forward(tx, tw, stride, pad);
        self.push(Op::Conv2d { x, w, stride, pad }, v)
    }

    // ----- shape ops ----------------------------------------------------------

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat: no parts");
        let first = self.nodes[parts[0]].value.shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.nodes[p].value.shape();
            assert_eq!(s.len(), first.len(), "concat: rank mismatch {:?} vs {:?}", s, first);
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(
                    i == axis || a == b,
                    "concat: shapes {:?} and {:?} differ off-axis",
                    s,
                    first
                );
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = vec![0.0; shape.iter().product()];
        for o in 0..outer {
            let mut off = 0;
            for &p in parts {
                let t = &self.nodes[p].value;
                let len = t.shape()[axis];
                let src = &t.data()[o * len * inner..(o + 1) * len * inner];
                let dst = o * total * inner + off * inner;
                data[dst..dst + len * inner].copy_from_slice(src);
                off += len;
            }
        }
        let v = Tensor::new(shape, data);
        self.push(Op::Concat { axis, parts: parts.to_vec() }, v)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        let t = &self.nodes[x].value;
        assert!(axis < t.rank(), "slice: axis {} out of range for {:?}", axis, t.shape());
        assert!(
            start <= end && end <= t.shape()[axis],
            "slice: range {}..{} out of bounds for axis {} of {:?}",
            start,
            end,
            axis,
            t.shape()
        );
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let new_len = end - start;
        let mut shape = t.shape().to_vec();
        shape[axis] = new_len;
        let mut data = vec![0.0; outer * new_len * inner];
        for o in 0..outer {
            let src = (o * len + start) * inner;
            let dst = o * new_len * inner;
            data[dst..dst + new_len * inner]
                .copy_from_slice(&t.data()[src..src + new_len * inner]);
        }
        let v = Tensor::new(shape, data);
        self.push(Op::Slice { x, axis, start, end }, v)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let t = &self.nodes[x].value;
        let n: usize = shape.iter().product();
        assert_eq!(n, t.numel(), "reshape: {:?} -> {:?}", t.shape(), shape);
        let v = Tensor::new(shape.to_vec(), t.data().to_vec());
        self.push(Op::Reshape(x), v)
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> NodeId {
        let t = &self.nodes[x].value;
        let v = permute_tensor(t, perm);
        self.push(Op::Permute { x, perm: perm.to_vec() }, v)
    }

    // ----- lookup ---------------------------------------------------------------

    /// Row lookup: `table` is [V,C]; result is [ids.len(), C].
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.nodes[table].value;
        assert_eq!(t.rank(), 2, "embed: table must be [V,C], got {:?}", t.shape());
        let (v_rows, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < v_rows, "embed: id {} out of range for table {:?}", id, t.shape());
            data.extend_from_slice(&t.data()[id * c..(id + 1) * c]);
        }
        let v = Tensor::new(vec![ids.len(), c], data);
        self.push(Op::Embed { table, ids: ids.to_vec() }, v)
    }

    // ----- similarity -------------------------------------------------------------

    /// Row-wise cosine similarity of two [N,C] tensors -> [N].
    /// The norm product carries a +eps guard so all-zero rows stay finite.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        const EPS: f64 = 1e-8;
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "cosine_rows: shapes {:?} and {:?} differ",
            ta.shape(),
            tb.shape()
        );
        assert_eq!(ta.rank(), 2, "cosine_rows: need [N,C], got {:?}", ta.shape());
        let (n, c) = (ta.shape()[0], ta.shape()[1]);
        let mut data = Vec::with_capacity(n);
        for r in 0..n {
            let xs = &ta.data()[r * c..(r + 1) * c];
            let ys = &tb.data()[r * c..(r + 1) * c];
            let (mut dot, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for j in 0..c {
                dot += xs[j] * ys[j];
                saa += xs[j] * xs[j];
                sbb += ys[j] * ys[j];
            }
            data.push(dot / (saa.sqrt() * sbb.sqrt() + EPS));
        }
        let v = Tensor::new(vec![n], data);
        self.push(Op::CosineRows { a, b, eps: EPS }, v)
    }

    // ----- composite helpers ---------------------------------------------------

    /// `x @ w (+ b)` with `b` broadcast over leading axes.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add(y, b),
            None => y,
        }
    }

    /// Concatenate single-element nodes into a vector of shape [k].
    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let reshaped: Vec<NodeId> =
            parts.iter().map(|&p| self.reshape(p, &[1])).collect();
        self.concat(0, &reshaped)
    }

    // ----- backward -----------------------------------------------------------

    /// Reverse pass from a single-element `loss` node. Every tape node is
    /// visited at most once; nodes with no path to the loss get no gradient.
    pub fn backward(&mut self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss].value.numel(),
            1,
            "backward: loss must be a single element, got {:?}",
            self.nodes[loss].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::ones(self.nodes[loss].value.shape()));
        for id in (0..=loss).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let op = &self.nodes[id].op;
        match op {
            Op::Input => {}
            Op::Add(a, b) => {
                self.accumulate_bcast(grads, *a, g, |_, _| 1.0, id, 0);
                self.accumulate_bcast(grads, *b, g, |_, _| 1.0, id, 1);
            }
            Op::Sub(a, b) => {
                self.accumulate_bcast(grads, *a, g, |_, _| 1.0, id, 0);
                self.accumulate_bcast(grads, *b, g, |_, _| -1.0, id, 1);
            }
            Op::Mul(a, b) => {
                self.accumulate_bcast(grads, *a, g, |_, y| y, id, 0);
                self.accumulate_bcast(grads, *b, g, |x, _| x, id, 1);
            }
            Op::Div(a, b) => {
                self.accumulate_bcast(grads, *a, g, |_, y| 1.0 / y, id, 0);
                self.accumulate_bcast(grads, *b, g, |x, y| -x / (y * y), id, 1);
            }
            Op::AddScalar(a, _) => accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * yv));
            }
            Op::Log(a) => {
                let x = &self.nodes[*a].value;
                accumulate(grads, *a, zip_map(g, x, |gv, xv| gv / xv));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (da, db) = matmul_backward(ta, tb, g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::SumAxis { x, axis, keepdim } => {
                let t = &self.nodes[*x].value;
                let (outer, len, inner) = split_axis(t.shape(), *axis);
                let _ = keepdim;
                let mut dx = vec![0.0; t.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            dx[base + i] = g.data()[o * inner + i];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(t.shape().to_vec(), dx));
            }
            Op::SumAll(x) => {
                let t = &self.nodes[*x].value;
                accumulate(grads, *x, Tensor::filled(t.shape(), g.item()));
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[id].value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let mut dx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += g.data()[at(l)] * y.data()[at(l)];
                        }
                        for l in 0..len {
                            dx[at(l)] = y.data()[at(l)] * (g.data()[at(l)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::RmsNorm { x, gain, eps } => {
                let (tx, tg) = (&self.nodes[*x].value, &self.nodes[*gain].value);
                let c = *tx.shape().last().unwrap();
                let rows = tx.numel() / c;
                let mut dx = vec![0.0; tx.numel()];
                let mut dg = vec![0.0; c];
                for r in 0..rows {
                    let xs = &tx.data()[r * c..(r + 1) * c];
                    let gs = &g.data()[r * c..(r + 1) * c];
                    let m = xs.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let rms = (m + eps).sqrt();
                    let mut s = 0.0;
                    for j in 0..c {
                        s += gs[j] * tg.data()[j] * xs[j];
                        dg[j] += gs[j] * xs[j] / rms;
                    }
                    let k = s / (c as f64 * rms * rms * rms);
                    for j in 0..c {
                        dx[r * c + j] = gs[j] * tg.data()[j] / rms - xs[j] * k;
                    }
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx));
                accumulate(grads, *gain, Tensor::new(vec![c], dg));
            }
            Op::Rope { x, positions, base } => {
                // rotation is orthogonal: pull back by rotating with -theta
                let dx = rope_transform(g, positions, *base, true);
                accumulate(grads, *x, dx);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (dx, dw) = conv2d_backward(tx, tw, g, *stride, *pad);
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
            }
            Op::Concat { axis, parts } => {
                let (outer, total, inner) = split_axis(self.nodes[id].value.shape(), *axis);
                let _ = total;
                let mut off = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let len = t.shape()[*axis];
                    let mut dp = vec![0.0; t.numel()];
                    let g_axis = self.nodes[id].value.shape()[*axis];
                    for o in 0..outer {
                        let src = (o * g_axis + off) * inner;
                        let dst = o * len * inner;
                        dp[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    accumulate(grads, p, Tensor::new(t.shape().to_vec(), dp));
                    off += len;
                }
            }
            Op::Slice { x, axis, start, end } => {
                let t = &self.nodes[*x].value;
                let (outer, len, inner) = split_axis(t.shape(), *axis);
                let new_len = end - start;
                let mut dx = vec![0.0; t.numel()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * new_len * inner;
                    dx[dst..dst + new_len * inner]
                        .copy_from_slice(&g.data()[src..src + new_len * inner]);
                }
                accumulate(grads, *x, Tensor::new(t.shape().to_vec(), dx));
            }
            Op::Reshape(x) => {
                let t = &self.nodes[*x].value;
                accumulate(
                    grads,
                    *x,
                    Tensor::new(t.shape().to_vec(), g.data().to_vec()),
                );
            }
            Op::Permute { x, perm } => {
                let inv = invert_perm(perm);
                accumulate(grads, *x, permute_tensor(g, &inv));
            }
            Op::Embed { table, ids } => {
                let t = &self.nodes[*table].value;
                let c = t.shape()[1];
                let mut dt = vec![0.0; t.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += g.data()[row * c + j];
                    }
                }
                accumulate(grads, *table, Tensor::new(t.shape().to_vec(), dt));
            }
            Op::CosineRows { a, b, eps } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, c) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for r in 0..n {
                    let xs = &ta.data()[r * c..(r + 1) * c];
                    let ys = &tb.data()[r * c..(r + 1) * c];
                    let (mut dot, mut saa, mut sbb) = (0.0, 0.0, 0.0);
                    for j in 0..c {
                        dot += xs[j] * ys[j];
                        saa += xs[j] * xs[j];
                        sbb += ys[j] * ys[j];
                    }
                    let (na, nb) = (saa.sqrt(), sbb.sqrt());
                    let denom = na * nb + eps;
                    let gv = g.data()[r];
                    // d cos/d a_j = b_j/denom - cos * (nb/na) * a_j / denom
                    // the ratio terms vanish for an all-zero row
                    let cos = dot / denom;
                    let ka = if na > 1e-300 { cos * nb / (na * denom) } else { 0.0 };
                    let kb = if nb > 1e-300 { cos * na / (nb * denom) } else { 0.0 };
                    for j in 0..c {
                        da[r * c + j] += gv * (ys[j] / denom - ka * xs[j]);
                        db[r * c + j] += gv * (xs[j] / denom - kb * ys[j]);
                    }
                }
                accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da));
                accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db));
            }
        }
    }

    /// Accumulate `partial(a_val, b_val) * g` into `grads[target]`, reducing
    /// over broadcast axes. `side` says whether `target` was the 0th or 1st
    /// operand of binary node `id`.
    fn accumulate_bcast(
        &self,
        grads: &mut Vec<Option<Tensor>>,
        target: NodeId,
        g: &Tensor,
        partial: impl Fn(f64, f64) -> f64,
        id: NodeId,
        side: usize,
    ) {
        let (a, b) = match &self.nodes[id].op {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => (*a, *b),
            _ => unreachable!("accumulate_bcast on non-binary op"),
        };
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let tt = &self.nodes[target].value;
        if ta.shape() == tb.shape() {
            // fast path: no reduction needed
            let mut out = vec![0.0; tt.numel()];
            for i in 0..tt.numel() {
                out[i] = g.data()[i] * partial(ta.data()[i], tb.data()[i]);
            }
            accumulate(grads, target, Tensor::new(tt.shape().to_vec(), out));
            return;
        }
        let out_shape = g.shape().to_vec();
        let sa = bcast_strides(ta.shape(), &out_shape);
        let sb = bcast_strides(tb.shape(), &out_shape);
        let st = if side == 0 { &sa } else { &sb };
        let mut out = vec![0.0; tt.numel()];
        let mut it = MultiIndex::new(&out_shape);
        for k in 0..g.numel() {
            let (oa, ob) = (it.offset(&sa), it.offset(&sb));
            let ot = it.offset(st);
            out[ot] += g.data()[k] * partial(ta.data()[oa], tb.data()[ob]);
            it.step();
        }
        accumulate(grads, target, Tensor::new(tt.shape().to_vec(), out));
    }
}

/// Gradients keyed by node id. Nodes without a path to the loss report zero.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Gradient of `id`, materializing zeros when no path reached the loss.
    pub fn of(&self, id: NodeId, graph: &Graph) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(graph.value(id).shape()),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            assert_eq!(acc.shape(), t.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ----- shape utilities ---------------------------------------------------

/// (product of dims before axis, dim at axis, product after).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed as `out` (right-aligned), 0 on broadcast axes.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides_for(shape);
    let mut res = vec![0; out.len()];
    let off = out.len() - shape.len();
    for i in 0..shape.len() {
        res[off + i] = if shape[i] == 1 && out[off + i] != 1 { 0 } else { st[i] };
    }
    res
}

/// Odometer over a multi-dimensional index.
struct MultiIndex {
    shape: Vec<usize>,
    idx: Vec<usize>,
}

impl MultiIndex {
    fn new(shape: &[usize]) -> Self {
        MultiIndex { shape: shape.to_vec(), idx: vec![0; shape.len()] }
    }

    fn offset(&self, strides: &[usize]) -> usize {
        self.idx.iter().zip(strides).map(|(&i, &s)| i * s).sum()
    }

    fn step(&mut self) {
        for d in (0..self.shape.len()).rev() {
            self.idx[d] += 1;
            if self.idx[d] < self.shape[d] {
                return;
            }
            self.idx[d] = 0;
        }
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    assert_eq!(perm.len(), t.rank(), "permute: perm {:?} for shape {:?}", perm, t.shape());
    {
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "permute: invalid permutation {:?}", perm);
            seen[p] = true;
        }
    }
    let in_strides = t.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = Vec::with_capacity(t.numel());
    let mut it = MultiIndex::new(&out_shape);
    for _ in 0..t.numel() {
        data.push(t.data()[it.offset(&mapped)]);
        it.step();
    }
    Tensor::new(out_shape, data)
}

// ----- matmul kernels ------------------------------------------------------

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j];
            }
        }
    }
}

/// C += A * B^T where A is [m,n], B is [k,n] -> C [m,k].
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            out[i * k + p] += s;
        }
    }
}

/// C += A^T * B where A is [m,k], B is [m,n] -> C [k,n].
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    batch_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> MatmulDims {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul: ranks {:?} x {:?}", a, b);
    let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    assert_eq!(ka, kb, "matmul: inner dimensions disagree: {:?} x {:?}", a, b);
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch_shape: Vec<usize> = if ab.is_empty() {
        bb.to_vec()
    } else if bb.is_empty() {
        ab.to_vec()
    } else {
        assert_eq!(ab, bb, "matmul: batch prefixes disagree: {:?} x {:?}", a, b);
        ab.to_vec()
    };
    MatmulDims {
        batch: batch_shape.iter().product(),
        m,
        k: ka,
        n,
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        batch_shape,
    }
}

fn matmul_forward(ta: &Tensor, tb: &Tensor) -> Tensor {
    let d = matmul_dims(ta.shape(), tb.shape());
    let mut out_shape = d.batch_shape.clone();
    out_shape.push(d.m);
    out_shape.push(d.n);
    let mut data = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let a_off = if d.a_batched { bi * d.m * d.k } else { 0 };
        let b_off = if d.b_batched { bi * d.k * d.n } else { 0 };
        mm_nn(
            &ta.data()[a_off..a_off + d.m * d.k],
            &tb.data()[b_off..b_off + d.k * d.n],
            d.m,
            d.k,
            d.n,
            &mut data[bi * d.m * d.n..(bi + 1) * d.m * d.n],
        );
    }
    Tensor::new(out_shape, data)
}

fn matmul_backward(ta: &Tensor, tb: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let d = matmul_dims(ta.shape(), tb.shape());
    let mut da = vec![0.0; ta.numel()];
    let mut db = vec![0.0; tb.numel()];
    for bi in 0..d.batch {
        let a_off = if d.a_batched { bi * d.m * d.k } else { 0 };
        let b_off = if d.b_batched { bi * d.k * d.n } else { 0 };
        let g_sl = &g.data()[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        // dA = g @ B^T, accumulated across batches when A is broadcast
        mm_nt(
            g_sl,
            &tb.data()[b_off..b_off + d.k * d.n],
            d.m,
            d.n,
            d.k,
            &mut da[a_off..a_off + d.m * d.k],
        );
        // dB = A^T @ g
        mm_tn(
            &ta.data()[a_off..a_off + d.m * d.k],
            g_sl,
            d.m,
            d.k,
            d.n,
            &mut db[b_off..b_off + d.k * d.n],
        );
    }
    (
        Tensor::new(ta.shape().to_vec(), da),
        Tensor::new(tb.shape().to_vec(), db),
    )
}

// ----- rope kernel -----------------------------------------------------------

fn rope_transform(t: &Tensor, positions: &[usize], base: f64, inverse: bool) -> Tensor {
    let d = *t.shape().last().unwrap();
    let n = t.shape()[0];
    let mid = t.numel() / (n * d);
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| base.powf(-2.0 * j as f64 / d as f64))
        .collect();
    let mut data = t.data().to_vec();
    for row in 0..n {
        let pos = positions[row] as f64;
        for m in 0..mid {
            let off = (row * mid + m) * d;
            for j in 0..half {
                let theta = if inverse { -pos * freqs[j] } else { pos * freqs[j] };
                let (s, c) = theta.sin_cos();
                let x0 = data[off + 2 * j];
                let x1 = data[off + 2 * j + 1];
                data[off + 2 * j] = c * x0 - s * x1;
                data[off + 2 * j + 1] = s * x0 + c * x1;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), data)
}

// ----- conv2d kernels ---------------------------------------------------------

fn conv2d_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than padded input");
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

fn conv2d_forward(tx: &Tensor, tw: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, h, w, ci) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
    let (kh, kw, _, co) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
    let (ho, wo) = conv2d_out_dims(h, w, kh, kw, stride, pad);
    let mut out = vec![0.0; b * ho * wo * co];
    let x = tx.data();
    let wt = tw.data();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let o_off = ((bi * ho + oy) * wo + ox) * co;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let x_off = ((bi * h + iy as usize) * w + ix as usize) * ci;
                        let w_off = (ky * kw + kx) * ci * co;
                        for c_in in 0..ci {
                            let xv = x[x_off + c_in];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wt[w_off + c_in * co..w_off + (c_in + 1) * co];
                            for c_out in 0..co {
                                out[o_off + c_out] += xv * wrow[c_out];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, ho, wo, co], out)
}

fn conv2d_backward(
    tx: &Tensor,
    tw: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (b, h, w, ci) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
    let (kh, kw, _, co) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
    let (ho, wo) = conv2d_out_dims(h, w, kh, kw, stride, pad);
    let mut dx = vec![0.0; tx.numel()];
    let mut dw = vec![0.0; tw.numel()];
    let x = tx.data();
    let wt = tw.data();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let g_off = ((bi * ho + oy) * wo + ox) * co;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let x_off = ((bi * h + iy as usize) * w + ix as usize) * ci;
                        let w_off = (ky * kw + kx) * ci * co;
                        for c_in in 0..ci {
                            let xv = x[x_off + c_in];
                            let mut dxv = 0.0;
                            for c_out in 0..co {
                                let gv = g.data()[g_off + c_out];
                                dxv += gv * wt[w_off + c_in * co + c_out];
                                dw[w_off + c_in * co + c_out] += gv * xv;
                            }
                            dx[x_off + c_in] += dxv;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(tx.shape().to_vec(), dx),
        Tensor::new(tw.shape().to_vec(), dw),
    )
}
