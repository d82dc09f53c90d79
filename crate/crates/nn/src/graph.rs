//! Eager tape for reverse-mode differentiation.
//!
//! Every op evaluates immediately and appends a node; node ids are therefore
//! already in topological order and [`Graph::backward`] walks them in
//! reverse. Parameters are pulled from a [`ParamStore`] once per graph, so
//! repeated use of a parameter (e.g. two branches of a siamese encoder)
//! resolves to a single node whose gradient accumulates both uses.

use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

enum Op<S> {
    Leaf,
    Param,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, pad: usize },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    AvgPool { x: NodeId, k: usize },
    GlobalAvgPool { x: NodeId },
    Relu { x: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Flatten { x: NodeId },
    Concat { xs: Vec<NodeId>, axis: usize },
    SoftmaxCrossEntropy { logits: NodeId, targets: Tensor<S>, probs: Tensor<S> },
    SigmoidBce { logits: NodeId, targets: Tensor<S>, probs: Tensor<S> },
    WeightedSum { x: NodeId, weights: Tensor<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, NodeId>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.node(*n))
    }

    /// Gradients of every parameter that took part in the graph and is trainable.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.params
            .iter()
            .filter_map(move |(p, n)| self.node(*n).map(|g| (*p, g)))
    }
}

fn dims4(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(NnError::shape(op, format!("expected NCHW input, got {s:?}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize, pad: usize, ho: usize, wo: usize, col: &mut [S]) {
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ki as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kj as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(col: &[S], c: usize, h: usize, w: usize, k: usize, pad: usize, ho: usize, wo: usize, dx: &mut [S]) {
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = ox as isize + kj as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used for input-gradient checks).
    pub fn variable(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Node holding parameter `id`; repeated calls return the same node.
    /// A graph is tied to the first store it reads parameters from.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let p = store.get(id);
        let n = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, n);
        n
    }

    /// 2-D convolution, stride 1, square kernel. `w` is `[out, in, k, k]`, `b` is `[out]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, padding: Padding) -> Result<NodeId> {
        let (bs, c, h, wd) = dims4(self.value(x), "conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let [o, wc, k, k2] = ws[..] else {
            return Err(NnError::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        if wc != c || k != k2 || self.value(b).shape() != [o] {
            return Err(NnError::shape(
                "conv2d",
                format!("input {:?}, weight {ws:?}, bias {:?}", self.value(x).shape(), self.value(b).shape()),
            ));
        }
        let pad = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(NnError::shape("conv2d", "same padding needs an odd kernel"));
                }
                k / 2
            }
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(NnError::shape("conv2d", "kernel larger than padded input"));
        }
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let ckk = c * k * k;
        let mut out = vec![S::zero(); bs * o * ho * wo];
        let mut col = vec![S::zero(); ckk * ho * wo];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for bi in 0..bs {
                im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, k, pad, ho, wo, &mut col);
                let dst = &mut out[bi * o * ho * wo..(bi + 1) * o * ho * wo];
                for (oc, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                    chunk.fill(bv[oc]);
                }
                S::gemm(false, false, o, ho * wo, ckk, S::one(), wv, &col, S::one(), dst);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::from_vec(&[bs, o, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, rg))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (bs, c, h, w) = dims4(self.value(x), "maxpool2d")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(NnError::shape("maxpool2d", format!("input {h}x{w} too small")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bs * c * ho * wo);
        let mut argmax = Vec::with_capacity(bs * c * ho * wo);
        for plane in 0..bs * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_vec(&[bs, c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Non-overlapping `k x k` average pooling with stride `k`.
    pub fn avgpool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (bs, c, h, w) = dims4(self.value(x), "avgpool2d")?;
        if k == 0 || h < k || w < k {
            return Err(NnError::shape("avgpool2d", format!("kernel {k} on {h}x{w}")));
        }
        let (ho, wo) = (h / k, w / k);
        let inv = S::one() / S::from_usize(k * k).unwrap();
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); bs * c * ho * wo];
        for plane in 0..bs * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = S::zero();
                    for dy in 0..k {
                        let row = plane * h * w + (oy * k + dy) * w + ox * k;
                        s += xv[row..row + k].iter().copied().sum::<S>();
                    }
                    out[(plane * ho + oy) * wo + ox] = s * inv;
                }
            }
        }
        let value = Tensor::from_vec(&[bs, c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool { x, k }, rg))
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avgpool(&mut self, x: NodeId) -> Result<NodeId> {
        let (bs, c, h, w) = dims4(self.value(x), "global_avgpool")?;
        let inv = S::one() / S::from_usize(h * w).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<S>() * inv)
            .collect();
        let value = Tensor::from_vec(&[bs, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let b = *v.shape().first().ok_or_else(|| NnError::shape("flatten", "scalar input"))?;
        let rest = v.len() / b.max(1);
        let value = v.clone().reshape(&[b, rest])?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Flatten { x }, rg))
    }

    /// Affine layer: `x [B, in] * w [in, out] + b [out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bsh) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let (&[bs, fin], &[win, fout]) = (xs, ws) else {
            return Err(NnError::shape("dense", format!("input {xs:?}, weight {ws:?}")));
        };
        if win != fin || bsh != [fout] {
            return Err(NnError::shape(
                "dense",
                format!("input {xs:?}, weight {ws:?}, bias {bsh:?}"),
            ));
        }
        let mut out = Vec::with_capacity(bs * fout);
        for _ in 0..bs {
            out.extend_from_slice(self.value(b).data());
        }
        S::gemm(false, false, bs, fout, fin, S::one(), self.value(x).data(), self.value(w).data(), S::one(), &mut out);
        let value = Tensor::from_vec(&[bs, fout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| NnError::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(NnError::shape("concat", format!("axis {axis} on rank {}", base.len())));
        }
        let mut total = 0;
        for &id in xs {
            let s = self.value(id).shape();
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(NnError::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in xs {
                let chunk = self.value(id).shape()[axis] * inner;
                out.extend_from_slice(&self.value(id).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_vec(&shape, out)?;
        let rg = xs.iter().any(|&id| self.rg(id));
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Mean over the batch of `-sum_k t_k log softmax(z)_k`. `targets` is
    /// `[B, K]` (one-hot or any distribution per row).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Tensor<S>) -> Result<NodeId> {
        let z = self.value(logits);
        let &[bs, k] = z.shape() else {
            return Err(NnError::shape("softmax_cross_entropy", format!("logits {:?}", z.shape())));
        };
        if targets.shape() != z.shape() {
            return Err(NnError::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs targets {:?}", z.shape(), targets.shape()),
            ));
        }
        let mut probs = Vec::with_capacity(bs * k);
        let mut loss = S::zero();
        for (row, t) in z.data().chunks(k).zip(targets.data().chunks(k)) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            for (&v, &tv) in row.iter().zip(t) {
                probs.push((v - lse).exp());
                if tv != S::zero() {
                    loss -= tv * (v - lse);
                }
            }
        }
        loss /= S::from_usize(bs.max(1)).unwrap();
        let probs = Tensor::from_vec(&[bs, k], probs)?;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, targets, probs }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets` in [0,1].
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: Tensor<S>) -> Result<NodeId> {
        let z = self.value(logits);
        if targets.shape() != z.shape() {
            return Err(NnError::shape(
                "sigmoid_bce",
                format!("logits {:?} vs targets {:?}", z.shape(), targets.shape()),
            ));
        }
        let n = S::from_usize(z.len().max(1)).unwrap();
        let mut loss = S::zero();
        for (&v, &t) in z.data().iter().zip(targets.data()) {
            loss += v.max(S::zero()) - v * t + (-v.abs()).exp().ln_1p();
        }
        let probs = z.map(sigmoid);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss / n), Op::SigmoidBce { logits, targets, probs }, rg))
    }

    /// Scalar `sum(weights * x)`; reduces any node to a loss for gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor<S>) -> Result<NodeId> {
        if weights.shape() != self.value(x).shape() {
            return Err(NnError::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", self.value(x).shape(), weights.shape()),
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let node = self.nodes.get(loss.0).ok_or(NnError::GraphNotEvaluated(loss.0))?;
        if node.value.len() != 1 {
            return Err(NnError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .filter(|(_, n)| self.nodes[n.0].requires_grad)
            .map(|(p, n)| (*p, *n))
            .collect();
        // drop intermediate grads that nobody asked for
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf | Op::Param) && i != loss.0 {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) -> Result<()> {
        if !self.rg(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let d = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?)?;
            }
            Op::Flatten { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?)?;
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let dd = d.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    dd[idx] += gv;
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::AvgPool { x, k } => {
                let (_, _, h, w) = dims4(self.value(*x), "avgpool2d")?;
                let (ho, wo) = (h / k, w / k);
                let inv = S::one() / S::from_usize(k * k).unwrap();
                let mut d = Tensor::zeros(self.value(*x).shape());
                let dd = d.data_mut();
                for (plane, gp) in g.data().chunks(ho * wo).enumerate() {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gp[oy * wo + ox] * inv;
                            for dy in 0..*k {
                                let row = plane * h * w + (oy * k + dy) * w + ox * k;
                                for v in &mut dd[row..row + k] {
                                    *v += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = dims4(self.value(*x), "global_avgpool")?;
                let inv = S::one() / S::from_usize(h * w).unwrap();
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (plane, &gv) in d.data_mut().chunks_mut(h * w).zip(g.data()) {
                    plane.fill(gv * inv);
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::Dense { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bs, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[1];
                if self.rg(*x) {
                    let mut dx = vec![S::zero(); bs * fin];
                    S::gemm(false, true, bs, fin, fout, S::one(), g.data(), wv.data(), S::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::from_vec(&[bs, fin], dx)?)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![S::zero(); fin * fout];
                    S::gemm(true, false, fin, fout, bs, S::one(), xv.data(), g.data(), S::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::from_vec(&[fin, fout], dw)?)?;
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); fout];
                    for row in g.data().chunks(fout) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[fout], db)?)?;
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let (bs, c, h, wd) = dims4(self.value(*x), "conv2d")?;
                let wv = self.value(*w);
                let (o, k) = (wv.shape()[0], wv.shape()[2]);
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let ckk = c * k * k;
                let (need_x, need_w) = (self.rg(*x), self.rg(*w));
                if need_x || need_w {
                    let xv = self.value(*x).data();
                    let mut col = vec![S::zero(); ckk * ho * wo];
                    let mut dcol = vec![S::zero(); if need_x { ckk * ho * wo } else { 0 }];
                    let mut dw = vec![S::zero(); if need_w { o * ckk } else { 0 }];
                    let mut dx = vec![S::zero(); if need_x { bs * c * h * wd } else { 0 }];
                    for bi in 0..bs {
                        let gb = &g.data()[bi * o * ho * wo..(bi + 1) * o * ho * wo];
                        if need_w {
                            im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, k, *pad, ho, wo, &mut col);
                            S::gemm(false, true, o, ckk, ho * wo, S::one(), gb, &col, S::one(), &mut dw);
                        }
                        if need_x {
                            S::gemm(true, false, ckk, ho * wo, o, S::one(), wv.data(), gb, S::zero(), &mut dcol);
                            col2im(&dcol, c, h, wd, k, *pad, ho, wo, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                        }
                    }
                    if need_w {
                        self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw)?)?;
                    }
                    if need_x {
                        self.accumulate(grads, *x, Tensor::from_vec(&[bs, c, h, wd], dx)?)?;
                    }
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); o];
                    for (idx, plane) in g.data().chunks(ho * wo).enumerate() {
                        db[idx % o] += plane.iter().copied().sum::<S>();
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[o], db)?)?;
                }
            }
            Op::Concat { xs, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &id in xs {
                    let s = self.value(id).shape().to_vec();
                    let chunk = s[*axis] * inner;
                    if self.rg(id) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total * inner + offset;
                            d.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        self.accumulate(grads, id, Tensor::from_vec(&s, d)?)?;
                    }
                    offset += chunk;
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let bs = probs.shape()[0].max(1);
                let scale = g.data()[0] / S::from_usize(bs).unwrap();
                let k = probs.shape()[1];
                let mut d = Vec::with_capacity(probs.len());
                for (p, t) in probs.data().chunks(k).zip(targets.data().chunks(k)) {
                    let mass: S = t.iter().copied().sum();
                    d.extend(p.iter().zip(t).map(|(&pv, &tv)| (pv * mass - tv) * scale));
                }
                self.accumulate(grads, *logits, Tensor::from_vec(probs.shape(), d)?)?;
            }
            Op::SigmoidBce { logits, targets, probs } => {
                let scale = g.data()[0] / S::from_usize(probs.len().max(1)).unwrap();
                let d = probs
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                self.accumulate(grads, *logits, Tensor::from_vec(probs.shape(), d)?)?;
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * gv))?;
            }
        }
        Ok(())
    }
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Row-wise softmax of a `[B, K]` tensor.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let k = logits.shape().get(1).copied().unwrap_or(1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let e: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: S = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::from_vec(logits.shape(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn avgpool_of_constant_is_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 4], 0.7));
        let y = g.avgpool(x, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let z = g.global_avgpool(x).unwrap();
        assert_eq!(g.value(z).shape(), &[2, 3]);
        assert!(g.value(z).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 16]));
        let mut tg = vec![0.0; 48];
        tg[5] = 1.0;
        tg[16 + 15] = 1.0;
        tg[32] = 1.0;
        let loss = g.softmax_cross_entropy(z, t(&[3, 16], tg)).unwrap();
        assert!((g.value(loss).data()[0] - 16f64.ln()).abs() < 1e-12);
        assert!((16f64.ln() - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn dead_relu_passes_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1, 3], vec![-2.0, -0.5, -1.0]));
        let y = g.relu(x);
        let l = g.weighted_sum(y, t(&[1, 3], vec![1.0, 2.0, 3.0])).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.node(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_backward_splits_at_boundary() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2, 1], vec![1.0, 2.0]));
        let b = g.variable(t(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = t(&[2, 3], vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
        let l = g.weighted_sum(c, w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.node(a).unwrap().data(), &[10.0, 40.0]);
        assert_eq!(grads.node(b).unwrap().data(), &[20.0, 30.0, 50.0, 60.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], vec![1.0, 2.0]));
        let l = g.weighted_sum(x, t(&[1, 2], vec![1.0, 1.0])).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.node(x).is_none());
    }

    #[test]
    fn backward_on_missing_node_errors() {
        let g = Graph::<f64>::new();
        let mut other = Graph::<f64>::new();
        let id = other.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(id), Err(NnError::GraphNotEvaluated(0))));
    }

    #[test]
    fn shared_param_accumulates_both_uses() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[1, 1], vec![3.0]));
        let b = store.add("b", t(&[1], vec![0.0]));
        let mut g = Graph::new();
        let x1 = g.constant(t(&[1, 1], vec![2.0]));
        let x2 = g.constant(t(&[1, 1], vec![5.0]));
        let (wn, bn) = (g.param(&store, w), g.param(&store, b));
        assert_eq!(g.param(&store, w), wn);
        let y1 = g.dense(x1, wn, bn).unwrap();
        let y2 = g.dense(x2, wn, bn).unwrap();
        let c = g.concat(&[y1, y2], 1).unwrap();
        let l = g.weighted_sum(c, t(&[1, 2], vec![1.0, 1.0])).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[7.0]);
        assert_eq!(grads.param(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::new();
        let w = store.add("enc.w", t(&[1, 1], vec![3.0]));
        let b = store.add("enc.b", t(&[1], vec![0.0]));
        store.set_trainable("enc.", false);
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1], vec![2.0]));
        let (wn, bn) = (g.param(&store, w), g.param(&store, b));
        let y = g.dense(x, wn, bn).unwrap();
        let l = g.weighted_sum(y, t(&[1, 1], vec![1.0])).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.params().count(), 0);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.dense(x, w, b), Err(NnError::ShapeMismatch { .. })));
        let img = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let cw = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let cb = g.constant(Tensor::zeros(&[4]));
        assert!(g.conv2d(img, cw, cb, Padding::Same).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&t(&[2, 3], vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]));
        for r in 0..2 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
