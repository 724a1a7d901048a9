//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Tape style: operations evaluate eagerly and append a node holding the
//! result plus a backward rule. Graphs are rebuilt every step; node values
//! are never mutated after construction. [`GraphOf::backward`] walks the
//! tape once in reverse and returns gradients for every reachable node.
//!
//! The operation set is exactly what the training objective needs:
//! elementwise arithmetic, convolution, affine maps, rectifier, L2
//! normalization, masked spatial pooling and the pieces of a stable
//! log-sum-exp.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mask, TensorOf};

/// Handle to a node in a [`GraphOf`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// out_grad, out_value, parent values -> one gradient per parent.
type BackwardRule<S> =
    Box<dyn Fn(&TensorOf<S>, &TensorOf<S>, &[&TensorOf<S>]) -> Vec<TensorOf<S>>>;

struct Node<S> {
    value: TensorOf<S>,
    parents: Vec<NodeId>,
    backward: Option<BackwardRule<S>>,
}

/// Gradients keyed by node id, as produced by [`GraphOf::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<TensorOf<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&TensorOf<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros of `shape` when the node is unreachable
    /// from the root.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> TensorOf<S> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => TensorOf::zeros(shape.to_vec()),
        }
    }
}

/// Convolution padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Reverse-mode tape.
pub struct GraphOf<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for GraphOf<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> GraphOf<S> {
    pub fn new() -> Self {
        GraphOf { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &TensorOf<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: TensorOf<S>, parents: Vec<NodeId>, backward: BackwardRule<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, parents, backward: Some(backward) });
        id
    }

    /// Input node. Leaves have no backward rule; gradients accumulate on them.
    pub fn leaf(&mut self, value: TensorOf<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, parents: Vec::new(), backward: None });
        id
    }

    // ── Elementwise and reduction ops ───────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, vec![a, b], Box::new(|g, _, _| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|g, _, _| vec![g.clone(), g.map(|v| -v)]),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(|g, _, p| {
                vec![
                    g.zip_map(p[1], |gv, bv| gv * bv).expect("shape checked"),
                    g.zip_map(p[0], |gv, av| gv * av).expect("shape checked"),
                ]
            }),
        ))
    }

    /// Sum of any number of same-shaped nodes in one node.
    pub fn add_n(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let first = ids.first().ok_or_else(|| Error::shape("add_n of no nodes"))?;
        let mut value = self.value(*first).clone();
        for id in &ids[1..] {
            value = value.zip_map(self.value(*id), |x, y| x + y)?;
        }
        let n = ids.len();
        Ok(self.push(value, ids.to_vec(), Box::new(move |g, _, _| vec![g.clone(); n])))
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, vec![a], Box::new(move |g, _, _| vec![g.map(|v| v * factor)]))
    }

    pub fn add_const(&mut self, a: NodeId, c: S) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        self.push(value, vec![a], Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.exp());
        self.push(
            value,
            vec![a],
            Box::new(|g, out, _| vec![g.zip_map(out, |gv, ov| gv * ov).expect("same shape")]),
        )
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.ln());
        self.push(
            value,
            vec![a],
            Box::new(|g, _, p| vec![g.zip_map(p[0], |gv, xv| gv / xv).expect("same shape")]),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(S::zero()));
        // Subgradient 0 at exactly 0.
        self.push(
            value,
            vec![a],
            Box::new(|g, _, p| {
                vec![g
                    .zip_map(p[0], |gv, xv| if xv > S::zero() { gv } else { S::zero() })
                    .expect("same shape")]
            }),
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = TensorOf::scalar(self.value(a).sum());
        self.push(
            value,
            vec![a],
            Box::new(|g, _, p| vec![TensorOf::full(p[0].shape().to_vec(), g.item())]),
        )
    }

    /// Inner product with a constant vector; the constant gets no gradient.
    pub fn dot_const(&mut self, a: NodeId, constant: &TensorOf<S>) -> Result<NodeId> {
        if self.value(a).shape() != constant.shape() {
            return Err(Error::shape(format!(
                "dot_const shapes {:?} vs {:?}",
                self.value(a).shape(),
                constant.shape()
            )));
        }
        let v: S = self
            .value(a)
            .data()
            .iter()
            .zip(constant.data())
            .map(|(&x, &c)| x * c)
            .sum();
        let captured = constant.clone();
        Ok(self.push(
            TensorOf::scalar(v),
            vec![a],
            Box::new(move |g, _, _| vec![captured.map(|c| c * g.item())]),
        ))
    }

    // ── Structured ops ──────────────────────────────────────────────

    /// Affine map along the last axis: `[..., din] x [din, dout] + [dout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(
            value,
            vec![x, w, b],
            Box::new(|g, _, p| {
                let (gx, gw, gb) = linear_backward(g, p[0], p[1]);
                vec![gx, gw, gb]
            }),
        ))
    }

    /// 2-D convolution of `[h, w, cin]` with `[kh, kw, cin, cout]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        let value = conv2d_forward(self.value(x), self.value(k), stride, padding)?;
        Ok(self.push(
            value,
            vec![x, k],
            Box::new(move |g, _, p| {
                let (gx, gk) = conv2d_backward(g, p[0], p[1], stride, padding);
                vec![gx, gk]
            }),
        ))
    }

    /// Add a per-channel bias `[c]` to a `[h, w, c]` map.
    pub fn bias_channels(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let value = bias_channels_forward(self.value(x), self.value(b))?;
        Ok(self.push(
            value,
            vec![x, b],
            Box::new(|g, _, p| {
                let c = p[1].numel();
                let mut gb = TensorOf::zeros(vec![c]);
                for (i, &gv) in g.data().iter().enumerate() {
                    gb.data_mut()[i % c] = gb.data_mut()[i % c] + gv;
                }
                vec![g.clone(), gb]
            }),
        ))
    }

    /// L2-normalize each lane along `axis`. An exactly-zero lane maps to
    /// zeros with zero gradient and is flagged with a warning.
    pub fn l2_normalize(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = l2_normalize_forward(self.value(x), axis)?;
        Ok(self.push(
            value,
            vec![x],
            Box::new(move |g, out, p| vec![l2_normalize_backward(g, out, p[0], axis)]),
        ))
    }

    /// Average of the `[h, w, d]` feature vectors selected by a binary mask.
    pub fn mask_pool(&mut self, x: NodeId, mask: &Mask) -> Result<NodeId> {
        let value = mask_pool_forward(self.value(x), mask)?;
        let captured = mask.clone();
        Ok(self.push(
            value,
            vec![x],
            Box::new(move |g, _, p| {
                let shape = p[0].shape().to_vec();
                let d = shape[2];
                let inv = S::lit(1.0 / captured.area() as f64);
                let mut gx = TensorOf::zeros(shape);
                for (cell, selected) in captured.data().iter().enumerate() {
                    if *selected {
                        for j in 0..d {
                            gx.data_mut()[cell * d + j] = g.data()[j] * inv;
                        }
                    }
                }
                vec![gx]
            }),
        ))
    }

    // ── Composites ──────────────────────────────────────────────────

    /// log(sum(exp(s_i))) over scalar nodes, max-subtracted for stability.
    /// The subtracted max is a detached constant; since the softmax weights
    /// sum to one its gradient contribution cancels exactly.
    pub fn logsumexp(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::shape("logsumexp of no nodes"));
        }
        let m = ids
            .iter()
            .map(|&id| self.value(id).item())
            .fold(S::neg_infinity(), S::max);
        let mut terms = Vec::with_capacity(ids.len());
        for &id in ids {
            let shifted = self.add_const(id, -m);
            terms.push(self.exp(shifted));
        }
        let total = self.add_n(&terms)?;
        let logged = self.log(total);
        Ok(self.add_const(logged, m))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let total = self.add_n(ids)?;
        Ok(self.scale(total, S::lit(1.0 / ids.len() as f64)))
    }

    // ── Backward pass ───────────────────────────────────────────────

    /// Backpropagate from a scalar `root`, returning gradients for every
    /// reachable node. A graph can be differentiated once; it is rebuilt
    /// each step rather than reset.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::numeric("backward() already called on this graph"));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<TensorOf<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(TensorOf::scalar(S::one()));

        // Tape order is topological: parents always precede children.
        for id in (0..=root.0).rev() {
            let Some(out_grad) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(rule) = &node.backward {
                let parent_values: Vec<&TensorOf<S>> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let parent_grads = rule(&out_grad, &node.value, &parent_values);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.clone().iter().zip(parent_grads) {
                    debug_assert_eq!(pg.shape(), self.nodes[pid.0].value.shape());
                    match &mut grads[pid.0] {
                        Some(acc) => acc.axpy(S::one(), &pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(out_grad);
        }
        Ok(Gradients { grads })
    }
}

// ── Forward/backward kernels (shared with the gradient-free paths) ──

pub fn linear_forward<S: Scalar>(
    x: &TensorOf<S>,
    w: &TensorOf<S>,
    b: &TensorOf<S>,
) -> Result<TensorOf<S>> {
    let (din, dout) = match w.shape() {
        [din, dout] => (*din, *dout),
        s => return Err(Error::shape(format!("linear weight must be 2-d, got {s:?}"))),
    };
    if b.shape() != [dout] {
        return Err(Error::shape(format!("linear bias shape {:?}, want [{dout}]", b.shape())));
    }
    let x_last = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("linear input must have at least one axis"))?;
    if x_last != din {
        return Err(Error::shape(format!(
            "linear input last extent {x_last} vs weight rows {din}"
        )));
    }
    let rows = x.numel() / din;
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = dout;
    let mut out = vec![S::zero(); rows * dout];
    let xd = x.data();
    let wd = w.data();
    for r in 0..rows {
        let row = &xd[r * din..(r + 1) * din];
        let o = &mut out[r * dout..(r + 1) * dout];
        o.copy_from_slice(b.data());
        for (i, &xv) in row.iter().enumerate() {
            let wrow = &wd[i * dout..(i + 1) * dout];
            for (ov, &wv) in o.iter_mut().zip(wrow) {
                *ov = *ov + xv * wv;
            }
        }
    }
    TensorOf::new(out_shape, out)
}

fn linear_backward<S: Scalar>(
    g: &TensorOf<S>,
    x: &TensorOf<S>,
    w: &TensorOf<S>,
) -> (TensorOf<S>, TensorOf<S>, TensorOf<S>) {
    let din = w.shape()[0];
    let dout = w.shape()[1];
    let rows = x.numel() / din;
    let mut gx = TensorOf::zeros(x.shape().to_vec());
    let mut gw = TensorOf::zeros(vec![din, dout]);
    let mut gb = TensorOf::zeros(vec![dout]);
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    for r in 0..rows {
        let grow = &gd[r * dout..(r + 1) * dout];
        let xrow = &xd[r * din..(r + 1) * din];
        for (j, &gv) in grow.iter().enumerate() {
            gb.data_mut()[j] = gb.data_mut()[j] + gv;
        }
        for i in 0..din {
            let wrow = &wd[i * dout..(i + 1) * dout];
            let mut acc = S::zero();
            for (j, &gv) in grow.iter().enumerate() {
                acc = acc + gv * wrow[j];
                gw.data_mut()[i * dout + j] = gw.data_mut()[i * dout + j] + xrow[i] * gv;
            }
            gx.data_mut()[r * din + i] = acc;
        }
    }
    (gx, gw, gb)
}

/// Output extents and top/left pad for the given convolution geometry.
fn conv_geometry(h: usize, kh: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((h - kh) / stride + 1, 0),
        Padding::Same => {
            let out = h.div_ceil(stride);
            let pad_total = ((out - 1) * stride + kh).saturating_sub(h);
            (out, pad_total / 2)
        }
    }
}

pub fn conv2d_forward<S: Scalar>(
    x: &TensorOf<S>,
    k: &TensorOf<S>,
    stride: usize,
    padding: Padding,
) -> Result<TensorOf<S>> {
    let (h, w, cin) = match x.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::shape(format!("conv2d input must be h x w x c, got {s:?}"))),
    };
    let (kh, kw, kcin, cout) = match k.shape() {
        [kh, kw, kcin, cout] => (*kh, *kw, *kcin, *cout),
        s => return Err(Error::shape(format!("conv2d kernel must be 4-d, got {s:?}"))),
    };
    if kcin != cin {
        return Err(Error::shape(format!("conv2d input channels {cin} vs kernel {kcin}")));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(format!("conv2d kernel extents must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be >= 1"));
    }
    if padding == Padding::Valid && (h < kh || w < kw) {
        return Err(Error::shape(format!(
            "valid conv2d needs input {h}x{w} >= kernel {kh}x{kw}"
        )));
    }
    let (oh, pad_top) = conv_geometry(h, kh, stride, padding);
    let (ow, pad_left) = conv_geometry(w, kw, stride, padding);
    let mut out = vec![S::zero(); oh * ow * cout];
    let xd = x.data();
    let kd = k.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xoff = (iy as usize * w + ix as usize) * cin;
                    let koff = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = xd[xoff + ci];
                        let krow = &kd[koff + ci * cout..koff + (ci + 1) * cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov = *ov + xv * kv;
                        }
                    }
                }
            }
        }
    }
    TensorOf::new(vec![oh, ow, cout], out)
}

fn conv2d_backward<S: Scalar>(
    g: &TensorOf<S>,
    x: &TensorOf<S>,
    k: &TensorOf<S>,
    stride: usize,
    padding: Padding,
) -> (TensorOf<S>, TensorOf<S>) {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (oh, pad_top) = conv_geometry(h, kh, stride, padding);
    let (ow, pad_left) = conv_geometry(w, kw, stride, padding);
    let mut gx = TensorOf::zeros(x.shape().to_vec());
    let mut gk = TensorOf::zeros(k.shape().to_vec());
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &gd[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xoff = (iy as usize * w + ix as usize) * cin;
                    let koff = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = xd[xoff + ci];
                        let mut acc = S::zero();
                        for co in 0..cout {
                            let gv = go[co];
                            acc = acc + gv * kd[koff + ci * cout + co];
                            let slot = &mut gk.data_mut()[koff + ci * cout + co];
                            *slot = *slot + gv * xv;
                        }
                        let slot = &mut gx.data_mut()[xoff + ci];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    }
    (gx, gk)
}

pub fn bias_channels_forward<S: Scalar>(x: &TensorOf<S>, b: &TensorOf<S>) -> Result<TensorOf<S>> {
    let c = match x.shape() {
        [_, _, c] => *c,
        s => return Err(Error::shape(format!("bias_channels input must be 3-d, got {s:?}"))),
    };
    if b.shape() != [c] {
        return Err(Error::shape(format!(
            "bias shape {:?} vs {c} channels",
            b.shape()
        )));
    }
    let bd = b.data();
    let data = x.data().iter().enumerate().map(|(i, &v)| v + bd[i % c]).collect();
    TensorOf::new(x.shape().to_vec(), data)
}

fn lane_layout<S: Scalar>(x: &TensorOf<S>, axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= x.shape().len() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let d = x.shape()[axis];
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    Ok((outer, d, inner))
}

pub fn l2_normalize_forward<S: Scalar>(x: &TensorOf<S>, axis: usize) -> Result<TensorOf<S>> {
    let (outer, d, inner) = lane_layout(x, axis)?;
    let mut out = x.data().to_vec();
    let mut degenerate = 0usize;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * d * inner + i;
            let mut sq = S::zero();
            for j in 0..d {
                let v = out[base + j * inner];
                sq = sq + v * v;
            }
            if sq == S::zero() {
                degenerate += 1;
                continue; // lane already all zeros
            }
            let norm = sq.sqrt();
            for j in 0..d {
                out[base + j * inner] = out[base + j * inner] / norm;
            }
        }
    }
    if degenerate > 0 {
        log::warn!("l2_normalize: {degenerate} zero lane(s) left as zeros");
    }
    TensorOf::new(x.shape().to_vec(), out)
}

fn l2_normalize_backward<S: Scalar>(
    g: &TensorOf<S>,
    out: &TensorOf<S>,
    x: &TensorOf<S>,
    axis: usize,
) -> TensorOf<S> {
    let (outer, d, inner) = lane_layout(x, axis).expect("checked in forward");
    let mut gx = TensorOf::zeros(x.shape().to_vec());
    for o in 0..outer {
        for i in 0..inner {
            let base = o * d * inner + i;
            let mut sq = S::zero();
            let mut gy = S::zero();
            for j in 0..d {
                let idx = base + j * inner;
                sq = sq + x.data()[idx] * x.data()[idx];
                gy = gy + g.data()[idx] * out.data()[idx];
            }
            if sq == S::zero() {
                continue; // gradient defined as zero at the degenerate point
            }
            let norm = sq.sqrt();
            for j in 0..d {
                let idx = base + j * inner;
                gx.data_mut()[idx] = (g.data()[idx] - out.data()[idx] * gy) / norm;
            }
        }
    }
    gx
}

pub fn mask_pool_forward<S: Scalar>(x: &TensorOf<S>, mask: &Mask) -> Result<TensorOf<S>> {
    let (h, w, d) = match x.shape() {
        [h, w, d] => (*h, *w, *d),
        s => return Err(Error::shape(format!("mask_pool input must be h x w x d, got {s:?}"))),
    };
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape(format!(
            "mask {}x{} vs feature map {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let area = mask.area();
    if area == 0 {
        return Err(Error::numeric("mask_pool over an empty mask"));
    }
    let mut acc = vec![S::zero(); d];
    for (cell, selected) in mask.data().iter().enumerate() {
        if *selected {
            for (a, &v) in acc.iter_mut().zip(&x.data()[cell * d..(cell + 1) * d]) {
                *a = *a + v;
            }
        }
    }
    let inv = S::lit(1.0 / area as f64);
    for a in acc.iter_mut() {
        *a = *a * inv;
    }
    TensorOf::new(vec![d], acc)
}

/// Gradient-free relu, shared with the target/discovery forward paths.
pub fn relu_forward<S: Scalar>(x: &TensorOf<S>) -> TensorOf<S> {
    x.map(|v| v.max(S::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = TensorOf<f64>;

    /// Central finite differences of `f` at `x0` with step `h`.
    fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x0.len()];
        let mut x = x0.to_vec();
        for i in 0..x0.len() {
            x[i] = x0[i] + h;
            let fp = f(&x);
            x[i] = x0[i] - h;
            let fm = f(&x);
            x[i] = x0[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < tol, "component {i}: analytic {a} vs numeric {n} (rel {rel})");
        }
    }

    fn rng_values(seed: u64, n: usize) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::util::substream(seed, 0xad, 0);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn relu_values() {
        let mut g = GraphOf::<f64>::new();
        let x = g.leaf(T::from_vec(vec![-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let t = l2_normalize_forward(&T::from_vec(vec![3.0, 4.0]), 0).unwrap();
        assert_eq!(t.data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_zero_vector_gives_zeros_and_zero_grad() {
        let mut g = GraphOf::<f64>::new();
        let x = g.leaf(T::from_vec(vec![0.0, 0.0, 0.0]));
        let y = g.l2_normalize(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = GraphOf::<f64>::new();
        let x = g.leaf(T::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut g = GraphOf::<f64>::new();
        let x = g.leaf(T::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = GraphOf::<f64>::new();
        let x = g.leaf(T::scalar(1.0));
        let y = g.scale(x, 2.0);
        g.backward(y).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = GraphOf::<f64>::new();
        let x = g.leaf(T::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // s = sum(x*x + x) -> ds/dx = 2x + 1, checked against the oracle.
        let x0 = vec![0.3, -0.7, 1.1];
        let f = |xs: &[f64]| -> f64 {
            let mut g = GraphOf::<f64>::new();
            let x = g.leaf(T::from_vec(xs.to_vec()));
            let sq = g.mul(x, x).unwrap();
            let both = g.add(sq, x).unwrap();
            let s = g.sum_all(both);
            g.value(s).item()
        };
        let numeric = fd_gradient(&f, &x0, 1e-5);

        let mut g = GraphOf::<f64>::new();
        let x = g.leaf(T::from_vec(x0.clone()));
        let sq = g.mul(x, x).unwrap();
        let both = g.add(sq, x).unwrap();
        let s = g.sum_all(both);
        let grads = g.backward(s).unwrap();
        assert_close(grads.get(x).unwrap().data(), &numeric, 1e-6);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = T::new(vec![3, 3, 1], (1..=9).map(|v| v as f64).collect()).unwrap();
        let k = T::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_zero_kernel() {
        let x = T::new(vec![4, 5, 2], rng_values(1, 40)).unwrap();
        let k = T::zeros(vec![3, 3, 2, 3]);
        let y = conv2d_forward(&x, &k, 1, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_valid_all_ones_sums_window() {
        let x = T::full(vec![3, 3, 1], 1.0);
        let k = T::full(vec![3, 3, 1, 1], 1.0);
        let y = conv2d_forward(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_and_even_kernel() {
        let x = T::zeros(vec![4, 4, 2]);
        assert!(conv2d_forward(&x, &T::zeros(vec![3, 3, 3, 1]), 1, Padding::Same).is_err());
        assert!(conv2d_forward(&x, &T::zeros(vec![2, 2, 2, 1]), 1, Padding::Same).is_err());
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            let xs = rng_values(10 + stride as u64, 5 * 4 * 2);
            let ks = rng_values(20 + stride as u64, 3 * 3 * 2 * 3);
            let run = |xv: &[f64], kv: &[f64]| -> f64 {
                let mut g = GraphOf::<f64>::new();
                let x = g.leaf(T::new(vec![5, 4, 2], xv.to_vec()).unwrap());
                let k = g.leaf(T::new(vec![3, 3, 2, 3], kv.to_vec()).unwrap());
                let y = g.conv2d(x, k, stride, padding).unwrap();
                let s = g.sum_all(y);
                g.value(s).item()
            };
            let fx = |xv: &[f64]| run(xv, &ks);
            let fk = |kv: &[f64]| run(&xs, kv);

            let mut g = GraphOf::<f64>::new();
            let x = g.leaf(T::new(vec![5, 4, 2], xs.clone()).unwrap());
            let k = g.leaf(T::new(vec![3, 3, 2, 3], ks.clone()).unwrap());
            let y = g.conv2d(x, k, stride, padding).unwrap();
            let s = g.sum_all(y);
            let grads = g.backward(s).unwrap();
            assert_close(grads.get(x).unwrap().data(), &fd_gradient(&fx, &xs, 1e-5), 1e-4);
            assert_close(grads.get(k).unwrap().data(), &fd_gradient(&fk, &ks, 1e-5), 1e-4);
        }
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let x = T::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = T::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero_b = T::zeros(vec![2]);
        assert_eq!(linear_forward(&x, &eye, &zero_b).unwrap().data(), x.data());

        let zero_w = T::zeros(vec![2, 2]);
        let b = T::from_vec(vec![5.0, 6.0]);
        assert_eq!(linear_forward(&x, &zero_w, &b).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn linear_hand_example() {
        // [1,2] x [[1,0],[0,2]] + [0,1] = [1, 5]
        let x = T::from_vec(vec![1.0, 2.0]);
        let w = T::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let b = T::from_vec(vec![0.0, 1.0]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[1.0, 5.0]);
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let x = T::from_vec(vec![1.0, 2.0, 3.0]);
        let w = T::zeros(vec![2, 2]);
        let b = T::zeros(vec![2]);
        assert!(linear_forward(&x, &w, &b).is_err());
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let xs = rng_values(3, 3 * 4);
        let ws = rng_values(4, 4 * 2);
        let bs = rng_values(5, 2);
        let run = |xv: &[f64], wv: &[f64], bv: &[f64]| -> f64 {
            let mut g = GraphOf::<f64>::new();
            let x = g.leaf(T::new(vec![3, 4], xv.to_vec()).unwrap());
            let w = g.leaf(T::new(vec![4, 2], wv.to_vec()).unwrap());
            let b = g.leaf(T::from_vec(bv.to_vec()));
            let y = g.linear(x, w, b).unwrap();
            let r = g.relu(y);
            let s = g.sum_all(r);
            g.value(s).item()
        };
        let mut g = GraphOf::<f64>::new();
        let x = g.leaf(T::new(vec![3, 4], xs.clone()).unwrap());
        let w = g.leaf(T::new(vec![4, 2], ws.clone()).unwrap());
        let b = g.leaf(T::from_vec(bs.clone()));
        let y = g.linear(x, w, b).unwrap();
        let r = g.relu(y);
        let s = g.sum_all(r);
        let grads = g.backward(s).unwrap();
        assert_close(
            grads.get(x).unwrap().data(),
            &fd_gradient(&|v| run(v, &ws, &bs), &xs, 1e-5),
            1e-4,
        );
        assert_close(
            grads.get(w).unwrap().data(),
            &fd_gradient(&|v| run(&xs, v, &bs), &ws, 1e-5),
            1e-4,
        );
        assert_close(
            grads.get(b).unwrap().data(),
            &fd_gradient(&|v| run(&xs, &ws, v), &bs, 1e-5),
            1e-4,
        );
    }

    #[test]
    fn normalize_mask_pool_logsumexp_gradients_match_finite_differences() {
        let mask = Mask::from_fn(2, 2, |y, x| y == 0 || x == 0);
        let xs = rng_values(6, 2 * 2 * 3);
        let run = |xv: &[f64]| -> f64 {
            let mut g = GraphOf::<f64>::new();
            let x = g.leaf(T::new(vec![2, 2, 3], xv.to_vec()).unwrap());
            let pooled = g.mask_pool(x, &mask).unwrap();
            let unit = g.l2_normalize(pooled, 0).unwrap();
            let e = g.exp(unit);
            let s0 = g.sum_all(e);
            let l = g.log(s0);
            let sq = g.mul(l, l).unwrap();
            g.value(sq).item()
        };
        let mut g = GraphOf::<f64>::new();
        let x = g.leaf(T::new(vec![2, 2, 3], xs.clone()).unwrap());
        let pooled = g.mask_pool(x, &mask).unwrap();
        let unit = g.l2_normalize(pooled, 0).unwrap();
        let e = g.exp(unit);
        let s0 = g.sum_all(e);
        let l = g.log(s0);
        let sq = g.mul(l, l).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_close(grads.get(x).unwrap().data(), &fd_gradient(&run, &xs, 1e-5), 1e-4);
    }

    #[test]
    fn mask_pool_values() {
        // Mask over cells (0,0) and (0,1) with vectors [1,0] and [0,1].
        let x = T::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 9.0, 9.0, 9.0, 9.0]).unwrap();
        let mask = Mask::from_fn(2, 2, |y, _| y == 0);
        assert_eq!(mask_pool_forward(&x, &mask).unwrap().data(), &[0.5, 0.5]);

        let all = Mask::from_fn(2, 2, |_, _| true);
        let mean = mask_pool_forward(&x, &all).unwrap();
        assert_eq!(mean.data(), &[4.75, 4.75]);

        let single = Mask::from_fn(2, 2, |y, x| y == 1 && x == 0);
        assert_eq!(mask_pool_forward(&x, &single).unwrap().data(), &[9.0, 9.0]);

        let empty = Mask::from_fn(2, 2, |_, _| false);
        assert!(mask_pool_forward(&x, &empty).is_err());
    }

    #[test]
    fn logsumexp_node_matches_tensor_helper() {
        let mut g = GraphOf::<f64>::new();
        let a = g.leaf(T::scalar(0.0));
        let b = g.leaf(T::scalar(0.0));
        let l = g.logsumexp(&[a, b]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        // Stability under large inputs.
        let mut g = GraphOf::<f64>::new();
        let a = g.leaf(T::scalar(700.0));
        let b = g.leaf(T::scalar(698.0));
        let l = g.logsumexp(&[a, b]).unwrap();
        let expect = crate::tensor::logsumexp(&[700.0, 698.0]);
        assert!((g.value(l).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let vals = [0.2, -1.3, 0.7];
        let mut g = GraphOf::<f64>::new();
        let leaves: Vec<NodeId> = vals.iter().map(|&v| g.leaf(T::scalar(v))).collect();
        let l = g.logsumexp(&leaves).unwrap();
        let grads = g.backward(l).unwrap();
        let denom: f64 = vals.iter().map(|v| v.exp()).sum();
        for (id, &v) in leaves.iter().zip(&vals) {
            let expect = v.exp() / denom;
            assert!((grads.get(*id).unwrap().item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_forward() {
        let xs = rng_values(9, 4 * 4 * 2);
        let ks = rng_values(10, 3 * 3 * 2 * 2);
        let run = || {
            let mut g = GraphOf::<f64>::new();
            let x = g.leaf(T::new(vec![4, 4, 2], xs.clone()).unwrap());
            let k = g.leaf(T::new(vec![3, 3, 2, 2], ks.clone()).unwrap());
            let y = g.conv2d(x, k, 2, Padding::Same).unwrap();
            let s = g.sum_all(y);
            g.value(s).item()
        };
        assert_eq!(run(), run());
    }
}
