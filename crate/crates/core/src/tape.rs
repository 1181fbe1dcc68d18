//! Reverse-mode differentiation on a recorded operation graph.
//!
//! A [`Tape`] owns every intermediate [`Tensor`] of one forward pass. Each
//! primitive has an explicit backward rule; there is no general taping of
//! arbitrary code. Graphs are built per forward pass and discarded after
//! [`Tape::backward`], which suits the per-utterance training loop used by
//! the models in this crate.
//!
//! A tape is a single-owner, single-threaded object. Concurrency happens
//! above this module: independent model instances run on independent tapes.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Dropout { x: NodeId, mask: Vec<f64> },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    MeanPool { x: NodeId, axis: usize },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    Scale { x: NodeId, c: f64 },
    StackRows { parts: Vec<NodeId> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// `backward` accumulates a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let requires_grad = value.requires_grad;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Primitives ──────────────────────────────────────────────────────

    /// `c[i,j] = sum_p a[i,p] * b[p,j]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0) {
            return Err(Error::Shape(format!(
                "matmul needs [M,P]x[P,N], got {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, p, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..p {
                let aik = ta.data()[i * p + k];
                let brow = &tb.data()[k * n..(k + 1) * n];
                let crow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aik * brow[j];
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs rank 2, got {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.dim(0), t.dim(1));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let value = Tensor::from_vec(&[c, r], out)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::Transpose { x }, rg))
    }

    /// Exp-normalizes along `axis` with max-subtraction for stability.
    /// Every slice along `axis` of the output sums to 1.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        if axis >= t.rank() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        if t.rank() > 2 {
            return Err(Error::Shape("softmax supports rank 1 and 2".into()));
        }
        let mut out = t.data().to_vec();
        for_each_lane(t.shape(), axis, |lane| {
            let m = lane
                .iter()
                .map(|&i| out[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in lane {
                let e = (out[i] - m).exp();
                out[i] = e;
                sum += e;
            }
            for &i in lane {
                out[i] /= sum;
            }
        });
        let value = Tensor::from_vec(t.shape(), out)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Per-row standardization (population variance) followed by an affine
    /// map: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let cols = *tx.shape().last().expect("nonempty shape");
        if cols == 0 {
            return Err(Error::Shape("layer_norm on zero-length row".into()));
        }
        if tx.rank() > 2 {
            return Err(Error::Shape("layer_norm supports rank 1 and 2".into()));
        }
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(Error::Shape(format!(
                "layer_norm gamma/beta must be [{cols}], got {:?} / {:?}",
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = tx.numel() / cols;
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xr = &tx.data()[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = tg.data()[c] * (xr[c] - mean) * inv + tb.data()[c];
            }
        }
        let value = Tensor::from_vec(tx.shape(), out)?;
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`; in evaluation the
    /// op is the identity.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let t = &self.nodes[x.0].value;
        let n = t.numel();
        let mask: Vec<f64> = if training && rate > 0.0 {
            let keep = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
                .collect()
        } else {
            vec![1.0; n]
        };
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_vec(t.shape(), out)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// `y = x W + b` with the bias broadcast over rows. Rank-1 `x` is
    /// treated as a single row and yields a rank-1 output.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if tw.rank() != 2 {
            return Err(Error::Shape(format!(
                "linear weight must be rank 2, got {:?}",
                tw.shape()
            )));
        }
        let (d_in, d_out) = (tw.dim(0), tw.dim(1));
        let rank1 = tx.rank() == 1;
        let rows = if rank1 { 1 } else { tx.dim(0) };
        let cols = if rank1 { tx.dim(0) } else { tx.dim(1) };
        if tx.rank() > 2 || cols != d_in {
            return Err(Error::Shape(format!(
                "linear: input {:?} incompatible with weight {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        if tb.shape() != [d_out] {
            return Err(Error::Shape(format!(
                "linear bias must be [{d_out}], got {:?}",
                tb.shape()
            )));
        }
        // Accumulate x*W first and add the bias last so the result is
        // bit-identical to a matmul followed by a broadcast add.
        let mut out = vec![0.0; rows * d_out];
        for r in 0..rows {
            let orow = &mut out[r * d_out..(r + 1) * d_out];
            for k in 0..d_in {
                let xv = tx.data()[r * d_in + k];
                let wrow = &tw.data()[k * d_out..(k + 1) * d_out];
                for j in 0..d_out {
                    orow[j] += xv * wrow[j];
                }
            }
            for j in 0..d_out {
                orow[j] += tb.data()[j];
            }
        }
        let shape: Vec<usize> = if rank1 { vec![d_out] } else { vec![rows, d_out] };
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Mean over `axis` of a rank-2 tensor, yielding a rank-1 tensor.
    /// `axis = 0` averages rows away (column means), `axis = 1` averages
    /// columns away (row means).
    pub fn mean_pool(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 2 || axis > 1 {
            return Err(Error::Shape(format!(
                "mean_pool needs rank 2 and axis 0/1, got {:?} axis {axis}",
                t.shape()
            )));
        }
        let (r, c) = (t.dim(0), t.dim(1));
        let value = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += t.data()[i * c + j];
                }
            }
            out.iter_mut().for_each(|v| *v /= r as f64);
            Tensor::from_vec(&[c], out)?
        } else {
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = t.row(i).iter().sum::<f64>() / c as f64;
            }
            Tensor::from_vec(&[r], out)?
        };
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::MeanPool { x, axis }, rg))
    }

    /// Mean pooling over the time axis of a `[T, D]` sequence.
    pub fn mean_pool_time(&mut self, x: NodeId) -> Result<NodeId> {
        self.mean_pool(x, 0)
    }

    /// Mean negative log-likelihood of the labels under row-wise softmax,
    /// computed with log-sum-exp stability. Accepts `[B, C]` logits with
    /// `B` labels, or rank-1 `[C]` logits with a single label.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[logits.0].value;
        let (batch, classes) = match t.rank() {
            1 => (1, t.dim(0)),
            2 => (t.dim(0), t.dim(1)),
            _ => return Err(Error::Shape("cross_entropy needs rank 1 or 2 logits".into())),
        };
        if labels.len() != batch {
            return Err(Error::Shape(format!(
                "cross_entropy: {batch} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &t.data()[b * classes..(b + 1) * classes];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= batch as f64;
        let value = Tensor::from_vec(&[1], vec![loss])?;
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        let out: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::from_vec(t.shape(), out)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::Scale { x, c }, rg))
    }

    /// Stacks rank-1 tensors of equal length into a `[K, D]` matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("stack_rows needs at least one row".into()));
        }
        let d = self.nodes[parts[0].0].value.numel();
        let mut data = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() != 1 || t.numel() != d {
                return Err(Error::Shape(format!(
                    "stack_rows: expected rank-1 length {d}, got {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(&[parts.len(), d], data)?;
        let rg = self.needs_grad(parts);
        Ok(self.push(
            value,
            Op::StackRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Backpropagates from a scalar node, filling gradients of every node
    /// on a `requires_grad` path.
    pub fn backward(&mut self, target: NodeId) -> Result<()> {
        if self.nodes[target.0].value.numel() != 1 {
            return Err(Error::Shape(
                "backward target must be a scalar (one element)".into(),
            ));
        }
        if !self.nodes[target.0].value.data()[0].is_finite() {
            return Err(Error::Numeric("backward on non-finite loss".into()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[target.0].grad = Some(vec![1.0]);

        for i in (0..=target.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let gy = self.nodes[i].grad.take().expect("checked above");
            self.propagate(i, &gy);
            self.nodes[i].grad = Some(gy);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn propagate(&mut self, i: usize, gy: &[f64]) {
        // Ops only reference earlier node ids, so reverse iteration in
        // `backward` is a valid topological order.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, p, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                let mut ga = vec![0.0; m * p];
                let mut gb = vec![0.0; p * n];
                for r in 0..m {
                    for j in 0..n {
                        let g = gy[r * n + j];
                        for k in 0..p {
                            ga[r * p + k] += g * tb.data()[k * n + j];
                            gb[k * n + j] += ta.data()[r * p + k] * g;
                        }
                    }
                }
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Transpose { x } => {
                let x = *x;
                let t = &self.nodes[x.0].value;
                let (r, c) = (t.dim(0), t.dim(1));
                let mut gx = vec![0.0; r * c];
                for a in 0..c {
                    for b in 0..r {
                        gx[b * c + a] = gy[a * r + b];
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let y = self.nodes[i].value.clone();
                let mut gx = vec![0.0; y.numel()];
                for_each_lane(y.shape(), axis, |lane| {
                    let dot: f64 = lane.iter().map(|&k| y.data()[k] * gy[k]).sum();
                    for &k in lane {
                        gx[k] = y.data()[k] * (gy[k] - dot);
                    }
                });
                self.accumulate(x, &gx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let tx = self.nodes[x.0].value.clone();
                let tg = self.nodes[gamma.0].value.clone();
                let cols = *tx.shape().last().expect("nonempty");
                let rows = tx.numel() / cols;
                let mut gx = vec![0.0; tx.numel()];
                let mut gg = vec![0.0; cols];
                let mut gb = vec![0.0; cols];
                for r in 0..rows {
                    let xr = &tx.data()[r * cols..(r + 1) * cols];
                    let gyr = &gy[r * cols..(r + 1) * cols];
                    let mean = xr.iter().sum::<f64>() / cols as f64;
                    let var =
                        xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let d1: Vec<f64> = gyr
                        .iter()
                        .zip(tg.data())
                        .map(|(g, gam)| g * gam)
                        .collect();
                    let m1 = d1.iter().sum::<f64>() / cols as f64;
                    let m2 = d1
                        .iter()
                        .zip(&xhat)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] = inv * (d1[c] - m1 - xhat[c] * m2);
                        gg[c] += gyr[c] * xhat[c];
                        gb[c] += gyr[c];
                    }
                }
                self.accumulate(x, &gx);
                self.accumulate(gamma, &gg);
                self.accumulate(beta, &gb);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let gx: Vec<f64> = gy.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(x, &gx);
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let (d_in, d_out) = (tw.dim(0), tw.dim(1));
                let rows = tx.numel() / d_in;
                let mut gx = vec![0.0; tx.numel()];
                let mut gw = vec![0.0; d_in * d_out];
                let mut gb = vec![0.0; d_out];
                for r in 0..rows {
                    let gyr = &gy[r * d_out..(r + 1) * d_out];
                    for k in 0..d_in {
                        let xv = tx.data()[r * d_in + k];
                        let wrow = &tw.data()[k * d_out..(k + 1) * d_out];
                        let mut acc = 0.0;
                        for j in 0..d_out {
                            acc += gyr[j] * wrow[j];
                            gw[k * d_out + j] += xv * gyr[j];
                        }
                        gx[r * d_in + k] = acc;
                    }
                    for j in 0..d_out {
                        gb[j] += gyr[j];
                    }
                }
                self.accumulate(x, &gx);
                self.accumulate(w, &gw);
                self.accumulate(b, &gb);
            }
            Op::MeanPool { x, axis } => {
                let (x, axis) = (*x, *axis);
                let t = &self.nodes[x.0].value;
                let (r, c) = (t.dim(0), t.dim(1));
                let mut gx = vec![0.0; r * c];
                if axis == 0 {
                    for a in 0..r {
                        for j in 0..c {
                            gx[a * c + j] = gy[j] / r as f64;
                        }
                    }
                } else {
                    for a in 0..r {
                        for j in 0..c {
                            gx[a * c + j] = gy[a] / c as f64;
                        }
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                let t = &self.nodes[logits.0].value;
                let classes = *t.shape().last().expect("nonempty");
                let batch = labels.len();
                let g0 = gy[0] / batch as f64;
                let mut gx = vec![0.0; t.numel()];
                for (b, &label) in labels.iter().enumerate() {
                    let row = &t.data()[b * classes..(b + 1) * classes];
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                    let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                    for c in 0..classes {
                        let p = (row[c] - m).exp() / sum;
                        gx[b * classes + c] = g0 * (p - if c == label { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(logits, &gx);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let gx: Vec<f64> = gy.iter().map(|g| g * c).collect();
                self.accumulate(x, &gx);
            }
            Op::StackRows { parts } => {
                let parts = parts.clone();
                let d = self.nodes[parts[0].0].value.numel();
                for (k, &p) in parts.iter().enumerate() {
                    self.accumulate(p, &gy[k * d..(k + 1) * d]);
                }
            }
        }
    }
}

/// Visits index lanes along `axis` of a rank-1/2 shape. Each lane is the
/// set of flat indices of one slice along that axis.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    match (shape.len(), axis) {
        (1, 0) => {
            let lane: Vec<usize> = (0..shape[0]).collect();
            f(&lane);
        }
        (2, 1) => {
            let (r, c) = (shape[0], shape[1]);
            for i in 0..r {
                let lane: Vec<usize> = (i * c..(i + 1) * c).collect();
                f(&lane);
            }
        }
        (2, 0) => {
            let (r, c) = (shape[0], shape[1]);
            for j in 0..c {
                let lane: Vec<usize> = (0..r).map(|i| i * c + j).collect();
                f(&lane);
            }
        }
        _ => unreachable!("rank/axis validated by callers"),
    }
}

// ── Named parameter collections ─────────────────────────────────────────

/// Ordered collection of named, trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        tensor.requires_grad = true;
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Gradient buffers aligned with a [`ParamSet`]'s order.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients(params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect())
    }

    /// `self += scale * other`, used for gradient accumulation over a batch.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

// ── Gradient verification ───────────────────────────────────────────────

pub const GRAD_CHECK_H: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

/// Compares the analytic gradient of a deterministic scalar function
/// against central finite differences, coordinate by coordinate.
///
/// `f` must return the loss and its analytic gradients for the given
/// parameters, and must be deterministic (dropout off or mask frozen).
/// The per-coordinate error is `|a - n| / max(|a|, |n|, 1)`; the report
/// carries the max over coordinates for every parameter.
pub fn grad_check<F>(params: &ParamSet, h: f64, tol: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, Gradients)>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("grad_check step must be > 0, got {h}")));
    }
    let mut work = params.clone();
    let (loss0, analytic) = f(&work)?;
    if !loss0.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite function value".into()));
    }
    if analytic.0.len() != params.len() {
        return Err(Error::Shape(
            "grad_check: gradient count does not match parameter count".into(),
        ));
    }
    let mut entries = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let n_coords = work.tensor_at(i).numel();
        if analytic.0[i].len() != n_coords {
            return Err(Error::Shape(format!(
                "grad_check: gradient size mismatch for {}",
                work.name_at(i)
            )));
        }
        let mut max_rel = 0.0f64;
        for j in 0..n_coords {
            let orig = work.tensor_at(i).data()[j];
            work.tensor_at_mut(i).data_mut()[j] = orig + h;
            let (lp, _) = f(&work)?;
            work.tensor_at_mut(i).data_mut()[j] = orig - h;
            let (lm, _) = f(&work)?;
            work.tensor_at_mut(i).data_mut()[j] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Numeric(
                    "grad_check: non-finite value during perturbation".into(),
                ));
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.0[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            name: work.name_at(i).to_string(),
            max_rel_err: max_rel,
        });
    }
    Ok(GradCheckReport { tol, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn leaf(tape: &mut Tape, t: Tensor) -> NodeId {
        tape.leaf(t)
    }

    fn rand_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, rng)
    }

    // Independent triple-loop matmul used as the reference implementation.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, p, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..p {
                    s += a.at(i, k) * b.at(k, j);
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut rng = SeededRng::new(1);
        let b = rand_tensor(&[3, 4], &mut rng);
        let mut tape = Tape::new();
        let i3 = leaf(&mut tape, Tensor::eye(3));
        let bn = leaf(&mut tape, b.clone());
        let c = tape.matmul(i3, bn).unwrap();
        assert_eq!(tape.value(c).data(), b.data());
    }

    #[test]
    fn matmul_zeros_times_anything_is_zeros() {
        let mut rng = SeededRng::new(2);
        let mut tape = Tape::new();
        let z = leaf(&mut tape, Tensor::zeros(&[2, 3]));
        let b = leaf(&mut tape, rand_tensor(&[3, 4], &mut rng));
        let c = tape.matmul(z, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SeededRng::new(3);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        let expect = matmul_oracle(&a, &b);
        let mut tape = Tape::new();
        let an = leaf(&mut tape, a);
        let bn = leaf(&mut tape, b);
        let c = tape.matmul(an, bn).unwrap();
        for (got, want) in tape.value(c).data().iter().zip(&expect) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, Tensor::zeros(&[2, 3]));
        let b = leaf(&mut tape, Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_constant_slice_is_uniform() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::filled(&[2, 5], 3.7));
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).data() {
            assert_abs_diff_eq!(v, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_dominant_entry_saturates() {
        let mut tape = Tape::new();
        let x = leaf(
            &mut tape,
            Tensor::from_vec(&[1, 3], vec![1e6 + 1.0, 1.0, 0.5]).unwrap(),
        );
        let y = tape.softmax(x, 1).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-9);
    }

    // Reference exp-normalize: no max subtraction (inputs stay in a safe
    // range), compensated summation.
    fn softmax_oracle_row(row: &[f64]) -> Vec<f64> {
        let exps: Vec<f64> = row.iter().map(|&v| v.exp()).collect();
        let mut sum = 0.0;
        let mut comp = 0.0;
        for &e in &exps {
            let y = e - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        exps.iter().map(|&e| e / sum).collect()
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        let mut rng = SeededRng::new(4);
        let x = rand_tensor(&[2, 3], &mut rng);
        let mut tape = Tape::new();
        let xn = leaf(&mut tape, x.clone());
        let y = tape.softmax(xn, 1).unwrap();
        for r in 0..2 {
            let want = softmax_oracle_row(x.row(r));
            for (got, want) in tape.value(y).row(r).iter().zip(&want) {
                assert_abs_diff_eq!(got, want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut rng = SeededRng::new(5);
        let x = rand_tensor(&[4, 3], &mut rng);
        let mut tape = Tape::new();
        let xn = leaf(&mut tape, x);
        let y = tape.softmax(xn, 0).unwrap();
        for j in 0..3 {
            let col: f64 = (0..4).map(|i| tape.value(y).at(i, j)).sum();
            assert_abs_diff_eq!(col, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_invalid_axis_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::zeros(&[2, 2]));
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_constant_row_maps_to_beta() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::filled(&[2, 4], 9.0));
        let g = leaf(&mut tape, Tensor::filled(&[4], 1.0));
        let b = leaf(&mut tape, Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::filled(&[2, 4], 9.0));
        let g = leaf(&mut tape, Tensor::zeros(&[4]));
        let b = leaf(
            &mut tape,
            Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(y).row(1), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = SeededRng::new(6);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, rand_tensor(&[3, 8], &mut rng));
        let g = leaf(&mut tape, Tensor::filled(&[8], 1.0));
        let b = leaf(&mut tape, Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_extent_inputs_are_unconstructible() {
        // T = 0 sequences and zero-length rows are rejected at tensor
        // construction, before any primitive can see them.
        assert!(Tensor::from_vec(&[0, 4], vec![]).is_err());
        assert!(Tensor::from_vec(&[3, 0], vec![]).is_err());
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut rng = SeededRng::new(7);
        let x = rand_tensor(&[4, 4], &mut rng);
        let mut tape = Tape::new();
        let xn = leaf(&mut tape, x.clone());
        let y0 = tape.dropout(xn, 0.0, &mut rng, true).unwrap();
        assert_eq!(tape.value(y0).data(), x.data());
        let y1 = tape.dropout(xn, 0.9, &mut rng, false).unwrap();
        assert_eq!(tape.value(y1).data(), x.data());
    }

    #[test]
    fn dropout_rate_one_rejected() {
        let mut rng = SeededRng::new(8);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::zeros(&[2, 2]));
        assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());
        assert!(tape.dropout(x, 1.5, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_keeps_expected_fraction_and_mean() {
        let n = 1_000_000;
        let mut rng = SeededRng::new(9);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::filled(&[1_000, 1_000], 1.0));
        let y = tape.dropout(x, 0.1, &mut rng, true).unwrap();
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let kept_frac = kept as f64 / n as f64;
        assert!((kept_frac - 0.9).abs() < 0.003, "kept fraction {kept_frac}");
        let mean = tape.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut rng = SeededRng::new(10);
        let x = rand_tensor(&[3, 4], &mut rng);
        let mut tape = Tape::new();
        let xn = leaf(&mut tape, x.clone());
        let w = leaf(&mut tape, Tensor::eye(4));
        let b = leaf(&mut tape, Tensor::zeros(&[4]));
        let y = tape.linear(xn, w, b).unwrap();
        assert_eq!(tape.value(y).data(), x.data());

        let mut tape = Tape::new();
        let xz = leaf(&mut tape, Tensor::zeros(&[2, 4]));
        let w = leaf(&mut tape, Tensor::eye(4));
        let bias = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let b = leaf(&mut tape, bias.clone());
        let y = tape.linear(xz, w, b).unwrap();
        assert_eq!(tape.value(y).row(0), bias.data());
        assert_eq!(tape.value(y).row(1), bias.data());
    }

    #[test]
    fn linear_matches_matmul_plus_bias_oracle() {
        let mut rng = SeededRng::new(11);
        let x = rand_tensor(&[3, 5], &mut rng);
        let w = rand_tensor(&[5, 2], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        let mut tape = Tape::new();
        let xn = leaf(&mut tape, x.clone());
        let wn = leaf(&mut tape, w.clone());
        let bn = leaf(&mut tape, b.clone());
        let y = tape.linear(xn, wn, bn).unwrap();
        let mm = matmul_oracle(&x, &w);
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(tape.value(y).at(r, c), mm[r * 2 + c] + b.data()[c]);
            }
        }
    }

    #[test]
    fn mean_pool_time_examples() {
        let mut tape = Tape::new();
        let x = leaf(
            &mut tape,
            Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(),
        );
        let y = tape.mean_pool_time(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, Tensor::from_rows(&[vec![4.0, 7.0, 9.0]]).unwrap());
        let y = tape.mean_pool_time(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 7.0, 9.0]);
    }

    #[test]
    fn mean_pool_time_matches_column_mean_oracle() {
        let mut rng = SeededRng::new(12);
        let x = rand_tensor(&[5, 3], &mut rng);
        let mut tape = Tape::new();
        let xn = leaf(&mut tape, x.clone());
        let y = tape.mean_pool_time(xn).unwrap();
        for j in 0..3 {
            let want: f64 = (0..5).map(|i| x.at(i, j)).sum::<f64>() / 5.0;
            assert_abs_diff_eq!(tape.value(y).data()[j], want, epsilon = 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_give_ln2() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, Tensor::zeros(&[1, 2]));
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert_abs_diff_eq!(tape.value(loss).data()[0], 2.0f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut tape = Tape::new();
        let logits = leaf(
            &mut tape,
            Tensor::from_vec(&[1, 2], vec![1e6, 0.0]).unwrap(),
        );
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, Tensor::zeros(&[2, 2]));
        assert!(tape.cross_entropy(logits, &[0, 2]).is_err());
        assert!(tape.cross_entropy(logits, &[0]).is_err());
    }

    #[test]
    fn stack_rows_concatenates_and_checks_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let b = leaf(&mut tape, Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let s = tape.stack_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 2]);
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0, 4.0]);
        let c = leaf(&mut tape, Tensor::zeros(&[3]));
        assert!(tape.stack_rows(&[a, c]).is_err());
    }

    #[test]
    fn grad_check_quadratic_matches_2x() {
        let mut params = ParamSet::new();
        let mut rng = SeededRng::new(13);
        params
            .insert("x", Tensor::uniform(&[1, 6], -2.0, 2.0, &mut rng))
            .unwrap();
        let report = grad_check(&params, GRAD_CHECK_H, GRAD_CHECK_TOL, |p| {
            let mut tape = Tape::new();
            let x = tape.leaf(p.get("x").unwrap().clone());
            let xt = tape.transpose(x)?;
            let s = tape.matmul(x, xt)?;
            tape.backward(s)?;
            let loss = tape.value(s).data()[0];
            let grads = Gradients(vec![tape.grad(x).unwrap().to_vec()]);
            Ok((loss, grads))
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
        // Analytic gradient of sum(x^2) is 2x; verify directly too.
        let mut tape = Tape::new();
        let x = tape.leaf(params.get("x").unwrap().clone());
        let xt = tape.transpose(x).unwrap();
        let s = tape.matmul(x, xt).unwrap();
        tape.backward(s).unwrap();
        for (g, v) in tape.grad(x).unwrap().iter().zip(params.get("x").unwrap().data()) {
            assert_abs_diff_eq!(*g, 2.0 * v, epsilon = 1e-12);
        }
    }

    #[test]
    fn grad_check_flags_corrupted_backward() {
        let mut params = ParamSet::new();
        let mut rng = SeededRng::new(14);
        params
            .insert("x", Tensor::uniform(&[1, 4], 0.5, 1.5, &mut rng))
            .unwrap();
        let report = grad_check(&params, GRAD_CHECK_H, GRAD_CHECK_TOL, |p| {
            let mut tape = Tape::new();
            let x = tape.leaf(p.get("x").unwrap().clone());
            let xt = tape.transpose(x)?;
            let s = tape.matmul(x, xt)?;
            tape.backward(s)?;
            let loss = tape.value(s).data()[0];
            // Deliberately wrong scale on the analytic gradient.
            let grads = Gradients(vec![tape
                .grad(x)
                .unwrap()
                .iter()
                .map(|g| g * 1.01)
                .collect()]);
            Ok((loss, grads))
        })
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn backward_requires_scalar_target() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]).with_grad());
        assert!(tape.backward(x).is_err());
    }
}
