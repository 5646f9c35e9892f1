//! Append-only computation tape with reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op as a node; node ids are handed
//! out in topological order, so the backward pass is a single reverse
//! walk over the arena. Tensors returned by op constructors share their
//! value buffer with the node that produced them.
//!
//! Gradients flow only into subtrees that contain a differentiable
//! leaf; constants are skipped. Leaf gradients persist on the graph
//! (and accumulate over repeated backward calls) until [`Graph::reset`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{NodeId, Tensor};

/// How a straight-through gate routes gradients to its logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StBackward {
    /// Treat the sampled mask as if it were the gate probability.
    #[default]
    ThroughP,
    /// Treat the sampled mask as if it were the tempered soft sample.
    ThroughSoftSample,
}

/// Forward/backward behaviour of a straight-through gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StConfig {
    /// Hard gates emit {0,1}; relaxed gates emit the soft sample itself.
    pub hard: bool,
    pub backward: StBackward,
    pub temperature: f32,
}

impl Default for StConfig {
    fn default() -> Self {
        StConfig { hard: true, backward: StBackward::ThroughP, temperature: 1.0 }
    }
}

/// Broadcast pattern of a mask over an [N, C, ...] activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskLayout {
    /// z: [N, C] — one value per sample and channel.
    PerSampleChannel,
    /// z: [C] — shared across the batch.
    PerChannel,
    /// z: [N] — one value per sample, all channels.
    PerSample,
    /// z: [1] — one value for everything.
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, k: NodeId, dims: ops::ConvDims },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, n: usize, c: usize, s: usize, xhat: Vec<f32>, invstd: Vec<f32>, train: bool },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ChannelMask { x: NodeId, z: NodeId, layout: MaskLayout },
    /// Data-independent gate: two scalar logits, one sample per batch row.
    GateStInd { w0: NodeId, w1: NodeId, p: f32, soft: Vec<f32>, cfg: StConfig },
    /// Data-dependent gate: per-sample logit rows [N, 2].
    GateStDep { logits: NodeId, p: Vec<f32>, soft: Vec<f32>, cfg: StConfig },
    GlobalAvgPool { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId, n: usize, ci: usize, k: usize },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f32> },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    /// sum_i coeffs[i] * parents[i] + bias, all scalars. The bias only
    /// affects the forward value, so it is not stored.
    AffineCombination { parents: Vec<NodeId>, coeffs: Vec<f32> },
    /// (c - x)^2 elementwise.
    SquaredDiffFromConst { x: NodeId, c: f32 },
    /// Stacks G vectors of length N into [N, G].
    StackColumns { parents: Vec<NodeId> },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu { x } | Op::GlobalAvgPool { x } | Op::SumAll { x } | Op::MeanAll { x } | Op::SquaredDiffFromConst { x, .. } => vec![*x],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ChannelMask { x, z, .. } => vec![*x, *z],
            Op::GateStInd { w0, w1, .. } => vec![*w0, *w1],
            Op::GateStDep { logits, .. } => vec![*logits],
            Op::Linear { x, w, b, .. } => vec![*x, *w, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::AffineCombination { parents, .. } | Op::StackColumns { parents } => parents.clone(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f32>>,
    op: Op,
    needs_grad: bool,
    /// Persistent gradient; populated for leaves only.
    grad: Option<Vec<f32>>,
}

/// The tape. One graph instance is built per forward pass and reset
/// (or dropped) after the optimizer step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Leaf nodes leased from a parameter store: (node, param index).
    leases: Vec<(NodeId, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes and accumulated gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.leases.clear();
    }

    /// Registers a non-differentiable input (data batches, fixed masks).
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.push_leaf(t, false)
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, t: &Tensor, needs_grad: bool) -> Tensor {
        let value = t.buffer();
        let id = self.push(Node {
            shape: t.shape().to_vec(),
            value: Arc::clone(&value),
            op: Op::Leaf,
            needs_grad,
            grad: None,
        });
        Tensor::from_buffer(t.shape().to_vec(), value, Some(id))
    }

    pub(crate) fn mark_lease(&mut self, node: NodeId, param: usize) {
        self.leases.push((node, param));
    }

    pub(crate) fn leases(&self) -> &[(NodeId, usize)] {
        &self.leases
    }

    /// Accumulated gradient of a leaf after backward, if any.
    pub fn grad(&self, t: &Tensor) -> Option<&[f32]> {
        let id = t.node?;
        self.nodes.get(id)?.grad.as_deref()
    }

    pub(crate) fn node_grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes.get(id)?.grad.as_deref()
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Resolves a tensor to its node, verifying it still aliases the
    /// node's buffer (guards against tensors from a reset graph and
    /// against buffers detached by copy-on-write mutation).
    fn bind(&self, t: &Tensor) -> Result<NodeId> {
        let id = t.node.ok_or(Error::DetachedTensor)?;
        let node = self.nodes.get(id).ok_or(Error::DetachedTensor)?;
        if !t.aliases(&node.value) {
            return Err(Error::DetachedTensor);
        }
        Ok(id)
    }

    fn emit(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op) -> Tensor {
        let needs_grad = op.parents().iter().any(|&p| self.nodes[p].needs_grad);
        let value = Arc::new(value);
        let id = self.push(Node {
            shape: shape.clone(),
            value: Arc::clone(&value),
            op,
            needs_grad,
            grad: None,
        });
        Tensor::from_buffer(shape, value, Some(id))
    }

    fn value(&self, id: NodeId) -> Arc<Vec<f32>> {
        Arc::clone(&self.nodes[id].value)
    }

    // ---- op constructors -------------------------------------------------

    /// 2-D cross-correlation, no bias. x: [N,Ci,H,W], k: [Co,Ci,Kh,Kw].
    pub fn conv2d(&mut self, x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let xid = self.bind(x)?;
        let kid = self.bind(k)?;
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", "input rank", "4", format!("{:?}", xs)));
        }
        if ks.len() != 4 {
            return Err(Error::shape("conv2d", "kernel rank", "4", format!("{:?}", ks)));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape("conv2d", "input channels", ks[1].to_string(), xs[1].to_string()));
        }
        let (ho, wo) = ops::conv_out_dims(xs[2], xs[3], ks[2], ks[3], stride, padding)?;
        let dims = ops::ConvDims {
            n: xs[0], ci: xs[1], h: xs[2], w: xs[3],
            co: ks[0], kh: ks[2], kw: ks[3],
            stride, padding, ho, wo,
        };
        let y = ops::conv2d_forward(x.data(), k.data(), &dims);
        Ok(self.emit(vec![dims.n, dims.co, ho, wo], y, Op::Conv2d { x: xid, k: kid, dims }))
    }

    /// Batch normalization over channel dim 1 of [N,C] or [N,C,H,W].
    ///
    /// Training mode normalizes with batch statistics and folds them
    /// into the running buffers (unbiased variance, EMA with the given
    /// momentum). Eval mode normalizes with the running buffers. Both
    /// modes are differentiable w.r.t. x, gamma and beta.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        train: bool,
        momentum: f32,
        eps: f32,
    ) -> Result<Tensor> {
        let xid = self.bind(x)?;
        let gid = self.bind(gamma)?;
        let bid = self.bind(beta)?;
        let xs = x.shape();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::shape("batchnorm", "input rank", "2 or 4", format!("{:?}", xs)));
        }
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product::<usize>().max(1);
        for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", &*running_mean), ("running_var", &*running_var)] {
            if t.shape() != [c] {
                return Err(Error::shape("batchnorm", name, format!("[{c}]"), format!("{:?}", t.shape())));
            }
        }
        if eps <= 0.0 {
            return Err(Error::invalid("batchnorm", "eps must be positive"));
        }

        let (mean, var): (Vec<f32>, Vec<f32>) = if train {
            let m = n * s;
            if m < 2 {
                return Err(Error::BatchTooSmall { elements: m });
            }
            let stats = ops::batch_stats(x.data(), n, c, s);
            for (ch, (&mu, &v)) in stats.mean.iter().zip(&stats.var).enumerate() {
                if !mu.is_finite() || !v.is_finite() {
                    return Err(Error::NonFiniteStats { channel: ch, mean: mu, var: v });
                }
            }
            let unbias = m as f32 / (m as f32 - 1.0);
            {
                let rm = running_mean.data_mut();
                for (r, &mu) in rm.iter_mut().zip(&stats.mean) {
                    *r = (1.0 - momentum) * *r + momentum * mu;
                }
            }
            {
                let rv = running_var.data_mut();
                for (r, &v) in rv.iter_mut().zip(&stats.var) {
                    *r = (1.0 - momentum) * *r + momentum * v * unbias;
                }
            }
            (stats.mean, stats.var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };

        let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = ops::bn_apply(x.data(), n, c, s, &mean, &invstd, gamma.data(), beta.data());
        Ok(self.emit(
            xs.to_vec(),
            y,
            Op::BatchNorm { x: xid, gamma: gid, beta: bid, n, c, s, xhat, invstd, train },
        ))
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.bind(x)?;
        let y: Vec<f32> = x.data().iter().map(|&v| v.max(0.0)).collect();
        Ok(self.emit(x.shape().to_vec(), y, Op::Relu { x: xid }))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let aid = self.bind(a)?;
        let bid = self.bind(b)?;
        if a.shape() != b.shape() {
            return Err(Error::shape("add", "operand shapes", &format!("{:?}", a.shape()), format!("{:?}", b.shape())));
        }
        let y: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.emit(a.shape().to_vec(), y, Op::Add { a: aid, b: bid }))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let aid = self.bind(a)?;
        let bid = self.bind(b)?;
        if a.shape() != b.shape() {
            return Err(Error::shape("mul", "operand shapes", &format!("{:?}", a.shape()), format!("{:?}", b.shape())));
        }
        let y: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.emit(a.shape().to_vec(), y, Op::Mul { a: aid, b: bid }))
    }

    /// Multiplies an [N,C,...] activation by a broadcast mask.
    pub fn channel_mask(&mut self, x: &Tensor, z: &Tensor, layout: MaskLayout) -> Result<Tensor> {
        let xid = self.bind(x)?;
        let zid = self.bind(z)?;
        let xs = x.shape();
        if xs.len() < 2 {
            return Err(Error::shape("channel_mask", "input rank", ">= 2", format!("{:?}", xs)));
        }
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product::<usize>().max(1);
        let expect: Vec<usize> = match layout {
            MaskLayout::PerSampleChannel => vec![n, c],
            MaskLayout::PerChannel => vec![c],
            MaskLayout::PerSample => vec![n],
            MaskLayout::Scalar => vec![1],
        };
        if z.shape() != expect.as_slice() {
            return Err(Error::shape("channel_mask", "mask shape", &format!("{:?}", expect), format!("{:?}", z.shape())));
        }
        let zd = z.data();
        let xd = x.data();
        let mut y = vec![0.0f32; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let zv = match layout {
                    MaskLayout::PerSampleChannel => zd[i * c + ch],
                    MaskLayout::PerChannel => zd[ch],
                    MaskLayout::PerSample => zd[i],
                    MaskLayout::Scalar => zd[0],
                };
                let base = (i * c + ch) * s;
                if zv == 1.0 {
                    y[base..base + s].copy_from_slice(&xd[base..base + s]);
                } else if zv != 0.0 {
                    for j in base..base + s {
                        y[j] = xd[j] * zv;
                    }
                }
            }
        }
        Ok(self.emit(xs.to_vec(), y, Op::ChannelMask { x: xid, z: zid, layout }))
    }

    /// Straight-through gate with shared (data-independent) logits.
    ///
    /// `noise` holds one (g0, g1) Gumbel pair per batch row; the output
    /// is one mask value per row. Hard mode emits 1 when w1+g1 > w0+g0.
    pub fn gate_st_independent(
        &mut self,
        w0: &Tensor,
        w1: &Tensor,
        noise: &[(f32, f32)],
        cfg: StConfig,
    ) -> Result<Tensor> {
        let id0 = self.bind(w0)?;
        let id1 = self.bind(w1)?;
        if !w0.is_scalar() || !w1.is_scalar() {
            return Err(Error::invalid("gate_st", "independent gate logits must be scalars"));
        }
        if noise.is_empty() {
            return Err(Error::invalid("gate_st", "need at least one noise pair"));
        }
        if cfg.temperature <= 0.0 {
            return Err(Error::invalid("gate_st", "temperature must be positive"));
        }
        let (v0, v1) = (w0.item(), w1.item());
        let p = crate::gating::gate_probability(v0, v1);
        let mut soft = Vec::with_capacity(noise.len());
        let mut z = Vec::with_capacity(noise.len());
        for &(g0, g1) in noise {
            let diff = (v1 + g1) - (v0 + g0);
            let sj = sigmoid(diff / cfg.temperature);
            soft.push(sj);
            z.push(if cfg.hard { (diff > 0.0) as u8 as f32 } else { sj });
        }
        Ok(self.emit(vec![noise.len()], z, Op::GateStInd { w0: id0, w1: id1, p, soft, cfg }))
    }

    /// Straight-through gate with per-sample logits [N, 2] (row = (w0, w1)).
    pub fn gate_st_dependent(
        &mut self,
        logits: &Tensor,
        noise: &[(f32, f32)],
        cfg: StConfig,
    ) -> Result<Tensor> {
        let lid = self.bind(logits)?;
        let ls = logits.shape();
        if ls.len() != 2 || ls[1] != 2 {
            return Err(Error::shape("gate_st", "logits shape", "[N, 2]", format!("{:?}", ls)));
        }
        let n = ls[0];
        if noise.len() != n {
            return Err(Error::shape("gate_st", "noise pairs", &n.to_string(), noise.len().to_string()));
        }
        if cfg.temperature <= 0.0 {
            return Err(Error::invalid("gate_st", "temperature must be positive"));
        }
        let ld = logits.data();
        let mut p = Vec::with_capacity(n);
        let mut soft = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for (j, &(g0, g1)) in noise.iter().enumerate() {
            let (l0, l1) = (ld[2 * j], ld[2 * j + 1]);
            p.push(crate::gating::gate_probability(l0, l1));
            let diff = (l1 + g1) - (l0 + g0);
            let sj = sigmoid(diff / cfg.temperature);
            soft.push(sj);
            z.push(if cfg.hard { (diff > 0.0) as u8 as f32 } else { sj });
        }
        Ok(self.emit(vec![n], z, Op::GateStDep { logits: lid, p, soft, cfg }))
    }

    /// Mean over the spatial dims: [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.bind(x)?;
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", "input rank", "4", format!("{:?}", xs)));
        }
        let (n, c, s) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = x.data();
        let mut y = vec![0.0f32; n * c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                let mut acc = 0.0f32;
                for &v in &xd[base..base + s] {
                    acc += v;
                }
                y[i * c + ch] = acc / s as f32;
            }
        }
        Ok(self.emit(vec![n, c], y, Op::GlobalAvgPool { x: xid }))
    }

    /// Fully connected layer. x: [N,Ci], w: [Ci,K], b: [K].
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let xid = self.bind(x)?;
        let wid = self.bind(w)?;
        let bid = self.bind(b)?;
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape("linear", "operand ranks", "2 and 2", format!("{:?} and {:?}", xs, ws)));
        }
        if xs[1] != ws[0] {
            return Err(Error::shape("linear", "inner dims", &ws[0].to_string(), xs[1].to_string()));
        }
        let (n, ci, k) = (xs[0], xs[1], ws[1]);
        if b.shape() != [k] {
            return Err(Error::shape("linear", "bias shape", &format!("[{k}]"), format!("{:?}", b.shape())));
        }
        let y = ops::linear_forward(x.data(), w.data(), b.data(), n, ci, k);
        Ok(self.emit(vec![n, k], y, Op::Linear { x: xid, w: wid, b: bid, n, ci, k }))
    }

    /// Mean softmax cross-entropy over the batch. logits: [N,K].
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let lid = self.bind(logits)?;
        let ls = logits.shape();
        if ls.len() != 2 {
            return Err(Error::shape("softmax_ce", "logits rank", "2", format!("{:?}", ls)));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::shape("softmax_ce", "labels", &n.to_string(), labels.len().to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("softmax_ce", format!("label {bad} out of range for {k} classes")));
        }
        let (loss, probs) = ops::softmax_ce_forward(logits.data(), labels, n, k);
        Ok(self.emit(vec![1], vec![loss], Op::SoftmaxCrossEntropy { logits: lid, labels: labels.to_vec(), probs }))
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.bind(x)?;
        let mut acc = 0.0f32;
        for &v in x.data() {
            acc += v;
        }
        Ok(self.emit(vec![1], vec![acc], Op::SumAll { x: xid }))
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let xid = self.bind(x)?;
        let mut acc = 0.0f32;
        for &v in x.data() {
            acc += v;
        }
        let y = acc / x.len() as f32;
        Ok(self.emit(vec![1], vec![y], Op::MeanAll { x: xid }))
    }

    /// Weighted sum of scalar nodes plus a constant.
    pub fn affine_combination(&mut self, parts: &[(&Tensor, f32)], bias: f32) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("affine_combination", "need at least one term"));
        }
        let mut parents = Vec::with_capacity(parts.len());
        let mut coeffs = Vec::with_capacity(parts.len());
        let mut acc = bias as f64;
        for (t, c) in parts {
            let id = self.bind(t)?;
            if !t.is_scalar() {
                return Err(Error::shape("affine_combination", "term shape", "[1]", format!("{:?}", t.shape())));
            }
            acc += (*c as f64) * (t.item() as f64);
            parents.push(id);
            coeffs.push(*c);
        }
        Ok(self.emit(vec![1], vec![acc as f32], Op::AffineCombination { parents, coeffs }))
    }

    /// (c - x)^2 elementwise.
    pub fn squared_diff_from_const(&mut self, x: &Tensor, c: f32) -> Result<Tensor> {
        let xid = self.bind(x)?;
        let y: Vec<f32> = x.data().iter().map(|&v| (c - v) * (c - v)).collect();
        Ok(self.emit(x.shape().to_vec(), y, Op::SquaredDiffFromConst { x: xid, c }))
    }

    /// Stacks G equal-length vectors into [N, G] column-wise.
    pub fn stack_columns(&mut self, columns: &[&Tensor]) -> Result<Tensor> {
        if columns.is_empty() {
            return Err(Error::invalid("stack_columns", "need at least one column"));
        }
        let n = columns[0].len();
        let g = columns.len();
        let mut parents = Vec::with_capacity(g);
        for t in columns {
            let id = self.bind(t)?;
            if t.shape() != [n] {
                return Err(Error::shape("stack_columns", "column shape", &format!("[{n}]"), format!("{:?}", t.shape())));
            }
            parents.push(id);
        }
        let mut y = vec![0.0f32; n * g];
        for (c, t) in columns.iter().enumerate() {
            for (i, &v) in t.data().iter().enumerate() {
                y[i * g + c] = v;
            }
        }
        Ok(self.emit(vec![n, g], y, Op::StackColumns { parents }))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode pass from a scalar loss. Gradients of differentiable
    /// leaves accumulate on the graph; read them with [`Graph::grad`] or
    /// fold them into a parameter store.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        let lid = self.bind(loss)?;
        if self.nodes[lid].shape.iter().product::<usize>() != 1 {
            return Err(Error::LossNotScalar { shape: self.nodes[lid].shape.clone() });
        }
        // The arena must be topologically ordered; a parent id at or
        // above its child indicates a corrupted tape.
        for (id, node) in self.nodes.iter().enumerate() {
            for p in node.op.parents() {
                if p >= id {
                    return Err(Error::GraphCorruption { node: id, parent: p });
                }
            }
        }

        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[lid] = Some(vec![1.0]);

        for id in (0..=lid).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let slot = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, v) in slot.iter_mut().zip(&g) {
                    *s += v;
                }
                continue;
            }
            self.dispatch(id, &g, &mut grads);
        }
        Ok(())
    }

    /// Adds `delta` into the pending gradient of `pid` if that subtree
    /// is differentiable.
    fn stage(&self, grads: &mut [Option<Vec<f32>>], pid: NodeId, delta: impl FnOnce(&mut [f32])) {
        if !self.nodes[pid].needs_grad {
            return;
        }
        let len = self.nodes[pid].value.len();
        let slot = grads[pid].get_or_insert_with(|| vec![0.0; len]);
        delta(slot);
    }

    fn dispatch(&self, id: NodeId, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Conv2d { x, k, dims } => {
                let xv = self.value(*x);
                let kv = self.value(*k);
                if self.nodes[*k].needs_grad {
                    let dk = ops::conv2d_backward_kernel(&xv, g, dims);
                    self.stage(grads, *k, |s| add_into(s, &dk));
                }
                if self.nodes[*x].needs_grad {
                    let dx = ops::conv2d_backward_input(&kv, g, dims);
                    self.stage(grads, *x, |s| add_into(s, &dx));
                }
            }
            Op::BatchNorm { x, gamma, beta, n, c, s, xhat, invstd, train } => {
                let gv = self.value(*gamma);
                let (dx, dgamma, dbeta) = ops::bn_backward(g, xhat, invstd, &gv, *n, *c, *s, *train);
                self.stage(grads, *x, |sl| add_into(sl, &dx));
                self.stage(grads, *gamma, |sl| add_into(sl, &dgamma));
                self.stage(grads, *beta, |sl| add_into(sl, &dbeta));
            }
            Op::Relu { x } => {
                let yv = self.value(id);
                self.stage(grads, *x, |sl| {
                    for ((s, &gv), &yv) in sl.iter_mut().zip(g).zip(yv.iter()) {
                        if yv > 0.0 {
                            *s += gv;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.stage(grads, *a, |sl| add_into(sl, g));
                self.stage(grads, *b, |sl| add_into(sl, g));
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.stage(grads, *a, |sl| {
                    for ((s, &gv), &bv) in sl.iter_mut().zip(g).zip(bv.iter()) {
                        *s += gv * bv;
                    }
                });
                self.stage(grads, *b, |sl| {
                    for ((s, &gv), &av) in sl.iter_mut().zip(g).zip(av.iter()) {
                        *s += gv * av;
                    }
                });
            }
            Op::ChannelMask { x, z, layout } => {
                let xs = &self.nodes[*x].shape;
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product::<usize>().max(1);
                let xv = self.value(*x);
                let zv = self.value(*z);
                let layout = *layout;
                self.stage(grads, *x, |sl| {
                    for i in 0..n {
                        for ch in 0..c {
                            let zval = mask_value(&zv, layout, i, ch, c);
                            if zval == 0.0 {
                                continue;
                            }
                            let base = (i * c + ch) * s;
                            for j in base..base + s {
                                sl[j] += g[j] * zval;
                            }
                        }
                    }
                });
                self.stage(grads, *z, |sl| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * s;
                            let mut acc = 0.0f32;
                            for j in base..base + s {
                                acc += g[j] * xv[j];
                            }
                            match layout {
                                MaskLayout::PerSampleChannel => sl[i * c + ch] += acc,
                                MaskLayout::PerChannel => sl[ch] += acc,
                                MaskLayout::PerSample => sl[i] += acc,
                                MaskLayout::Scalar => sl[0] += acc,
                            }
                        }
                    }
                });
            }
            Op::GateStInd { w0, w1, p, soft, cfg } => {
                // Straight-through: substitute the sample's derivative
                // by d(p)/dw or d(soft)/dw per the configured rule.
                let mut acc = 0.0f64;
                match cfg.backward {
                    StBackward::ThroughP => {
                        let slope = (*p as f64) * (1.0 - *p as f64);
                        for &gv in g {
                            acc += gv as f64 * slope;
                        }
                    }
                    StBackward::ThroughSoftSample => {
                        for (&gv, &sj) in g.iter().zip(soft) {
                            acc += gv as f64 * (sj as f64) * (1.0 - sj as f64) / cfg.temperature as f64;
                        }
                    }
                }
                let acc = acc as f32;
                self.stage(grads, *w1, |sl| sl[0] += acc);
                self.stage(grads, *w0, |sl| sl[0] -= acc);
            }
            Op::GateStDep { logits, p, soft, cfg } => {
                let (pv, sv, cfg) = (p.clone(), soft.clone(), *cfg);
                self.stage(grads, *logits, |sl| {
                    for (j, &gv) in g.iter().enumerate() {
                        let slope = match cfg.backward {
                            StBackward::ThroughP => pv[j] * (1.0 - pv[j]),
                            StBackward::ThroughSoftSample => sv[j] * (1.0 - sv[j]) / cfg.temperature,
                        };
                        sl[2 * j + 1] += gv * slope;
                        sl[2 * j] -= gv * slope;
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let xs = &self.nodes[*x].shape;
                let (n, c, s) = (xs[0], xs[1], xs[2] * xs[3]);
                self.stage(grads, *x, |sl| {
                    for i in 0..n {
                        for ch in 0..c {
                            let gv = g[i * c + ch] / s as f32;
                            let base = (i * c + ch) * s;
                            for slot in &mut sl[base..base + s] {
                                *slot += gv;
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b, n, ci, k } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (dx, dw, db) = ops::linear_backward(&xv, &wv, g, *n, *ci, *k);
                self.stage(grads, *x, |sl| add_into(sl, &dx));
                self.stage(grads, *w, |sl| add_into(sl, &dw));
                self.stage(grads, *b, |sl| add_into(sl, &db));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f32;
                let labels = labels.clone();
                let probs = probs.clone();
                self.stage(grads, *logits, |sl| {
                    for i in 0..n {
                        for j in 0..k {
                            let onehot = (labels[i] == j) as u8 as f32;
                            sl[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let gv = g[0];
                self.stage(grads, *x, |sl| {
                    for s in sl.iter_mut() {
                        *s += gv;
                    }
                });
            }
            Op::MeanAll { x } => {
                let len = self.nodes[*x].value.len();
                let gv = g[0] / len as f32;
                self.stage(grads, *x, |sl| {
                    for s in sl.iter_mut() {
                        *s += gv;
                    }
                });
            }
            Op::AffineCombination { parents, coeffs } => {
                let gv = g[0];
                for (&pid, &cv) in parents.iter().zip(coeffs) {
                    self.stage(grads, pid, |sl| sl[0] += gv * cv);
                }
            }
            Op::SquaredDiffFromConst { x, c } => {
                let xv = self.value(*x);
                let c = *c;
                self.stage(grads, *x, |sl| {
                    for ((s, &gv), &v) in sl.iter_mut().zip(g).zip(xv.iter()) {
                        *s += gv * 2.0 * (v - c);
                    }
                });
            }
            Op::StackColumns { parents } => {
                let gcols = parents.len();
                for (cidx, &pid) in parents.iter().enumerate() {
                    self.stage(grads, pid, |sl| {
                        for (i, s) in sl.iter_mut().enumerate() {
                            *s += g[i * gcols + cidx];
                        }
                    });
                }
            }
        }
    }
}

fn add_into(slot: &mut [f32], delta: &[f32]) {
    debug_assert_eq!(slot.len(), delta.len());
    for (s, d) in slot.iter_mut().zip(delta) {
        *s += d;
    }
}

fn mask_value(z: &[f32], layout: MaskLayout, i: usize, ch: usize, c: usize) -> f32 {
    match layout {
        MaskLayout::PerSampleChannel => z[i * c + ch],
        MaskLayout::PerChannel => z[ch],
        MaskLayout::PerSample => z[i],
        MaskLayout::Scalar => z[0],
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_sum_and_square() {
        // loss = (2 - sum(x))^2 with x = [0.5, 0.5]: d loss/dx_i = -2(2-1) = -2... sign check:
        // d/dx (c - s)^2 = 2(s - c) = 2(1 - 2) = -2.
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let s = g.sum_all(&x).unwrap();
        let loss = g.squared_diff_from_const(&s, 2.0).unwrap();
        assert!((loss.item() - 1.0).abs() < 1e-6);
        g.backward(&loss).unwrap();
        assert_eq!(g.grad(&x).unwrap(), &[-2.0, -2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![1], vec![3.0]).unwrap());
        let loss = g.squared_diff_from_const(&x, 1.0).unwrap();
        g.backward(&loss).unwrap();
        g.backward(&loss).unwrap();
        // each pass contributes 2*(3-1) = 4.
        assert_eq!(g.grad(&x).unwrap(), &[8.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![1], vec![3.0]).unwrap());
        let loss = g.squared_diff_from_const(&x, 1.0).unwrap();
        g.backward(&loss).unwrap();
        assert!(g.grad(&x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = g.relu(&x).unwrap();
        let err = g.backward(&y).unwrap_err();
        assert!(err.to_string().contains("scalar"), "{err}");
    }

    #[test]
    fn tensor_from_reset_graph_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![1], vec![1.0]).unwrap());
        g.reset();
        let err = g.sum_all(&x).unwrap_err();
        assert!(matches!(err, Error::DetachedTensor));
    }

    #[test]
    fn mul_product_rule() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
        let b = g.leaf(&Tensor::new(vec![2], vec![5.0, 7.0]).unwrap());
        let y = g.mul(&a, &b).unwrap();
        let loss = g.sum_all(&y).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(g.grad(&a).unwrap(), &[5.0, 7.0]);
        assert_eq!(g.grad(&b).unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn mask_layouts_broadcast_and_reduce() {
        // x: [2, 2, 1, 1]; per-channel mask [C]=[1,0].
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = g.leaf(&Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let y = g.channel_mask(&x, &z, MaskLayout::PerChannel).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 3.0, 0.0]);
        let loss = g.sum_all(&y).unwrap();
        g.backward(&loss).unwrap();
        // dz[c] = sum over batch of x values in that channel.
        assert_eq!(g.grad(&z).unwrap(), &[4.0, 6.0]);
        assert_eq!(g.grad(&x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn straight_through_gate_routes_gradient_to_logits() {
        // Hard sample blocks the true derivative; through-p substitutes
        // p(1-p) with opposite signs on the two logits.
        let mut g = Graph::new();
        let w0 = g.leaf(&Tensor::scalar(0.0));
        let w1 = g.leaf(&Tensor::scalar(0.0));
        let noise = vec![(0.5f32, -0.3f32), (-1.0, 2.0)];
        let z = g.gate_st_independent(&w0, &w1, &noise, StConfig::default()).unwrap();
        // diffs: -0.8 -> 0, +3.0 -> 1.
        assert_eq!(z.data(), &[0.0, 1.0]);
        let loss = g.sum_all(&z).unwrap();
        g.backward(&loss).unwrap();
        // p = 0.5, slope = 0.25 per sample, two samples.
        assert!((g.grad(&w1).unwrap()[0] - 0.5).abs() < 1e-6);
        assert!((g.grad(&w0).unwrap()[0] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn relaxed_gate_emits_soft_samples() {
        let mut g = Graph::new();
        let w0 = g.leaf(&Tensor::scalar(0.0));
        let w1 = g.leaf(&Tensor::scalar(0.0));
        let cfg = StConfig { hard: false, backward: StBackward::ThroughSoftSample, temperature: 1.0 };
        let z = g.gate_st_independent(&w0, &w1, &[(0.0, 0.0)], cfg).unwrap();
        assert!((z.data()[0] - 0.5).abs() < 1e-6);
        let loss = g.sum_all(&z).unwrap();
        g.backward(&loss).unwrap();
        // true derivative of sigmoid at 0 = 0.25.
        assert!((g.grad(&w1).unwrap()[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_gradient_sums_to_zero_per_row() {
        let mut g = Graph::new();
        let logits = g.leaf(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 1.0]).unwrap());
        let loss = g.softmax_cross_entropy(&logits, &[1, 2]).unwrap();
        g.backward(&loss).unwrap();
        let gd = g.grad(&logits).unwrap();
        for row in gd.chunks(3) {
            let s: f32 = row.iter().sum();
            assert!(s.abs() < 1e-6);
        }
    }

    #[test]
    fn stack_columns_round_trips_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let m = g.stack_columns(&[&a, &b]).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[1.0, 3.0, 2.0, 4.0]);
        let w = g.constant(&Tensor::new(vec![2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        let prod = g.mul(&m, &w).unwrap();
        let loss = g.sum_all(&prod).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(g.grad(&a).unwrap(), &[10.0, 30.0]);
        assert_eq!(g.grad(&b).unwrap(), &[20.0, 40.0]);
    }
}
