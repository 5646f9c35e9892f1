//! Exporting a thresholded gated network as a smaller dense network.
//!
//! With data-independent gates, thresholding the open probabilities at
//! `tau` fixes a binary keep/drop decision per gated channel group. A
//! dropped channel is exactly zero everywhere it is read, and a zero
//! input channel contributes exact zero terms to every convolution
//! accumulator, so slicing the dropped channels out of the kernels
//! leaves every kept activation bit-identical. The exported network
//! therefore reproduces the thresholded original within floating-point
//! equality, not just approximately — [`verify_pruned_equivalence`]
//! checks this on random inputs.
//!
//! The pruned network carries full-width tensors *between* blocks
//! (identity shortcuts keep every channel alive) and does its slicing
//! inside each block: a gather before the first convolution, dense
//! kernels at the kept widths, and a scatter back to full width before
//! the residual add. Its [`FlopsModel`] has no gate sites; its static
//! maximum equals the original model's realized count under the same
//! threshold masks, exactly, in integer arithmetic.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::flops::{ConvEntry, FlopsModel};
use crate::graph::Graph;
use crate::network::{ForwardCfg, GateKind, GateSource, GatedNetwork, Granularity, MaskSitePos, BN_EPS};
use crate::ops;
use crate::optim::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

/// Default tolerance for the logit comparison in
/// [`verify_pruned_equivalence`]. The construction is exact, so any
/// nonzero difference indicates a real defect; the tolerance only
/// guards the reported number against platform quirks.
pub const DEFAULT_VERIFY_TOL: f32 = 1e-5;

/// A convolution fused with inference-mode batchnorm and ReLU.
///
/// The forward mirrors the graph ops bit for bit: the same convolution
/// kernel, `invstd = 1 / sqrt(running_var + eps)` in `f32`, the same
/// normalize-scale-shift expression, and `max(v, 0)` for ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    /// Kernel, `[out, in, kh, kw]`, already sliced to kept channels.
    pub weight: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl ConvBn {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn check(&self, what: &'static str) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 4 {
            return Err(Error::shape(what, "kernel rank", "4", format!("{ws:?}")));
        }
        let co = ws[0];
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [co] {
                return Err(Error::invalid(
                    "pruned network",
                    format!("{what}: {name} has shape {:?}, kernel wants [{co}]", t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// conv -> batchnorm (running statistics) -> ReLU on a raw buffer.
    /// Returns the output buffer and its spatial dimensions.
    fn forward(&self, x: &[f32], n: usize, h: usize, w: usize) -> Result<(Vec<f32>, usize, usize)> {
        let ws = self.weight.shape();
        let (co, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (ho, wo) = ops::conv_out_dims(h, w, kh, kw, self.stride, self.padding)?;
        let dims = ops::ConvDims { n, ci, h, w, co, kh, kw, stride: self.stride, padding: self.padding, ho, wo };
        let y = ops::conv2d_forward(x, self.weight.data(), &dims);
        let invstd: Vec<f32> = self.running_var.data().iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (mut y, _) = ops::bn_apply(
            &y,
            n,
            co,
            ho * wo,
            self.running_mean.data(),
            &invstd,
            self.gamma.data(),
            self.beta.data(),
        );
        for v in &mut y {
            *v = v.max(0.0);
        }
        Ok((y, ho, wo))
    }
}

/// Projection shortcut at its kept width plus the scatter back to the
/// block's full output width.
#[derive(Debug, Clone)]
pub struct PrunedShortcut {
    pub conv: ConvBn,
    /// Full-width channel index of each kept shortcut output channel.
    pub scatter: Vec<usize>,
}

/// One residual block with its channel bookkeeping.
#[derive(Debug, Clone)]
pub struct PrunedBlock {
    pub stride: usize,
    /// Full channel width entering / leaving the block.
    pub in_width: usize,
    pub out_width: usize,
    /// Input channels gathered before the first convolution.
    pub in_keep: Vec<usize>,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub conv3: ConvBn,
    /// Full-width channel index of each kept main-branch output channel.
    pub out_scatter: Vec<usize>,
    /// `None` means an identity shortcut: the raw block input is added
    /// back at full width.
    pub shortcut: Option<PrunedShortcut>,
}

/// A dense network exported from a thresholded gated network. Runs
/// without any gate machinery and carries its own cost model.
#[derive(Debug, Clone)]
pub struct PrunedNetwork {
    pub input_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub stem: ConvBn,
    pub blocks: Vec<PrunedBlock>,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    pub flops: FlopsModel,
}

/// Verdict of [`verify_pruned_equivalence`].
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub inputs_checked: usize,
    pub max_abs_diff: f32,
    pub tolerance: f32,
    pub pass: bool,
}

// ---------------------------------------------------------------------------
// Export

fn keep_is_sorted(keep: &[usize]) -> bool {
    keep.windows(2).all(|w| w[0] < w[1])
}

/// Channel indices kept at one site: `p > tau` per gate, where a layer
/// gate covers the whole site. `None` in the map means the site is not
/// gated and keeps its full width.
fn kept_channels(
    net: &GatedNetwork,
    probs: &[f32],
    block: usize,
    pos: MaskSitePos,
    tau: f32,
) -> Option<Vec<usize>> {
    let site = net.registry.sites.iter().find(|s| s.block == block && s.pos == pos)?;
    let kept = match net.granularity() {
        Granularity::Channel => site
            .gates
            .clone()
            .filter(|&gi| probs[gi] > tau)
            .map(|gi| net.registry.gates[gi].channel.expect("channel gates carry an index"))
            .collect(),
        Granularity::Layer => {
            let gi = site.gates.start;
            if probs[gi] > tau {
                (0..site.channels).collect()
            } else {
                Vec::new()
            }
        }
    };
    Some(kept)
}

/// Slices a conv kernel `[co, ci, kh, kw]` down to the kept output and
/// input channels, preserving order.
fn slice_conv(w: &Tensor, out_keep: &[usize], in_keep: &[usize]) -> Result<Tensor> {
    let s = w.shape();
    let (ci, kh, kw) = (s[1], s[2], s[3]);
    let plane = kh * kw;
    let d = w.data();
    let mut out = Vec::with_capacity(out_keep.len() * in_keep.len() * plane);
    for &o in out_keep {
        for &i in in_keep {
            let base = (o * ci + i) * plane;
            out.extend_from_slice(&d[base..base + plane]);
        }
    }
    Tensor::new(vec![out_keep.len(), in_keep.len(), kh, kw], out)
}

fn take_1d(t: &Tensor, keep: &[usize]) -> Result<Tensor> {
    let d = t.data();
    Tensor::new(vec![keep.len()], keep.iter().map(|&i| d[i]).collect())
}

fn conv_bn_from_store(
    store: &ParamStore,
    conv_name: &str,
    bn_prefix: &str,
    out_keep: &[usize],
    in_keep: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvBn> {
    Ok(ConvBn {
        weight: slice_conv(store.value(conv_name)?, out_keep, in_keep)?,
        stride,
        padding,
        gamma: take_1d(store.value(&format!("{bn_prefix}.gamma"))?, out_keep)?,
        beta: take_1d(store.value(&format!("{bn_prefix}.beta"))?, out_keep)?,
        running_mean: take_1d(store.value(&format!("{bn_prefix}.running_mean"))?, out_keep)?,
        running_var: take_1d(store.value(&format!("{bn_prefix}.running_var"))?, out_keep)?,
    })
}

/// Materializes the dense network selected by thresholding every gate
/// probability at `tau` (strictly greater keeps the channel).
///
/// Only data-independent gates have a static open probability, so only
/// those networks can be exported. A site that would lose all of its
/// channels makes the export fail with [`Error::DegenerateLayer`]
/// rather than emit a network with an empty convolution.
pub fn export_pruned_network(net: &GatedNetwork, store: &ParamStore, tau: f32) -> Result<PrunedNetwork> {
    if net.kind() != GateKind::Independent {
        return Err(Error::invalid(
            "export_pruned_network",
            "only data-independent gates can be folded into a static network",
        ));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid("export_pruned_network", format!("tau must be in [0, 1], got {tau}")));
    }
    let probs = net.gate_probabilities(store)?;
    let spec = net.spec();

    // Resolve the kept channel set per site first so a degenerate site
    // fails the export before any slicing happens.
    let mut kept_by_site: Vec<HashMap<MaskSitePos, Vec<usize>>> = Vec::with_capacity(spec.blocks.len());
    for (b, _) in spec.blocks.iter().enumerate() {
        let mut kept = HashMap::new();
        for pos in [
            MaskSitePos::Input,
            MaskSitePos::Conv1,
            MaskSitePos::Conv2,
            MaskSitePos::Output,
            MaskSitePos::Shortcut,
        ] {
            if let Some(channels) = kept_channels(net, &probs, b, pos, tau) {
                if channels.is_empty() {
                    return Err(Error::DegenerateLayer { layer: format!("b{b}.{}", pos.name()), tau });
                }
                kept.insert(pos, channels);
            }
        }
        kept_by_site.push(kept);
    }

    let full = |width: usize| -> Vec<usize> { (0..width).collect() };
    let stem = ConvBn {
        weight: store.value("stem.conv.weight")?.clone(),
        stride: spec.stem.stride,
        padding: spec.stem.padding,
        gamma: store.value("stem.bn.gamma")?.clone(),
        beta: store.value("stem.bn.beta")?.clone(),
        running_mean: store.value("stem.bn.running_mean")?.clone(),
        running_var: store.value("stem.bn.running_var")?.clone(),
    };

    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for (b, block) in spec.blocks.iter().enumerate() {
        let kept = &kept_by_site[b];
        let site = |pos: MaskSitePos, width: usize| kept.get(&pos).cloned().unwrap_or_else(|| full(width));
        let in_keep = site(MaskSitePos::Input, block.in_channels);
        let c1_keep = site(MaskSitePos::Conv1, block.mid_channels);
        let c2_keep = site(MaskSitePos::Conv2, block.mid_channels);
        let out_keep = site(MaskSitePos::Output, block.out_channels);

        let conv1 = conv_bn_from_store(
            store,
            &format!("block{b}.conv1.weight"),
            &format!("block{b}.bn1"),
            &c1_keep,
            &in_keep,
            1,
            0,
        )?;
        let conv2 = conv_bn_from_store(
            store,
            &format!("block{b}.conv2.weight"),
            &format!("block{b}.bn2"),
            &c2_keep,
            &c1_keep,
            block.stride,
            1,
        )?;
        let conv3 = conv_bn_from_store(
            store,
            &format!("block{b}.conv3.weight"),
            &format!("block{b}.bn3"),
            &out_keep,
            &c2_keep,
            1,
            0,
        )?;
        // The projection shortcut reads the raw block input, so its
        // input side always stays at full width.
        let shortcut = if block.has_projection() {
            let sc_keep = site(MaskSitePos::Shortcut, block.out_channels);
            let conv = conv_bn_from_store(
                store,
                &format!("block{b}.shortcut.conv.weight"),
                &format!("block{b}.shortcut.bn"),
                &sc_keep,
                &full(block.in_channels),
                block.stride,
                0,
            )?;
            Some(PrunedShortcut { conv, scatter: sc_keep })
        } else {
            None
        };

        blocks.push(PrunedBlock {
            stride: block.stride,
            in_width: block.in_channels,
            out_width: block.out_channels,
            in_keep,
            conv1,
            conv2,
            conv3,
            out_scatter: out_keep,
            shortcut,
        });
    }

    let pruned = PrunedNetwork {
        input_channels: spec.input_channels,
        input_size: spec.input_size,
        num_classes: spec.num_classes,
        flops: pruned_flops(spec.input_size, &stem, &blocks, net.flops.ungated_floor)?,
        stem,
        blocks,
        fc_weight: store.value("fc.weight")?.clone(),
        fc_bias: store.value("fc.bias")?.clone(),
    };
    pruned.validate()?;
    Ok(pruned)
}

/// Cost model of the dense network: the same floor as the original
/// (stem, residual adds, pooling, classifier all still run at full
/// width) plus each convolution at its kept dimensions.
fn pruned_flops(input_size: usize, stem: &ConvBn, blocks: &[PrunedBlock], floor: u64) -> Result<FlopsModel> {
    let ks = stem.weight.shape();
    let (mut h, _) = ops::conv_out_dims(input_size, input_size, ks[2], ks[3], stem.stride, stem.padding)?;
    let mut model = FlopsModel { sites: Vec::new(), convs: Vec::new(), ungated_floor: floor };
    let mut push = |layer_id: String, conv: &ConvBn, h: usize| -> Result<usize> {
        let ws = conv.weight.shape();
        let (ho, _) = ops::conv_out_dims(h, h, ws[2], ws[3], conv.stride, conv.padding)?;
        model.convs.push(ConvEntry {
            layer_id,
            cin: ws[1],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            hout: ho,
            wout: ho,
            input_site: None,
            output_site: None,
            elemwise_ops: 3,
        });
        Ok(ho)
    };
    for (b, block) in blocks.iter().enumerate() {
        let h_in = h;
        push(format!("block{b}.conv1"), &block.conv1, h_in)?;
        h = push(format!("block{b}.conv2"), &block.conv2, h_in)?;
        push(format!("block{b}.conv3"), &block.conv3, h)?;
        if let Some(sc) = &block.shortcut {
            push(format!("block{b}.shortcut.conv"), &sc.conv, h_in)?;
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Forward

/// Copies the channels listed in `keep` out of a `[n, c, s]` buffer.
fn gather_channels(x: &[f32], n: usize, c: usize, s: usize, keep: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * keep.len() * s);
    for i in 0..n {
        let sample = &x[i * c * s..(i + 1) * c * s];
        for &ch in keep {
            out.extend_from_slice(&sample[ch * s..(ch + 1) * s]);
        }
    }
    out
}

/// Adds row `j` of a `[n, kept, s]` buffer onto channel `scatter[j]` of
/// a full-width `[n, full, s]` buffer.
fn scatter_add_channels(out: &mut [f32], x: &[f32], n: usize, full: usize, s: usize, scatter: &[usize]) {
    let kept = scatter.len();
    for i in 0..n {
        let sample = &x[i * kept * s..(i + 1) * kept * s];
        let base = i * full * s;
        for (j, &ch) in scatter.iter().enumerate() {
            let dst = &mut out[base + ch * s..base + (ch + 1) * s];
            for (d, v) in dst.iter_mut().zip(&sample[j * s..(j + 1) * s]) {
                *d += v;
            }
        }
    }
}

impl PrunedNetwork {
    /// Structural consistency: channel chains line up, gather/scatter
    /// indices are strictly increasing and in range, identity shortcuts
    /// preserve shape. Run on load so a corrupt file cannot produce an
    /// out-of-bounds forward.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("pruned network", msg));
        self.stem.check("stem")?;
        if self.stem.in_channels() != self.input_channels {
            return bad(format!(
                "stem reads {} channels but the input has {}",
                self.stem.in_channels(),
                self.input_channels
            ));
        }
        if self.blocks.is_empty() {
            return bad("no blocks".into());
        }
        let mut width = self.stem.out_channels();
        for (b, block) in self.blocks.iter().enumerate() {
            block.conv1.check("conv1")?;
            block.conv2.check("conv2")?;
            block.conv3.check("conv3")?;
            if block.in_width != width {
                return bad(format!("block {b} expects {} input channels, gets {width}", block.in_width));
            }
            if !keep_is_sorted(&block.in_keep) || block.in_keep.last().is_some_and(|&c| c >= block.in_width) {
                return bad(format!("block {b}: in_keep must be strictly increasing and < {}", block.in_width));
            }
            if block.conv1.in_channels() != block.in_keep.len() {
                return bad(format!(
                    "block {b}: conv1 reads {} channels but in_keep has {}",
                    block.conv1.in_channels(),
                    block.in_keep.len()
                ));
            }
            if block.conv2.in_channels() != block.conv1.out_channels()
                || block.conv3.in_channels() != block.conv2.out_channels()
            {
                return bad(format!("block {b}: convolution channel chain does not line up"));
            }
            if !keep_is_sorted(&block.out_scatter) || block.out_scatter.last().is_some_and(|&c| c >= block.out_width) {
                return bad(format!("block {b}: out_scatter must be strictly increasing and < {}", block.out_width));
            }
            if block.conv3.out_channels() != block.out_scatter.len() {
                return bad(format!(
                    "block {b}: conv3 writes {} channels but out_scatter has {}",
                    block.conv3.out_channels(),
                    block.out_scatter.len()
                ));
            }
            if block.conv2.stride != block.stride {
                return bad(format!("block {b}: conv2 stride {} != block stride {}", block.conv2.stride, block.stride));
            }
            match &block.shortcut {
                Some(sc) => {
                    sc.conv.check("shortcut")?;
                    if sc.conv.in_channels() != block.in_width || sc.conv.stride != block.stride {
                        return bad(format!("block {b}: shortcut convolution does not match the block input"));
                    }
                    if !keep_is_sorted(&sc.scatter)
                        || sc.scatter.last().is_some_and(|&c| c >= block.out_width)
                        || sc.conv.out_channels() != sc.scatter.len()
                    {
                        return bad(format!("block {b}: shortcut scatter is inconsistent"));
                    }
                }
                None => {
                    if block.stride != 1 || block.in_width != block.out_width {
                        return bad(format!("block {b}: identity shortcut needs stride 1 and equal widths"));
                    }
                }
            }
            width = block.out_width;
        }
        let fs = self.fc_weight.shape();
        if fs.len() != 2 || fs[0] != width || fs[1] != self.num_classes || self.fc_bias.shape() != [self.num_classes] {
            return bad(format!(
                "classifier shape {fs:?} / {:?} does not match {width} channels and {} classes",
                self.fc_bias.shape(),
                self.num_classes
            ));
        }
        Ok(())
    }

    /// Runs the dense network. Input `[N, C, S, S]`, logits `[N, K]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.input_channels || xs[2] != self.input_size || xs[3] != self.input_size {
            return Err(Error::shape(
                "pruned forward",
                "input",
                format!("[N, {}, {}, {}]", self.input_channels, self.input_size, self.input_size),
                format!("{xs:?}"),
            ));
        }
        let n = xs[0];
        let (mut h, mut size, _) = {
            let (y, ho, wo) = self.stem.forward(x.data(), n, self.input_size, self.input_size)?;
            (y, ho, wo)
        };

        for block in &self.blocks {
            let s_in = size * size;
            let xg = gather_channels(&h, n, block.in_width, s_in, &block.in_keep);
            let (m1, h1, _) = block.conv1.forward(&xg, n, size, size)?;
            let (m2, h2, _) = block.conv2.forward(&m1, n, h1, h1)?;
            let (m3, h3, _) = block.conv3.forward(&m2, n, h2, h2)?;
            let s_out = h3 * h3;

            // Main branch first, shortcut added on top: the same
            // operand order as the graph's residual add.
            let mut out = vec![0.0f32; n * block.out_width * s_out];
            scatter_add_channels(&mut out, &m3, n, block.out_width, s_out, &block.out_scatter);
            match &block.shortcut {
                Some(sc) => {
                    let (y, _, _) = sc.conv.forward(&h, n, size, size)?;
                    scatter_add_channels(&mut out, &y, n, block.out_width, s_out, &sc.scatter);
                }
                None => {
                    for (o, v) in out.iter_mut().zip(&h) {
                        *o += v;
                    }
                }
            }
            h = out;
            size = h3;
        }

        // Global average pooling with the same accumulation order as
        // the graph op.
        let c = self.blocks.last().expect("validated non-empty").out_width;
        let s = size * size;
        let mut pooled = vec![0.0f32; n * c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                let mut acc = 0.0f32;
                for &v in &h[base..base + s] {
                    acc += v;
                }
                pooled[i * c + ch] = acc / s as f32;
            }
        }
        let logits = ops::linear_forward(&pooled, self.fc_weight.data(), self.fc_bias.data(), n, c, self.num_classes);
        Tensor::new(vec![n, self.num_classes], logits)
    }
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvMeta {
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockMeta {
    stride: usize,
    in_width: usize,
    out_width: usize,
    in_keep: Vec<usize>,
    out_scatter: Vec<usize>,
    /// `None` for identity shortcuts.
    shortcut_scatter: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
enum PrunedMeta {
    Pruned {
        input_channels: usize,
        input_size: usize,
        num_classes: usize,
        stem: ConvMeta,
        blocks: Vec<BlockMeta>,
        ungated_floor: u64,
    },
}

fn push_conv_bn<'a>(tensors: &mut Vec<(String, &'a Tensor)>, prefix: &str, bn_prefix: &str, cb: &'a ConvBn) {
    tensors.push((format!("{prefix}.weight"), &cb.weight));
    tensors.push((format!("{bn_prefix}.gamma"), &cb.gamma));
    tensors.push((format!("{bn_prefix}.beta"), &cb.beta));
    tensors.push((format!("{bn_prefix}.running_mean"), &cb.running_mean));
    tensors.push((format!("{bn_prefix}.running_var"), &cb.running_var));
}

/// Writes a pruned network to one self-contained checkpoint file.
pub fn save_pruned(path: &Path, net: &PrunedNetwork) -> Result<()> {
    let meta = serde_json::to_value(PrunedMeta::Pruned {
        input_channels: net.input_channels,
        input_size: net.input_size,
        num_classes: net.num_classes,
        stem: ConvMeta { stride: net.stem.stride, padding: net.stem.padding },
        blocks: net
            .blocks
            .iter()
            .map(|b| BlockMeta {
                stride: b.stride,
                in_width: b.in_width,
                out_width: b.out_width,
                in_keep: b.in_keep.clone(),
                out_scatter: b.out_scatter.clone(),
                shortcut_scatter: b.shortcut.as_ref().map(|sc| sc.scatter.clone()),
            })
            .collect(),
        ungated_floor: net.flops.ungated_floor,
    })?;
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    push_conv_bn(&mut tensors, "stem.conv", "stem.bn", &net.stem);
    for (b, block) in net.blocks.iter().enumerate() {
        push_conv_bn(&mut tensors, &format!("block{b}.conv1"), &format!("block{b}.bn1"), &block.conv1);
        push_conv_bn(&mut tensors, &format!("block{b}.conv2"), &format!("block{b}.bn2"), &block.conv2);
        push_conv_bn(&mut tensors, &format!("block{b}.conv3"), &format!("block{b}.bn3"), &block.conv3);
        if let Some(sc) = &block.shortcut {
            push_conv_bn(&mut tensors, &format!("block{b}.shortcut.conv"), &format!("block{b}.shortcut.bn"), &sc.conv);
        }
    }
    tensors.push(("fc.weight".into(), &net.fc_weight));
    tensors.push(("fc.bias".into(), &net.fc_bias));
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    checkpoint::save_raw(path, &meta, &refs)
}

struct TensorBag {
    path: String,
    map: HashMap<String, Tensor>,
}

impl TensorBag {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.map
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor '{name}'", self.path)))
    }

    fn take_conv_bn(&mut self, prefix: &str, bn_prefix: &str, stride: usize, padding: usize) -> Result<ConvBn> {
        Ok(ConvBn {
            weight: self.take(&format!("{prefix}.weight"))?,
            stride,
            padding,
            gamma: self.take(&format!("{bn_prefix}.gamma"))?,
            beta: self.take(&format!("{bn_prefix}.beta"))?,
            running_mean: self.take(&format!("{bn_prefix}.running_mean"))?,
            running_var: self.take(&format!("{bn_prefix}.running_var"))?,
        })
    }
}

/// Reads a pruned network back; structural validation runs before the
/// model is returned, so a tampered file fails here rather than during
/// a forward pass.
pub fn load_pruned(path: &Path) -> Result<PrunedNetwork> {
    let (meta, tensors) = checkpoint::load_raw(path)?;
    let PrunedMeta::Pruned { input_channels, input_size, num_classes, stem, blocks, ungated_floor } =
        serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("{}: not a pruned-model checkpoint: {e}", path.display())))?;
    let mut bag = TensorBag { path: path.display().to_string(), map: tensors.into_iter().collect() };

    let stem = bag.take_conv_bn("stem.conv", "stem.bn", stem.stride, stem.padding)?;
    let mut built = Vec::with_capacity(blocks.len());
    for (b, bm) in blocks.into_iter().enumerate() {
        let conv1 = bag.take_conv_bn(&format!("block{b}.conv1"), &format!("block{b}.bn1"), 1, 0)?;
        let conv2 = bag.take_conv_bn(&format!("block{b}.conv2"), &format!("block{b}.bn2"), bm.stride, 1)?;
        let conv3 = bag.take_conv_bn(&format!("block{b}.conv3"), &format!("block{b}.bn3"), 1, 0)?;
        let shortcut = match bm.shortcut_scatter {
            Some(scatter) => Some(PrunedShortcut {
                conv: bag.take_conv_bn(&format!("block{b}.shortcut.conv"), &format!("block{b}.shortcut.bn"), bm.stride, 0)?,
                scatter,
            }),
            None => None,
        };
        built.push(PrunedBlock {
            stride: bm.stride,
            in_width: bm.in_width,
            out_width: bm.out_width,
            in_keep: bm.in_keep,
            conv1,
            conv2,
            conv3,
            out_scatter: bm.out_scatter,
            shortcut,
        });
    }
    let fc_weight = bag.take("fc.weight")?;
    let fc_bias = bag.take("fc.bias")?;
    if let Some(name) = bag.map.keys().next() {
        return Err(Error::Checkpoint(format!("{}: unexpected tensor '{name}'", bag.path)));
    }

    let net = PrunedNetwork {
        input_channels,
        input_size,
        num_classes,
        flops: pruned_flops(input_size, &stem, &built, ungated_floor)?,
        stem,
        blocks: built,
        fc_weight,
        fc_bias,
    };
    net.validate()?;
    Ok(net)
}

// ---------------------------------------------------------------------------
// Verification

/// Compares the pruned network against the original running with
/// thresholded gates at the same `tau`, on `n_inputs` seeded random
/// inputs. Construction makes the two bit-identical, so a sound export
/// reports `max_abs_diff == 0`.
pub fn verify_pruned_equivalence(
    net: &GatedNetwork,
    store: &mut ParamStore,
    pruned: &PrunedNetwork,
    tau: f32,
    n_inputs: usize,
    tolerance: f32,
    seed: u64,
) -> Result<EquivalenceReport> {
    if n_inputs == 0 {
        return Err(Error::invalid("verify_pruned_equivalence", "need at least one input"));
    }
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(Error::invalid("verify_pruned_equivalence", format!("bad tolerance {tolerance}")));
    }
    let spec = net.spec();
    if pruned.input_channels != spec.input_channels
        || pruned.input_size != spec.input_size
        || pruned.num_classes != spec.num_classes
    {
        return Err(Error::invalid(
            "verify_pruned_equivalence",
            "pruned network was exported from a different architecture",
        ));
    }

    let (c, s) = (spec.input_channels, spec.input_size);
    let mut max_abs = 0.0f32;
    for i in 0..n_inputs {
        let mut r = rng::stream(seed, rng::StreamKey::with("prune-verify", i as u64, 0, 0));
        let data: Vec<f32> = (0..c * s * s).map(|_| rng::standard_normal(&mut r) as f32).collect();
        let x = Tensor::new(vec![1, c, s, s], data)?;

        let mut g = Graph::new();
        let fwd = net.forward(store, &mut g, &x, &ForwardCfg { bn_train: false, gates: GateSource::Threshold { tau } })?;
        let y = pruned.forward(&x)?;
        if fwd.logits.shape() != y.shape() {
            return Err(Error::shape(
                "verify_pruned_equivalence",
                "logits",
                format!("{:?}", fwd.logits.shape()),
                format!("{:?}", y.shape()),
            ));
        }
        for (a, b) in fwd.logits.data().iter().zip(y.data()) {
            let d = (a - b).abs();
            if !d.is_finite() {
                max_abs = f32::INFINITY;
            } else if d > max_abs {
                max_abs = d;
            }
        }
    }
    Ok(EquivalenceReport { inputs_checked: n_inputs, max_abs_diff: max_abs, tolerance, pass: max_abs <= tolerance })
}
