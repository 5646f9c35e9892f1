//! Gated residual network: spec, builder, and forward passes.
//!
//! The architecture is a small ResNet-style stack: a stem conv, then
//! bottleneck blocks (1x1 -> 3x3 -> 1x1, each conv followed by BN+ReLU),
//! then global average pooling and a linear classifier. Channel masks
//! sit after each Conv-BN-ReLU group and on the projection shortcut:
//!
//! ```text
//! x -> [input mask] -> conv1 -> [conv1 mask] -> conv2 -> [conv2 mask]
//!   -> conv3 -> [output mask] --+-> add
//! x -> shortcut conv ----------> [shortcut mask]
//! ```
//!
//! Identity shortcuts (stride 1, equal widths) are never masked. Gates
//! may be data-independent (two logits per gate) or data-dependent (a
//! per-block head computes per-sample logits from the block input).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{conv_flops, ConvEntry, FlopsModel, SiteSpec};
use crate::gating::{self, gate_probability};
use crate::graph::{Graph, MaskLayout, StConfig};
use crate::losses::ActivationRecord;
use crate::optim::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;
/// Width of the shared data-dependent gate-head trunk.
pub const GATE_HEAD_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Independent,
    Dependent,
    /// No gates anywhere: the plain baseline network.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Channel,
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum MaskSitePos {
    Input,
    Conv1,
    Conv2,
    Output,
    Shortcut,
}

impl MaskSitePos {
    pub fn name(self) -> &'static str {
        match self {
            MaskSitePos::Input => "input",
            MaskSitePos::Conv1 => "conv1",
            MaskSitePos::Conv2 => "conv2",
            MaskSitePos::Output => "output",
            MaskSitePos::Shortcut => "shortcut",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub out_channels: usize,
    #[serde(default = "default_stem_kernel")]
    pub kernel: usize,
    #[serde(default = "default_one")]
    pub stride: usize,
    #[serde(default = "default_stem_padding")]
    pub padding: usize,
}

fn default_stem_kernel() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_stem_padding() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatedBlockSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Mask sites for this block; defaults to the full set (shortcut
    /// included exactly when the block has a projection shortcut).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_sites: Option<Vec<MaskSitePos>>,
}

impl GatedBlockSpec {
    pub fn new(in_channels: usize, mid_channels: usize, out_channels: usize, stride: usize) -> Self {
        GatedBlockSpec { in_channels, mid_channels, out_channels, stride, mask_sites: None }
    }

    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }

    pub fn sites(&self) -> Vec<MaskSitePos> {
        match &self.mask_sites {
            Some(list) => list.clone(),
            None => {
                let mut v = vec![MaskSitePos::Input, MaskSitePos::Conv1, MaskSitePos::Conv2, MaskSitePos::Output];
                if self.has_projection() {
                    v.push(MaskSitePos::Shortcut);
                }
                v
            }
        }
    }

    pub fn site_channels(&self, pos: MaskSitePos) -> usize {
        match pos {
            MaskSitePos::Input => self.in_channels,
            MaskSitePos::Conv1 => self.mid_channels,
            MaskSitePos::Conv2 => self.mid_channels,
            MaskSitePos::Output | MaskSitePos::Shortcut => self.out_channels,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub num_classes: usize,
    pub input_channels: usize,
    /// Square input resolution.
    pub input_size: usize,
    pub stem: StemSpec,
    pub blocks: Vec<GatedBlockSpec>,
}

impl NetworkSpec {
    /// The desk-scale reference net: stem 3->16, three bottleneck
    /// blocks (16/16/16 s1, 16/16/32 s2, 32/32/32 s1), pool, classify.
    pub fn desk_reference(num_classes: usize) -> Self {
        NetworkSpec {
            num_classes,
            input_channels: 3,
            input_size: 16,
            stem: StemSpec { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            blocks: vec![
                GatedBlockSpec::new(16, 16, 16, 1),
                GatedBlockSpec::new(16, 16, 32, 2),
                GatedBlockSpec::new(32, 32, 32, 1),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("network needs at least one block".into()));
        }
        let mut width = self.stem.out_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != width {
                return Err(Error::Config(format!(
                    "block {i} expects {} input channels but the previous layer produces {width}",
                    b.in_channels
                )));
            }
            if b.stride != 1 && b.stride != 2 {
                return Err(Error::Config(format!("block {i}: stride must be 1 or 2, got {}", b.stride)));
            }
            if b.mid_channels == 0 || b.out_channels == 0 {
                return Err(Error::Config(format!("block {i}: channel counts must be positive")));
            }
            if let Some(sites) = &b.mask_sites {
                let has_shortcut_site = sites.contains(&MaskSitePos::Shortcut);
                if has_shortcut_site && !b.has_projection() {
                    return Err(Error::Config(format!(
                        "block {i}: shortcut mask site requires a projection shortcut"
                    )));
                }
                if !has_shortcut_site && b.has_projection() {
                    return Err(Error::Config(format!(
                        "block {i}: projection shortcut must carry a shortcut mask site"
                    )));
                }
                let mut seen = std::collections::HashSet::new();
                for s in sites {
                    if !seen.insert(*s) {
                        return Err(Error::Config(format!("block {i}: duplicate mask site {}", s.name())));
                    }
                }
            }
            width = b.out_channels;
        }
        Ok(())
    }
}

/// One gate: its stable id (e.g. "b0.conv1.c3"), the site it belongs
/// to, and which channel it controls (None = the whole site).
#[derive(Debug, Clone)]
pub struct GateInfo {
    pub id: String,
    pub site: usize,
    pub channel: Option<usize>,
}

/// One maskable channel group.
#[derive(Debug, Clone)]
pub struct SiteInfo {
    pub id: String,
    pub block: usize,
    pub pos: MaskSitePos,
    pub channels: usize,
    /// Contiguous range into the gate list.
    pub gates: std::ops::Range<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct GateRegistry {
    pub gates: Vec<GateInfo>,
    pub sites: Vec<SiteInfo>,
}

impl GateRegistry {
    pub fn num_gates(&self) -> usize {
        self.gates.len()
    }

    pub fn gates_per_site(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.gates.len()).collect()
    }

    /// Per-sample open-channel counts per site, from hard gate samples
    /// (one column of length N per gate, in registry order).
    pub fn active_counts(&self, columns: &[&[f32]], n: usize) -> Result<Vec<Vec<usize>>> {
        if columns.len() != self.gates.len() {
            return Err(Error::shape(
                "active_counts",
                "gate columns",
                self.gates.len().to_string(),
                columns.len().to_string(),
            ));
        }
        let mut counts = vec![vec![0usize; self.sites.len()]; n];
        for (site_idx, site) in self.sites.iter().enumerate() {
            let per_gate_channels = if site.gates.len() == site.channels { 1 } else { site.channels };
            for gi in site.gates.clone() {
                let col = columns[gi];
                for (j, &z) in col.iter().enumerate() {
                    if z > 0.5 {
                        counts[j][site_idx] += per_gate_channels;
                    }
                }
            }
        }
        Ok(counts)
    }
}

/// Where gate values come from during a forward pass.
pub enum GateSource<'a> {
    /// Sample fresh straight-through gates (training / stochastic eval).
    Sampled { seed: u64, step: u64 },
    /// Deterministic gating: a gate is open iff its probability is
    /// strictly greater than `tau` (per sample for dependent gates).
    Threshold { tau: f32 },
    /// Fixed per-site masks, indexed like the registry's sites. `None`
    /// entries leave that site unmasked.
    PerSite(&'a [Option<Tensor>]),
    /// Every gate open; masking is skipped entirely.
    AllOn,
}

pub struct ForwardCfg<'a> {
    /// Batchnorm mode: batch statistics + running updates vs. running
    /// statistics only.
    pub bn_train: bool,
    pub gates: GateSource<'a>,
}

/// Output of one forward pass.
pub struct Forward {
    pub logits: Tensor,
    /// Sampled gate columns in registry order (empty unless sampling).
    pub record: ActivationRecord,
    /// Batch-mean open probability per gate (empty unless sampling).
    pub gate_p_mean: Vec<f64>,
}

/// Everything needed to (re)construct a model deterministically; this
/// is what checkpoints persist alongside the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildArgs {
    pub spec: NetworkSpec,
    pub kind: GateKind,
    pub granularity: Granularity,
    pub gate_init_p: f32,
    pub temperature: f32,
    pub seed: u64,
    pub base_wd: f32,
    pub wd_gate_multiplier: f32,
}

impl BuildArgs {
    pub fn new(spec: NetworkSpec, kind: GateKind, granularity: Granularity) -> Self {
        BuildArgs {
            spec,
            kind,
            granularity,
            gate_init_p: 0.8,
            temperature: 1.0,
            seed: 0,
            base_wd: 1e-4,
            wd_gate_multiplier: 20.0,
        }
    }
}

pub struct GatedNetwork {
    pub args: BuildArgs,
    pub registry: GateRegistry,
    pub flops: FlopsModel,
    pub st: StConfig,
}

impl GatedNetwork {
    pub fn spec(&self) -> &NetworkSpec {
        &self.args.spec
    }

    pub fn kind(&self) -> GateKind {
        self.args.kind
    }

    pub fn granularity(&self) -> Granularity {
        self.args.granularity
    }

    /// Constructs the model: registers every parameter (seeded, keyed
    /// by parameter name so different gate configurations share their
    /// non-gate initialization), instantiates gates at every mask site,
    /// and builds the FLOPs model.
    pub fn build(args: BuildArgs) -> Result<(GatedNetwork, ParamStore)> {
        let BuildArgs { ref spec, kind, granularity, gate_init_p, temperature, .. } = args;
        spec.validate()?;
        if !(gate_init_p > 0.0 && gate_init_p < 1.0) {
            return Err(Error::Config(format!("gate_init_p must be in (0, 1), got {gate_init_p}")));
        }
        if temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }

        let mut registry = GateRegistry::default();
        if kind != GateKind::None {
            for (b, block) in spec.blocks.iter().enumerate() {
                for pos in block.sites() {
                    let channels = block.site_channels(pos);
                    let site_idx = registry.sites.len();
                    let start = registry.gates.len();
                    match granularity {
                        Granularity::Channel => {
                            for c in 0..channels {
                                registry.gates.push(GateInfo {
                                    id: format!("b{b}.{}.c{c}", pos.name()),
                                    site: site_idx,
                                    channel: Some(c),
                                });
                            }
                        }
                        Granularity::Layer => {
                            registry.gates.push(GateInfo {
                                id: format!("b{b}.{}", pos.name()),
                                site: site_idx,
                                channel: None,
                            });
                        }
                    }
                    registry.sites.push(SiteInfo {
                        id: format!("b{b}.{}", pos.name()),
                        block: b,
                        pos,
                        channels,
                        gates: start..registry.gates.len(),
                    });
                }
            }
        }

        let flops = build_flops_model(spec, &registry, kind)?;
        let st = StConfig { hard: true, backward: Default::default(), temperature };
        let net = GatedNetwork { args, registry, flops, st };

        let mut store = ParamStore::new();
        net.register_params(&mut store)?;
        Ok((net, store))
    }

    fn register_params(&self, store: &mut ParamStore) -> Result<()> {
        let seed = self.args.seed;
        let gate_init_p = self.args.gate_init_p;
        let base_wd = self.args.base_wd;
        let wd_gate_multiplier = self.args.wd_gate_multiplier;
        let spec = &self.args.spec;
        let conv = |name: &str, co: usize, ci: usize, k: usize| -> Tensor {
            he_normal(seed, name, &[co, ci, k, k])
        };
        let register_bn = |store: &mut ParamStore, prefix: &str, c: usize, wd: f32| -> Result<()> {
            store.register(&format!("{prefix}.gamma"), Tensor::ones(&[c]), wd)?;
            store.register(&format!("{prefix}.beta"), Tensor::zeros(&[c]), wd)?;
            store.register_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]))?;
            store.register_buffer(&format!("{prefix}.running_var"), Tensor::ones(&[c]))?;
            Ok(())
        };

        store.register(
            "stem.conv.weight",
            he_normal(seed, "stem.conv.weight", &[spec.stem.out_channels, spec.input_channels, spec.stem.kernel, spec.stem.kernel]),
            base_wd,
        )?;
        register_bn(store, "stem.bn", spec.stem.out_channels, base_wd)?;

        for (b, block) in spec.blocks.iter().enumerate() {
            store.register(&format!("block{b}.conv1.weight"), conv(&format!("block{b}.conv1.weight"), block.mid_channels, block.in_channels, 1), base_wd)?;
            register_bn(store, &format!("block{b}.bn1"), block.mid_channels, base_wd)?;
            store.register(&format!("block{b}.conv2.weight"), conv(&format!("block{b}.conv2.weight"), block.mid_channels, block.mid_channels, 3), base_wd)?;
            register_bn(store, &format!("block{b}.bn2"), block.mid_channels, base_wd)?;
            store.register(&format!("block{b}.conv3.weight"), conv(&format!("block{b}.conv3.weight"), block.out_channels, block.mid_channels, 1), base_wd)?;
            register_bn(store, &format!("block{b}.bn3"), block.out_channels, base_wd)?;
            if block.has_projection() {
                store.register(&format!("block{b}.shortcut.conv.weight"), conv(&format!("block{b}.shortcut.conv.weight"), block.out_channels, block.in_channels, 1), base_wd)?;
                register_bn(store, &format!("block{b}.shortcut.bn"), block.out_channels, base_wd)?;
            }
        }

        let c_final = spec.blocks.last().unwrap().out_channels;
        store.register(
            "fc.weight",
            he_normal(seed, "fc.weight", &[c_final, spec.num_classes]),
            base_wd,
        )?;
        store.register("fc.bias", Tensor::zeros(&[spec.num_classes]), base_wd)?;

        if self.kind() == GateKind::None {
            return Ok(());
        }
        let gate_wd = crate::losses::gate_weight_decay_coefficient(
            base_wd,
            self.registry.num_gates(),
            wd_gate_multiplier,
        )?;
        let (w0, w1) = gating::initial_logits(gate_init_p);
        match self.kind() {
            GateKind::Independent => {
                for gate in &self.registry.gates {
                    store.register(&format!("gate.{}.w0", gate.id), Tensor::scalar(w0), gate_wd)?;
                    store.register(&format!("gate.{}.w1", gate.id), Tensor::scalar(w1), gate_wd)?;
                }
            }
            GateKind::Dependent => {
                for (b, block) in self.args.spec.blocks.iter().enumerate() {
                    let name = format!("block{b}.gate_trunk.fc.weight");
                    store.register(&name, he_normal(seed, &name, &[block.in_channels, GATE_HEAD_HIDDEN]), gate_wd)?;
                    store.register(&format!("block{b}.gate_trunk.fc.bias"), Tensor::zeros(&[GATE_HEAD_HIDDEN]), gate_wd)?;
                    store.register(&format!("block{b}.gate_trunk.bn.gamma"), Tensor::ones(&[GATE_HEAD_HIDDEN]), gate_wd)?;
                    store.register(&format!("block{b}.gate_trunk.bn.beta"), Tensor::zeros(&[GATE_HEAD_HIDDEN]), gate_wd)?;
                    store.register_buffer(&format!("block{b}.gate_trunk.bn.running_mean"), Tensor::zeros(&[GATE_HEAD_HIDDEN]))?;
                    store.register_buffer(&format!("block{b}.gate_trunk.bn.running_var"), Tensor::ones(&[GATE_HEAD_HIDDEN]))?;
                }
                for gate in &self.registry.gates {
                    // Zero weights + biased second logit: every head
                    // starts at exactly p = gate_init_p.
                    store.register(&format!("gate.{}.head.weight", gate.id), Tensor::zeros(&[GATE_HEAD_HIDDEN, 2]), gate_wd)?;
                    store.register(
                        &format!("gate.{}.head.bias", gate.id),
                        Tensor::new(vec![2], vec![w0, w1])?,
                        gate_wd,
                    )?;
                }
            }
            GateKind::None => unreachable!(),
        }
        Ok(())
    }

    /// Open probability of every gate, computed from the logits.
    /// Only meaningful for data-independent gates.
    pub fn gate_probabilities(&self, store: &ParamStore) -> Result<Vec<f32>> {
        if self.kind() != GateKind::Independent {
            return Err(Error::invalid(
                "gate_probabilities",
                "static gate probabilities exist only for data-independent gates",
            ));
        }
        self.registry
            .gates
            .iter()
            .map(|gate| {
                let w0 = store.value(&format!("gate.{}.w0", gate.id))?.item();
                let w1 = store.value(&format!("gate.{}.w1", gate.id))?.item();
                Ok(gate_probability(w0, w1))
            })
            .collect()
    }

    /// Per-site threshold masks for data-independent gates: channel c
    /// is kept iff p > tau (ties close the gate).
    pub fn threshold_masks(&self, store: &ParamStore, tau: f32) -> Result<Vec<Option<Tensor>>> {
        let probs = self.gate_probabilities(store)?;
        let mut masks = Vec::with_capacity(self.registry.sites.len());
        for site in &self.registry.sites {
            let vals: Vec<f32> = site
                .gates
                .clone()
                .map(|gi| (probs[gi] > tau) as u8 as f32)
                .collect();
            let t = match self.granularity() {
                Granularity::Channel => Tensor::new(vec![site.channels], vals)?,
                Granularity::Layer => Tensor::new(vec![1], vals)?,
            };
            masks.push(Some(t));
        }
        Ok(masks)
    }

    /// Number of open channels per site under fixed per-site masks.
    pub fn mask_active_counts(&self, masks: &[Option<Tensor>]) -> Result<Vec<usize>> {
        if masks.len() != self.registry.sites.len() {
            return Err(Error::shape(
                "mask_active_counts",
                "per-site masks",
                self.registry.sites.len().to_string(),
                masks.len().to_string(),
            ));
        }
        let mut counts = Vec::with_capacity(masks.len());
        for (site, m) in self.registry.sites.iter().zip(masks) {
            let c = match m {
                None => site.channels,
                Some(t) if t.len() == 1 => {
                    if t.data()[0] > 0.5 {
                        site.channels
                    } else {
                        0
                    }
                }
                Some(t) => t.data().iter().filter(|&&v| v > 0.5).count(),
            };
            counts.push(c);
        }
        Ok(counts)
    }

    /// Exact per-sample FLOPs realized by sampled gate columns.
    pub fn realized_flops_per_sample(&self, record: &ActivationRecord) -> Result<Vec<u64>> {
        let n = record.batch_size();
        let columns: Vec<&[f32]> = record.z.iter().map(|t| t.data()).collect();
        let counts = self.registry.active_counts(&columns, n)?;
        counts.iter().map(|c| self.flops.realized_flops(c)).collect()
    }

    /// Builds the forward graph and returns logits (plus gate columns
    /// when sampling). `store` is mutated only by batchnorm running
    /// statistics in training mode.
    pub fn forward(
        &self,
        store: &mut ParamStore,
        g: &mut Graph,
        x: &Tensor,
        cfg: &ForwardCfg<'_>,
    ) -> Result<Forward> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.args.spec.input_channels || xs[2] != self.args.spec.input_size || xs[3] != self.args.spec.input_size {
            return Err(Error::shape(
                "forward",
                "input",
                format!(
                    "[N, {}, {}, {}]",
                    self.args.spec.input_channels, self.args.spec.input_size, self.args.spec.input_size
                ),
                format!("{:?}", xs),
            ));
        }
        let n = xs[0];
        if let GateSource::PerSite(masks) = &cfg.gates {
            if masks.len() != self.registry.sites.len() {
                return Err(Error::shape(
                    "forward",
                    "per-site masks",
                    self.registry.sites.len().to_string(),
                    masks.len().to_string(),
                ));
            }
        }

        let mut record = ActivationRecord::default();
        let mut gate_p_mean = Vec::new();

        let x0 = g.constant(x);
        let w = store.lease("stem.conv.weight", g)?;
        let y = g.conv2d(&x0, &w, self.args.spec.stem.stride, self.args.spec.stem.padding)?;
        let y = self.bn(store, g, "stem.bn", &y, cfg.bn_train)?;
        let mut h = g.relu(&y)?;

        let mut site_cursor = 0usize;
        for (b, block) in self.args.spec.blocks.iter().enumerate() {
            h = self.block_forward(
                store,
                g,
                b,
                block,
                &h,
                n,
                cfg,
                &mut site_cursor,
                &mut record,
                &mut gate_p_mean,
            )?;
        }

        let pooled = g.global_avg_pool(&h)?;
        let fw = store.lease("fc.weight", g)?;
        let fb = store.lease("fc.bias", g)?;
        let logits = g.linear(&pooled, &fw, &fb)?;
        Ok(Forward { logits, record, gate_p_mean })
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        store: &mut ParamStore,
        g: &mut Graph,
        b: usize,
        block: &GatedBlockSpec,
        x: &Tensor,
        n: usize,
        cfg: &ForwardCfg<'_>,
        site_cursor: &mut usize,
        record: &mut ActivationRecord,
        gate_p_mean: &mut Vec<f64>,
    ) -> Result<Tensor> {
        // Shared gate-head trunk (data-dependent gates only): pooled
        // block input -> linear -> BN -> ReLU.
        let trunk = if self.kind() == GateKind::Dependent
            && matches!(cfg.gates, GateSource::Sampled { .. } | GateSource::Threshold { .. })
        {
            let pooled = g.global_avg_pool(x)?;
            let tw = store.lease(&format!("block{b}.gate_trunk.fc.weight"), g)?;
            let tb = store.lease(&format!("block{b}.gate_trunk.fc.bias"), g)?;
            let hdn = g.linear(&pooled, &tw, &tb)?;
            let hdn = self.bn(store, g, &format!("block{b}.gate_trunk.bn"), &hdn, cfg.bn_train)?;
            Some(g.relu(&hdn)?)
        } else {
            None
        };

        // An ungated network has no registered sites; every apply()
        // below finds no mask and passes tensors through untouched.
        let sites = if self.kind() == GateKind::None { Vec::new() } else { block.sites() };
        let mut site_masks: HashMap<MaskSitePos, Option<(Tensor, MaskLayout)>> = HashMap::new();
        for pos in &sites {
            let mask = self.build_site_mask(store, g, *site_cursor, trunk.as_ref(), n, cfg, record, gate_p_mean)?;
            site_masks.insert(*pos, mask);
            *site_cursor += 1;
        }
        let apply = |g: &mut Graph, t: &Tensor, pos: MaskSitePos| -> Result<Tensor> {
            match site_masks.get(&pos) {
                Some(Some((m, layout))) => g.channel_mask(t, m, *layout),
                _ => Ok(t.clone()),
            }
        };

        let xm = apply(g, x, MaskSitePos::Input)?;
        let w1 = store.lease(&format!("block{b}.conv1.weight"), g)?;
        let c1 = g.conv2d(&xm, &w1, 1, 0)?;
        let c1 = self.bn(store, g, &format!("block{b}.bn1"), &c1, cfg.bn_train)?;
        let c1 = g.relu(&c1)?;
        let m1 = apply(g, &c1, MaskSitePos::Conv1)?;

        let w2 = store.lease(&format!("block{b}.conv2.weight"), g)?;
        let c2 = g.conv2d(&m1, &w2, block.stride, 1)?;
        let c2 = self.bn(store, g, &format!("block{b}.bn2"), &c2, cfg.bn_train)?;
        let c2 = g.relu(&c2)?;
        let m2 = apply(g, &c2, MaskSitePos::Conv2)?;

        let w3 = store.lease(&format!("block{b}.conv3.weight"), g)?;
        let c3 = g.conv2d(&m2, &w3, 1, 0)?;
        let c3 = self.bn(store, g, &format!("block{b}.bn3"), &c3, cfg.bn_train)?;
        let c3 = g.relu(&c3)?;
        let main = apply(g, &c3, MaskSitePos::Output)?;

        let shortcut = if block.has_projection() {
            let ws = store.lease(&format!("block{b}.shortcut.conv.weight"), g)?;
            let sc = g.conv2d(x, &ws, block.stride, 0)?;
            let sc = self.bn(store, g, &format!("block{b}.shortcut.bn"), &sc, cfg.bn_train)?;
            let sc = g.relu(&sc)?;
            apply(g, &sc, MaskSitePos::Shortcut)?
        } else {
            x.clone()
        };
        g.add(&main, &shortcut)
    }

    /// Builds the mask for one site per the gate source. Sampled gates
    /// append their columns to `record` in registry order.
    #[allow(clippy::too_many_arguments)]
    fn build_site_mask(
        &self,
        store: &mut ParamStore,
        g: &mut Graph,
        site_idx: usize,
        trunk: Option<&Tensor>,
        n: usize,
        cfg: &ForwardCfg<'_>,
        record: &mut ActivationRecord,
        gate_p_mean: &mut Vec<f64>,
    ) -> Result<Option<(Tensor, MaskLayout)>> {
        let site = &self.registry.sites[site_idx];
        match &cfg.gates {
            GateSource::AllOn => Ok(None),
            GateSource::Threshold { tau } => {
                let tau = *tau;
                if !(0.0..=1.0).contains(&tau) {
                    return Err(Error::invalid("forward", format!("tau must be in [0, 1], got {tau}")));
                }
                let mut columns = Vec::with_capacity(site.gates.len());
                for gi in site.gates.clone() {
                    let gate = &self.registry.gates[gi];
                    let col = match self.kind() {
                        GateKind::Independent => {
                            let w0 = store.value(&format!("gate.{}.w0", gate.id))?.item();
                            let w1 = store.value(&format!("gate.{}.w1", gate.id))?.item();
                            let p = gate_probability(w0, w1);
                            gate_p_mean.push(p as f64);
                            let z = (p > tau) as u8 as f32;
                            g.constant(&Tensor::full(&[n], z))
                        }
                        GateKind::Dependent => {
                            let trunk = trunk.ok_or_else(|| {
                                Error::invalid("forward", "dependent gates need the block trunk")
                            })?;
                            let hw = store.lease(&format!("gate.{}.head.weight", gate.id), g)?;
                            let hb = store.lease(&format!("gate.{}.head.bias", gate.id), g)?;
                            let logits = g.linear(trunk, &hw, &hb)?;
                            let ld = logits.data();
                            let mut z = Vec::with_capacity(n);
                            let mut mean_p = 0.0f64;
                            for j in 0..n {
                                let p = gate_probability(ld[2 * j], ld[2 * j + 1]);
                                mean_p += p as f64;
                                z.push((p > tau) as u8 as f32);
                            }
                            gate_p_mean.push(mean_p / n as f64);
                            g.constant(&Tensor::new(vec![n], z)?)
                        }
                        GateKind::None => unreachable!("no sites exist without gates"),
                    };
                    record.z.push(col.clone());
                    columns.push(col);
                }
                match self.granularity() {
                    Granularity::Channel => {
                        let refs: Vec<&Tensor> = columns.iter().collect();
                        let m = g.stack_columns(&refs)?;
                        Ok(Some((m, MaskLayout::PerSampleChannel)))
                    }
                    Granularity::Layer => Ok(Some((columns.pop().unwrap(), MaskLayout::PerSample))),
                }
            }
            GateSource::PerSite(masks) => match &masks[site_idx] {
                None => Ok(None),
                Some(m) => {
                    let layout = match (self.granularity(), m.shape().len()) {
                        (Granularity::Channel, 1) => MaskLayout::PerChannel,
                        (Granularity::Channel, 2) => MaskLayout::PerSampleChannel,
                        (Granularity::Layer, 1) if m.len() == 1 => MaskLayout::Scalar,
                        (Granularity::Layer, 1) => MaskLayout::PerSample,
                        _ => {
                            return Err(Error::shape(
                                "forward",
                                "site mask",
                                "[C], [N,C], [1] or [N]",
                                format!("{:?}", m.shape()),
                            ))
                        }
                    };
                    let node = g.constant(m);
                    Ok(Some((node, layout)))
                }
            },
            GateSource::Sampled { seed, step } => {
                let mut columns = Vec::with_capacity(site.gates.len());
                for gi in site.gates.clone() {
                    let gate = &self.registry.gates[gi];
                    let mut noise_rng = rng::gate_noise(*seed, rng::fnv1a(gate.id.as_bytes()), *step);
                    let noise = gating::sample_noise(&mut noise_rng, n);
                    let col = match self.kind() {
                        GateKind::Independent => {
                            let w0 = store.lease(&format!("gate.{}.w0", gate.id), g)?;
                            let w1 = store.lease(&format!("gate.{}.w1", gate.id), g)?;
                            gate_p_mean.push(gate_probability(w0.item(), w1.item()) as f64);
                            g.gate_st_independent(&w0, &w1, &noise, self.st)?
                        }
                        GateKind::Dependent => {
                            let trunk = trunk.ok_or_else(|| {
                                Error::invalid("forward", "dependent gates need the block trunk")
                            })?;
                            let hw = store.lease(&format!("gate.{}.head.weight", gate.id), g)?;
                            let hb = store.lease(&format!("gate.{}.head.bias", gate.id), g)?;
                            let logits = g.linear(trunk, &hw, &hb)?;
                            let ld = logits.data();
                            let mean_p: f64 = (0..n)
                                .map(|j| gate_probability(ld[2 * j], ld[2 * j + 1]) as f64)
                                .sum::<f64>()
                                / n as f64;
                            gate_p_mean.push(mean_p);
                            g.gate_st_dependent(&logits, &noise, self.st)?
                        }
                        GateKind::None => unreachable!("no sites exist without gates"),
                    };
                    record.z.push(col.clone());
                    columns.push(col);
                }
                match self.granularity() {
                    Granularity::Channel => {
                        let refs: Vec<&Tensor> = columns.iter().collect();
                        let m = g.stack_columns(&refs)?;
                        Ok(Some((m, MaskLayout::PerSampleChannel)))
                    }
                    Granularity::Layer => Ok(Some((columns.pop().unwrap(), MaskLayout::PerSample))),
                }
            }
        }
    }

    fn bn(
        &self,
        store: &mut ParamStore,
        g: &mut Graph,
        prefix: &str,
        x: &Tensor,
        train: bool,
    ) -> Result<Tensor> {
        let gamma = store.lease(&format!("{prefix}.gamma"), g)?;
        let beta = store.lease(&format!("{prefix}.beta"), g)?;
        let mut rm = store.value(&format!("{prefix}.running_mean"))?.clone();
        let mut rv = store.value(&format!("{prefix}.running_var"))?.clone();
        let y = g.batchnorm(x, &gamma, &beta, &mut rm, &mut rv, train, BN_MOMENTUM, BN_EPS)?;
        if train {
            store.set_value(&format!("{prefix}.running_mean"), rm)?;
            store.set_value(&format!("{prefix}.running_var"), rv)?;
        }
        Ok(y)
    }
}


fn build_flops_model(spec: &NetworkSpec, registry: &GateRegistry, kind: GateKind) -> Result<FlopsModel> {
    let mut model = FlopsModel {
        sites: registry
            .sites
            .iter()
            .map(|s| SiteSpec { id: s.id.clone(), channels: s.channels })
            .collect(),
        convs: Vec::new(),
        ungated_floor: 0,
    };
    let site_index: HashMap<&str, usize> = registry
        .sites
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let find = |b: usize, pos: MaskSitePos| site_index.get(format!("b{b}.{}", pos.name()).as_str()).copied();

    let stem_out = (spec.input_size + 2 * spec.stem.padding - spec.stem.kernel) / spec.stem.stride + 1;
    // Stem conv + BN + ReLU always run at full width.
    model.ungated_floor += conv_flops(
        spec.input_channels,
        spec.stem.out_channels,
        spec.stem.kernel,
        spec.stem.kernel,
        stem_out,
        stem_out,
    ) + 3 * (spec.stem.out_channels * stem_out * stem_out) as u64;

    let mut h = stem_out;
    for (b, block) in spec.blocks.iter().enumerate() {
        let h_in = h;
        let h_out = (h + 2 - 3) / block.stride + 1;
        h = h_out;
        model.convs.push(ConvEntry {
            layer_id: format!("block{b}.conv1"),
            cin: block.in_channels,
            cout: block.mid_channels,
            kh: 1,
            kw: 1,
            hout: h_in,
            wout: h_in,
            input_site: find(b, MaskSitePos::Input),
            output_site: find(b, MaskSitePos::Conv1),
            elemwise_ops: 3,
        });
        model.convs.push(ConvEntry {
            layer_id: format!("block{b}.conv2"),
            cin: block.mid_channels,
            cout: block.mid_channels,
            kh: 3,
            kw: 3,
            hout: h_out,
            wout: h_out,
            input_site: find(b, MaskSitePos::Conv1),
            output_site: find(b, MaskSitePos::Conv2),
            elemwise_ops: 3,
        });
        model.convs.push(ConvEntry {
            layer_id: format!("block{b}.conv3"),
            cin: block.mid_channels,
            cout: block.out_channels,
            kh: 1,
            kw: 1,
            hout: h_out,
            wout: h_out,
            input_site: find(b, MaskSitePos::Conv2),
            output_site: find(b, MaskSitePos::Output),
            elemwise_ops: 3,
        });
        if block.has_projection() {
            model.convs.push(ConvEntry {
                layer_id: format!("block{b}.shortcut.conv"),
                cin: block.in_channels,
                cout: block.out_channels,
                kh: 1,
                kw: 1,
                hout: h_out,
                wout: h_out,
                input_site: None, // reads the raw block input
                output_site: find(b, MaskSitePos::Shortcut),
                elemwise_ops: 3,
            });
        }
        // The residual add always touches the full-width output tensor.
        model.ungated_floor += (block.out_channels * h_out * h_out) as u64;
    }

    let c_final = spec.blocks.last().unwrap().out_channels;
    // Global average pool (one add per element) and classifier.
    model.ungated_floor += (c_final * h * h) as u64;
    model.ungated_floor += 2 * (c_final * spec.num_classes) as u64 + spec.num_classes as u64;

    // Data-dependent gate heads run at full width on every sample.
    if kind == GateKind::Dependent {
        let mut h_in = stem_out;
        for (b, block) in spec.blocks.iter().enumerate() {
            let c = block.in_channels;
            // Trunk: pool + linear + BN + ReLU.
            let mut head = (c * h_in * h_in) as u64;
            head += 2 * (c * GATE_HEAD_HIDDEN) as u64 + GATE_HEAD_HIDDEN as u64;
            head += 3 * GATE_HEAD_HIDDEN as u64;
            // Per-gate 2-logit heads.
            let gates_here = registry.sites.iter().filter(|s| s.block == b).map(|s| s.gates.len()).sum::<usize>();
            head += gates_here as u64 * (2 * (GATE_HEAD_HIDDEN * 2) as u64 + 2);
            model.ungated_floor += head;
            h_in = (h_in + 2 - 3) / block.stride + 1;
        }
    }
    Ok(model)
}

/// He-style normal init: std = sqrt(2 / fan_in) with fan_in the number
/// of inputs per output unit; seeded by parameter name.
fn he_normal(seed: u64, name: &str, shape: &[usize]) -> Tensor {
    let fan_in: usize = match shape.len() {
        4 => shape[1] * shape[2] * shape[3],
        2 => shape[0],
        _ => shape.iter().product::<usize>().max(1),
    };
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = rng::init_stream(seed, name);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| (rng::standard_normal(&mut rng) * std) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent")
}
