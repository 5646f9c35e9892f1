//! Training losses over sampled gate activations.
//!
//! All builders append to the caller's [`Graph`], so the returned
//! scalars are differentiable through the straight-through gate nodes
//! that produced the activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Which activation loss shapes the gate distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared gap between the batch-mean activation and the target;
    /// lets individual gates polarize as long as the mean stays on
    /// target.
    Batch,
    /// Like `Batch`, but each gate's mean activation is weighted by the
    /// FLOPs it controls, targeting a compute budget instead of a
    /// head-count.
    Flops,
    /// Per-gate squared gap to a per-gate target, averaged over gates;
    /// pins every gate near its own target rate.
    Aig,
}

/// Sampled gate activations for one batch: one graph-linked column of
/// length |B| per gate. Columns are Arc-backed, so cloning is cheap.
#[derive(Clone, Default)]
pub struct ActivationRecord {
    pub z: Vec<Tensor>,
}

impl ActivationRecord {
    pub fn new(z: Vec<Tensor>) -> Self {
        ActivationRecord { z }
    }

    pub fn num_gates(&self) -> usize {
        self.z.len()
    }

    pub fn batch_size(&self) -> usize {
        self.z.first().map_or(0, |t| t.len())
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.z.is_empty() || self.batch_size() == 0 {
            return Err(Error::invalid("activation_loss", "empty activation record"));
        }
        let n = self.batch_size();
        for (i, t) in self.z.iter().enumerate() {
            if t.shape() != [n] {
                return Err(Error::shape(
                    "activation_loss",
                    "gate column",
                    format!("[{n}]"),
                    format!("{:?} (gate {i})", t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Mean sampled activation over gates and batch (plain value).
    pub fn mean_activation(&self) -> f64 {
        let total: f64 = self
            .z
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|&v| v as f64)
            .sum();
        total / (self.num_gates() * self.batch_size()) as f64
    }
}

fn check_target(t: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || !t.is_finite() {
        return Err(Error::invalid("activation_loss", format!("target rate {t} outside [0, 1]")));
    }
    Ok(())
}

/// (t - mean_{gates,batch} Z)^2 — drives the average activation of the
/// whole gate population toward the target, leaving individual gates
/// free to specialize.
pub fn batch_activation_loss(g: &mut Graph, rec: &ActivationRecord, t: f32) -> Result<Tensor> {
    rec.check_nonempty()?;
    check_target(t)?;
    let denom = (rec.num_gates() * rec.batch_size()) as f32;
    let sums: Vec<Tensor> = rec
        .z
        .iter()
        .map(|z| g.sum_all(z))
        .collect::<Result<_>>()?;
    let parts: Vec<(&Tensor, f32)> = sums.iter().map(|s| (s, 1.0 / denom)).collect();
    let mean = g.affine_combination(&parts, 0.0)?;
    g.squared_diff_from_const(&mean, t)
}

/// (t - flops_ratio)^2 where the ratio is the batch-mean realized FLOPs
/// under a linear per-gate cost model, over the full-network maximum.
pub fn flops_activation_loss(
    g: &mut Graph,
    rec: &ActivationRecord,
    flop_weights: &[f64],
    ungated_floor: u64,
    max_flops: u64,
    t: f32,
) -> Result<Tensor> {
    rec.check_nonempty()?;
    check_target(t)?;
    if max_flops == 0 {
        return Err(Error::invalid("flops_loss", "max_flops is zero"));
    }
    if flop_weights.len() != rec.num_gates() {
        return Err(Error::shape(
            "flops_loss",
            "flop weights",
            rec.num_gates().to_string(),
            flop_weights.len().to_string(),
        ));
    }
    let n = rec.batch_size() as f64;
    let max = max_flops as f64;
    let sums: Vec<Tensor> = rec
        .z
        .iter()
        .map(|z| g.sum_all(z))
        .collect::<Result<_>>()?;
    let parts: Vec<(&Tensor, f32)> = sums
        .iter()
        .zip(flop_weights)
        .map(|(s, &w)| (s, (w / (n * max)) as f32))
        .collect();
    let ratio = g.affine_combination(&parts, (ungated_floor as f64 / max) as f32)?;
    g.squared_diff_from_const(&ratio, t)
}

/// (1/|G|) sum_i (t_i - mean_batch Z_i)^2 — pins every gate to its own
/// target rate. Comparison baseline: unlike the batch loss, a population
/// whose gates polarize while averaging to t is still penalized.
pub fn aig_per_gate_loss(
    g: &mut Graph,
    rec: &ActivationRecord,
    targets: &[f32],
) -> Result<Tensor> {
    rec.check_nonempty()?;
    if targets.len() != rec.num_gates() {
        return Err(Error::shape(
            "aig_loss",
            "per-gate targets",
            rec.num_gates().to_string(),
            targets.len().to_string(),
        ));
    }
    for &t in targets {
        check_target(t)?;
    }
    let inv_g = 1.0 / rec.num_gates() as f32;
    let mut parts_store: Vec<Tensor> = Vec::with_capacity(rec.num_gates());
    for (z, &t) in rec.z.iter().zip(targets) {
        let mean = g.mean_all(z)?;
        parts_store.push(g.squared_diff_from_const(&mean, t)?);
    }
    let parts: Vec<(&Tensor, f32)> = parts_store.iter().map(|d| (d, inv_g)).collect();
    g.affine_combination(&parts, 0.0)
}

/// Closed form of E[(t - Q)^2] = (t - E[Q])^2 + Var(Q) for independent
/// per-sample Bernoulli(p_i) draws, Q = mean over gates and batch.
pub fn expected_batch_loss_analytic(probs: &[f32], batch_size: usize, t: f32) -> f64 {
    assert!(!probs.is_empty() && batch_size > 0);
    let g = probs.len() as f64;
    let b = batch_size as f64;
    let p_bar: f64 = probs.iter().map(|&p| p as f64).sum::<f64>() / g;
    let var: f64 = probs
        .iter()
        .map(|&p| {
            let p = p as f64;
            p * (1.0 - p)
        })
        .sum::<f64>()
        / (b * g * g);
    (t as f64 - p_bar).powi(2) + var
}

/// Weight-decay coefficient for gate parameters: base * multiplier / |G|.
/// Dividing by the gate count keeps the total pull toward p = 0.5
/// roughly constant as networks grow.
pub fn gate_weight_decay_coefficient(base_wd: f32, num_gates: usize, multiplier: f32) -> Result<f32> {
    if num_gates == 0 {
        return Err(Error::invalid("gate_weight_decay", "num_gates must be >= 1"));
    }
    Ok((base_wd as f64 * multiplier as f64 / num_gates as f64) as f32)
}

/// class_loss + coeff * act_loss (coeff defaults to 1.0 in config).
pub fn total_training_loss(
    g: &mut Graph,
    class_loss: &Tensor,
    act_loss: &Tensor,
    act_coeff: f32,
) -> Result<Tensor> {
    g.affine_combination(&[(class_loss, 1.0), (act_loss, act_coeff)], 0.0)
}

/// Decay energy of a single gate's logits splits into a magnitude term
/// and a polarization term: w0^2 + w1^2 = ((w0+w1)^2 + ln^2((1-p)/p)) / 2.
/// The second term is minimized at p = 0.5, so plain weight decay on
/// gate logits actively fights polarization — which is why its
/// coefficient is divided by the gate count.
pub fn gate_decay_split(w0: f32, w1: f32) -> (f64, f64) {
    let p = crate::gating::gate_probability_f64(w0, w1);
    let sum = (w0 as f64) + (w1 as f64);
    let polar = ((1.0 - p) / p).ln();
    (sum * sum / 2.0, polar * polar / 2.0)
}
