//! Post-training inference: gate strategies, ensembling over gate
//! noise, and batchnorm recalibration under the deployed gating.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::network::{ForwardCfg, GateSource, GatedNetwork};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f32 = 0.5;
pub const DEFAULT_RECAL_BATCHES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    /// Majority label over passes; ties break to the lowest class index.
    Vote,
    /// Average the logits, then argmax.
    MeanLogits,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InferenceStrategy {
    /// Keep the gates stochastic at test time.
    Stochastic { seed: u64 },
    /// Deterministic: a gate executes iff p > tau (ties go off).
    Threshold { tau: f32 },
    /// Every gate open.
    AllOn,
    /// k independent stochastic passes, combined.
    Ensemble { k: usize, combine: Combine, seed: u64 },
}

pub struct InferenceResult {
    pub logits: Tensor,
    pub flops_per_sample: Vec<u64>,
    /// Gate values per gate (registry order) per sample.
    pub trace: Vec<Vec<f32>>,
}

/// Per-sample cost of a sampled/thresholded pass; an ungated network
/// always runs at its static maximum.
fn per_sample_flops(net: &GatedNetwork, record: &crate::losses::ActivationRecord, n: usize) -> Result<Vec<u64>> {
    if record.z.is_empty() {
        return Ok(vec![net.flops.max_flops(); n]);
    }
    net.realized_flops_per_sample(record)
}

fn check_strategy(s: &InferenceStrategy) -> Result<()> {
    match s {
        InferenceStrategy::Threshold { tau } => {
            if !(0.0..=1.0).contains(tau) || !tau.is_finite() {
                return Err(Error::invalid("run_inference", format!("tau must be in [0, 1], got {tau}")));
            }
        }
        InferenceStrategy::Ensemble { k, .. } => {
            if *k == 0 {
                return Err(Error::invalid("run_inference", "ensemble needs k >= 1"));
            }
        }
        _ => {}
    }
    Ok(())
}

/// One eval-mode forward under the given strategy. `batch_index` keeps
/// stochastic noise distinct across batches of the same run.
pub fn run_inference(
    net: &GatedNetwork,
    store: &mut ParamStore,
    x: &Tensor,
    strategy: &InferenceStrategy,
    batch_index: u64,
) -> Result<InferenceResult> {
    check_strategy(strategy)?;
    let n = x.shape()[0];
    let mut g = Graph::new();
    match strategy {
        InferenceStrategy::Stochastic { seed } => {
            let fwd = net.forward(
                store,
                &mut g,
                x,
                &ForwardCfg { bn_train: false, gates: GateSource::Sampled { seed: *seed, step: batch_index } },
            )?;
            let flops = per_sample_flops(net, &fwd.record, n)?;
            let trace = fwd.record.z.iter().map(|t| t.data().to_vec()).collect();
            Ok(InferenceResult { logits: fwd.logits, flops_per_sample: flops, trace })
        }
        InferenceStrategy::Threshold { tau } => {
            let fwd = net.forward(
                store,
                &mut g,
                x,
                &ForwardCfg { bn_train: false, gates: GateSource::Threshold { tau: *tau } },
            )?;
            let flops = per_sample_flops(net, &fwd.record, n)?;
            let trace = fwd.record.z.iter().map(|t| t.data().to_vec()).collect();
            Ok(InferenceResult { logits: fwd.logits, flops_per_sample: flops, trace })
        }
        InferenceStrategy::AllOn => {
            let fwd = net.forward(
                store,
                &mut g,
                x,
                &ForwardCfg { bn_train: false, gates: GateSource::AllOn },
            )?;
            let flops = vec![net.flops.max_flops(); n];
            let trace = vec![vec![1.0; n]; net.registry.num_gates()];
            Ok(InferenceResult { logits: fwd.logits, flops_per_sample: flops, trace })
        }
        InferenceStrategy::Ensemble { k, seed, .. } => {
            // Mean-logit tensor and summed FLOPs; vote-combined labels
            // come from `ensemble_predict`, which reruns these passes.
            let passes = ensemble_passes(net, store, x, *k, *seed, batch_index)?;
            let num_classes = passes[0].logits.shape()[1];
            let mut mean = vec![0.0f32; n * num_classes];
            for p in &passes {
                for (m, &v) in mean.iter_mut().zip(p.logits.data()) {
                    *m += v / *k as f32;
                }
            }
            let mut flops = vec![0u64; n];
            for p in &passes {
                for (f, &v) in flops.iter_mut().zip(&p.flops_per_sample) {
                    *f += v;
                }
            }
            Ok(InferenceResult {
                logits: Tensor::new(vec![n, num_classes], mean)?,
                flops_per_sample: flops,
                trace: passes.into_iter().next_back().expect("k >= 1").trace,
            })
        }
    }
}

fn ensemble_passes(
    net: &GatedNetwork,
    store: &mut ParamStore,
    x: &Tensor,
    k: usize,
    seed: u64,
    batch_index: u64,
) -> Result<Vec<InferenceResult>> {
    (0..k)
        .map(|i| {
            run_inference(
                net,
                store,
                x,
                &InferenceStrategy::Stochastic { seed },
                batch_index * k as u64 + i as u64,
            )
        })
        .collect()
}

fn combine_passes(passes: &[InferenceResult], combine: Combine) -> Vec<usize> {
    let n = passes[0].logits.shape()[0];
    let num_classes = passes[0].logits.shape()[1];
    match combine {
        Combine::Vote => {
            let mut labels = Vec::with_capacity(n);
            for j in 0..n {
                let mut votes = vec![0usize; num_classes];
                for p in passes {
                    let row = &p.logits.data()[j * num_classes..(j + 1) * num_classes];
                    votes[argmax(row)] += 1;
                }
                labels.push(argmax_usize(&votes));
            }
            labels
        }
        Combine::MeanLogits => {
            let mut labels = Vec::with_capacity(n);
            for j in 0..n {
                let mut mean = vec![0.0f64; num_classes];
                for p in passes {
                    let row = &p.logits.data()[j * num_classes..(j + 1) * num_classes];
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v as f64;
                    }
                }
                labels.push(argmax_f64(&mean));
            }
            labels
        }
    }
}

/// k stochastic passes combined into labels.
pub fn ensemble_predict(
    net: &GatedNetwork,
    store: &mut ParamStore,
    x: &Tensor,
    k: usize,
    combine: Combine,
    seed: u64,
    batch_index: u64,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("ensemble_predict", "k must be >= 1"));
    }
    let passes = ensemble_passes(net, store, x, k, seed, batch_index)?;
    Ok(combine_passes(&passes, combine))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_usize(row: &[usize]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_f64(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-sample argmax labels from a [N, K] logit tensor; ties go to the
/// lowest class index.
pub fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    (0..n).map(|j| argmax(&logits.data()[j * k..(j + 1) * k])).collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    debug_assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

/// Gate behavior during recalibration passes.
#[derive(Debug, Clone, Copy)]
pub enum RecalGates {
    Stochastic { seed: u64 },
    Threshold { tau: f32 },
    AllOn,
}

/// Refreshes batchnorm running statistics under the deployed gating:
/// train-mode forward passes (batch statistics + EMA updates) with a
/// zero-step optimizer, leaving every trainable parameter untouched.
pub fn bn_recalibrate(
    net: &GatedNetwork,
    store: &mut ParamStore,
    batches: &[Tensor],
    gates: RecalGates,
) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::invalid("bn_recalibrate", "empty data stream"));
    }
    for (i, batch) in batches.iter().enumerate() {
        let mut g = Graph::new();
        let source = match gates {
            RecalGates::Stochastic { seed } => GateSource::Sampled { seed, step: i as u64 },
            RecalGates::Threshold { tau } => GateSource::Threshold { tau },
            RecalGates::AllOn => GateSource::AllOn,
        };
        net.forward(store, &mut g, batch, &ForwardCfg { bn_train: true, gates: source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BuildArgs, GateKind, Granularity, NetworkSpec};

    fn small_net(kind: GateKind, seed: u64) -> (GatedNetwork, ParamStore) {
        let mut args = BuildArgs::new(NetworkSpec::desk_reference(4), kind, Granularity::Layer);
        args.seed = seed;
        GatedNetwork::build(args).unwrap()
    }

    fn random_input(n: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, crate::rng::StreamKey::new("test-input"));
        let len = n * 3 * 16 * 16;
        let data: Vec<f32> = (0..len).map(|_| crate::rng::standard_normal(&mut rng) as f32 * 0.3).collect();
        Tensor::new(vec![n, 3, 16, 16], data).unwrap()
    }

    #[test]
    fn all_on_reports_max_flops_everywhere() {
        let (net, mut store) = small_net(GateKind::Independent, 2);
        let x = random_input(3, 1);
        let r = run_inference(&net, &mut store, &x, &InferenceStrategy::AllOn, 0).unwrap();
        assert!(r.flops_per_sample.iter().all(|&f| f == net.flops.max_flops()));
        assert!(r.trace.iter().all(|row| row.iter().all(|&z| z == 1.0)));
    }

    #[test]
    fn threshold_is_deterministic_and_strict_at_tau() {
        let (net, mut store) = small_net(GateKind::Independent, 4);
        let x = random_input(2, 9);
        let a = run_inference(&net, &mut store, &x, &InferenceStrategy::Threshold { tau: 0.5 }, 0).unwrap();
        let b = run_inference(&net, &mut store, &x, &InferenceStrategy::Threshold { tau: 0.5 }, 5).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.flops_per_sample, b.flops_per_sample);
        // At exactly tau = p = 0.8 the gate must close (strict >).
        let at_p = run_inference(&net, &mut store, &x, &InferenceStrategy::Threshold { tau: 0.8 }, 0).unwrap();
        assert!(at_p.trace.iter().all(|row| row.iter().all(|&z| z == 0.0)));
        assert!(run_inference(&net, &mut store, &x, &InferenceStrategy::Threshold { tau: 1.5 }, 0).is_err());
    }

    #[test]
    fn ensemble_k1_equals_single_stochastic_pass() {
        let (net, mut store) = small_net(GateKind::Independent, 6);
        let x = random_input(4, 2);
        let single = run_inference(&net, &mut store, &x, &InferenceStrategy::Stochastic { seed: 31 }, 0).unwrap();
        let labels =
            ensemble_predict(&net, &mut store, &x, 1, Combine::MeanLogits, 31, 0).unwrap();
        assert_eq!(labels, argmax_labels(&single.logits));
        let voted = ensemble_predict(&net, &mut store, &x, 1, Combine::Vote, 31, 0).unwrap();
        assert_eq!(voted, labels);
    }

    #[test]
    fn ensemble_mean_logits_matches_hand_average() {
        let (net, mut store) = small_net(GateKind::Independent, 6);
        let x = random_input(3, 4);
        // The two passes an ensemble of k=2 at batch 0 performs.
        let p0 = run_inference(&net, &mut store, &x, &InferenceStrategy::Stochastic { seed: 77 }, 0).unwrap();
        let p1 = run_inference(&net, &mut store, &x, &InferenceStrategy::Stochastic { seed: 77 }, 1).unwrap();
        let labels = ensemble_predict(&net, &mut store, &x, 2, Combine::MeanLogits, 77, 0).unwrap();
        let k = p0.logits.shape()[1];
        let hand: Vec<usize> = (0..3)
            .map(|j| {
                let a = &p0.logits.data()[j * k..(j + 1) * k];
                let b = &p1.logits.data()[j * k..(j + 1) * k];
                let mean: Vec<f64> = a.iter().zip(b).map(|(x, y)| (*x as f64 + *y as f64) / 2.0).collect();
                argmax_f64(&mean)
            })
            .collect();
        assert_eq!(labels, hand);
    }

    #[test]
    fn recalibration_changes_no_parameter_bitwise() {
        let (net, mut store) = small_net(GateKind::Independent, 8);
        let batches: Vec<Tensor> = (0..4).map(|i| random_input(4, 100 + i)).collect();
        let before: Vec<(String, Vec<u32>)> = store
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let rm_before: Vec<u32> = store.value("stem.bn.running_mean").unwrap().data().iter().map(|v| v.to_bits()).collect();
        bn_recalibrate(&net, &mut store, &batches, RecalGates::Threshold { tau: 0.5 }).unwrap();
        for (name, bits) in &before {
            let now: Vec<u32> = store.value(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, bits, "parameter {name} changed");
        }
        let rm_after: Vec<u32> = store.value("stem.bn.running_mean").unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_ne!(rm_before, rm_after, "running stats should move");
        assert!(bn_recalibrate(&net, &mut store, &[], RecalGates::AllOn).is_err());
    }

    #[test]
    fn dependent_gates_threshold_uses_per_sample_probabilities() {
        let (net, mut store) = small_net(GateKind::Dependent, 10);
        let x = random_input(5, 6);
        let r = run_inference(&net, &mut store, &x, &InferenceStrategy::Threshold { tau: 0.5 }, 0).unwrap();
        assert_eq!(r.trace.len(), net.registry.num_gates());
        assert!(r.trace.iter().all(|row| row.len() == 5));
        assert!(r.logits.all_finite());
    }
}
