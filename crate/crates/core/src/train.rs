//! The training loop and the evaluation harness around it.
//!
//! One run: seeded shuffled minibatches, training-mode forward with
//! sampled gates, classification loss plus the configured activation
//! loss, backward, SGD with momentum, stepwise learning-rate decay.
//! Per epoch the model is evaluated with stochastic gates on the eval
//! split and per-gate telemetry is appended; at the end a deployment
//! pass (thresholded for data-independent gates, one stochastic pass
//! for data-dependent ones) produces the class heatmap, the summary,
//! and the per-sample prediction dump.
//!
//! Every random decision flows from named streams keyed off the config
//! seed, so a rerun with the same config is bitwise identical: the
//! metrics log, the telemetry files, and both checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::infer::{self, run_inference, InferenceStrategy, DEFAULT_TAU};
use crate::losses::{
    aig_per_gate_loss, batch_activation_loss, flops_activation_loss, total_training_loss, LossKind,
};
use crate::network::{BuildArgs, ForwardCfg, GateKind, GateSource, GatedNetwork};
use crate::optim::ParamStore;
use crate::telemetry::{emit_telemetry, GateTelemetry, Summary};
use crate::tensor::Tensor;

/// Base offset for evaluation batch indices. Gate noise is keyed by
/// (gate, step); training consumes steps from 0 upward, so evaluation
/// steps start far above any reachable training step and the two never
/// share a draw.
const EVAL_STEP_BASE: u64 = 1 << 40;

/// One row of the metrics log (means over the epoch's steps).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    pub total_loss: f64,
    pub class_loss: f64,
    pub act_loss: f64,
    pub eval_accuracy: f64,
    pub mean_activation: f64,
}

/// Evaluation-pass outcome.
#[derive(Debug, Clone)]
pub struct EvalMetrics {
    /// Top-1 accuracy.
    pub top1: f64,
    /// Mean realized FLOPs per sample under the strategy.
    pub mean_flops: f64,
    /// Per-gate activation rates over the whole set (registry order).
    pub gate_rates: Vec<f64>,
    /// Per-class per-gate activation rates, `[class][gate]`.
    pub per_class: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Everything a finished run hands back.
pub struct TrainOutcome {
    pub net: GatedNetwork,
    pub store: ParamStore,
    pub telemetry: GateTelemetry,
    pub summary: Summary,
    pub metrics: Vec<EpochMetrics>,
    /// Deployment-pass metrics of the final model (the pass that also
    /// produced the heatmap and predictions dump).
    pub final_eval: EvalMetrics,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Runs evaluation in deterministic batch order. `batch_offset` shifts
/// the per-batch index fed to stochastic gate noise so distinct passes
/// (e.g. different epochs) see distinct draws.
pub fn evaluate(
    net: &GatedNetwork,
    store: &mut ParamStore,
    dataset: &Dataset,
    strategy: &InferenceStrategy,
    batch_size: usize,
    batch_offset: u64,
) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("evaluate", "batch_size must be >= 1"));
    }
    let n_total = dataset.len();
    let num_gates = net.registry.num_gates();
    let num_classes = net.spec().num_classes;

    let mut correct = 0usize;
    let mut flops_sum = 0.0f64;
    let mut fired = vec![0.0f64; num_gates];
    let mut class_fired = vec![vec![0.0f64; num_gates]; num_classes];
    let mut class_count = vec![0usize; num_classes];
    let mut predictions = Vec::with_capacity(n_total);
    let mut labels_out = Vec::with_capacity(n_total);

    let indices: Vec<usize> = (0..n_total).collect();
    for (bi, chunk) in indices.chunks(batch_size).enumerate() {
        let (x, labels) = dataset.batch(chunk)?;
        let res = run_inference(net, store, &x, strategy, batch_offset + bi as u64)?;
        let preds = infer::argmax_labels(&res.logits);
        for ((&p, &l), &f) in preds.iter().zip(&labels).zip(&res.flops_per_sample) {
            if p == l {
                correct += 1;
            }
            if l >= num_classes {
                return Err(Error::invalid("evaluate", format!("label {l} out of range for {num_classes} classes")));
            }
            class_count[l] += 1;
            flops_sum += f as f64;
        }
        for (g, column) in res.trace.iter().enumerate() {
            for (j, &z) in column.iter().enumerate() {
                if z > 0.5 {
                    fired[g] += 1.0;
                    class_fired[labels[j]][g] += 1.0;
                }
            }
        }
        predictions.extend_from_slice(&preds);
        labels_out.extend_from_slice(&labels);
    }

    let gate_rates: Vec<f64> = fired.iter().map(|&f| f / n_total as f64).collect();
    let per_class: Vec<Vec<f64>> = class_fired
        .iter()
        .zip(&class_count)
        .map(|(row, &count)| {
            row.iter().map(|&f| if count == 0 { 0.0 } else { f / count as f64 }).collect()
        })
        .collect();

    Ok(EvalMetrics {
        top1: correct as f64 / n_total as f64,
        mean_flops: flops_sum / n_total as f64,
        gate_rates,
        per_class,
        predictions,
        labels: labels_out,
    })
}

/// Per-gate open probability: static for data-independent gates, the
/// evaluation-set average of the per-sample head outputs otherwise.
pub fn mean_gate_probabilities(
    net: &GatedNetwork,
    store: &mut ParamStore,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Vec<f64>> {
    match net.kind() {
        GateKind::None => Ok(Vec::new()),
        GateKind::Independent => Ok(net.gate_probabilities(store)?.iter().map(|&p| p as f64).collect()),
        GateKind::Dependent => {
            let num_gates = net.registry.num_gates();
            let mut acc = vec![0.0f64; num_gates];
            let indices: Vec<usize> = (0..dataset.len()).collect();
            for chunk in indices.chunks(batch_size) {
                let (x, _) = dataset.batch(chunk)?;
                let mut g = Graph::new();
                let fwd = net.forward(
                    store,
                    &mut g,
                    &x,
                    &ForwardCfg { bn_train: false, gates: GateSource::Threshold { tau: DEFAULT_TAU } },
                )?;
                for (a, &p) in acc.iter_mut().zip(&fwd.gate_p_mean) {
                    *a += p * chunk.len() as f64;
                }
            }
            Ok(acc.iter().map(|&a| a / dataset.len() as f64).collect())
        }
    }
}

/// The deployment evaluation strategy: deterministic thresholding when
/// gates are data-independent, a single seeded stochastic pass when
/// they decide per input (thresholding would erase the very
/// input-dependence being measured), everything on when ungated.
fn deployment_strategy(kind: GateKind, seed: u64) -> InferenceStrategy {
    match kind {
        GateKind::Independent => InferenceStrategy::Threshold { tau: DEFAULT_TAU },
        GateKind::Dependent => InferenceStrategy::Stochastic { seed },
        GateKind::None => InferenceStrategy::AllOn,
    }
}

struct LossPlan {
    kind: LossKind,
    flop_weights: Vec<f64>,
    ungated_floor: u64,
    max_flops: u64,
    aig_targets: Vec<f32>,
}

fn loss_plan(config: &TrainConfig, net: &GatedNetwork) -> Result<LossPlan> {
    let num_gates = net.registry.num_gates();
    let flop_weights = match config.loss_kind {
        LossKind::Flops => net.flops.gate_weights(&net.registry.gates_per_site())?,
        _ => Vec::new(),
    };
    let aig_targets = match (&config.loss_kind, &config.aig_targets) {
        (LossKind::Aig, Some(t)) => {
            if t.len() != num_gates {
                return Err(Error::Config(format!(
                    "aig_targets has {} entries but the network has {num_gates} gates",
                    t.len()
                )));
            }
            t.clone()
        }
        (LossKind::Aig, None) => vec![config.target_rate; num_gates],
        _ => Vec::new(),
    };
    Ok(LossPlan {
        kind: config.loss_kind,
        flop_weights,
        ungated_floor: net.flops.ungated_floor,
        max_flops: net.flops.max_flops(),
        aig_targets,
    })
}

fn format_float(v: f64) -> String {
    // Shortest round-trip formatting; keeps the CSV exactly re-parseable.
    format!("{v}")
}

/// Writes the metrics log as
/// `epoch,lr,total_loss,class_loss,act_loss,eval_accuracy,mean_activation`.
pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut csv = String::from("epoch,lr,total_loss,class_loss,act_loss,eval_accuracy,mean_activation\n");
    for r in rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            format_float(r.total_loss),
            format_float(r.class_loss),
            format_float(r.act_loss),
            format_float(r.eval_accuracy),
            format_float(r.mean_activation),
        )
        .expect("string write");
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))
}

/// Summary of the gate probabilities for abort diagnostics.
fn gate_p_summary(p: &[f64]) -> String {
    if p.is_empty() {
        return "no gates".into();
    }
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &v in p {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    format!("gate p min/mean/max = {lo:.4}/{:.4}/{hi:.4}", sum / p.len() as f64)
}

/// Trains per the config and writes all run artifacts into
/// `config.out_dir`: `metrics.csv`, `gates_per_epoch.csv`,
/// `class_heatmap.csv`, `summary.json`, `predictions.csv`,
/// `final.ckpt`, and `best.ckpt` (highest eval accuracy seen).
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_set, eval_set) = data::load(&config.dataset)?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::invalid("train", "dataset splits must both be nonempty"));
    }
    let spec = config.resolve_network(train_set.num_classes)?;
    let shape = train_set.image_shape();
    if shape != [spec.input_channels, spec.input_size, spec.input_size] {
        return Err(Error::shape(
            "train",
            "dataset images vs network input",
            format!("[{}, {}, {}]", spec.input_channels, spec.input_size, spec.input_size),
            format!("{shape:?}"),
        ));
    }

    let args = BuildArgs {
        spec,
        kind: config.gate_kind,
        granularity: config.gate_granularity,
        gate_init_p: config.gate_init_p,
        temperature: config.temperature,
        seed: config.seed,
        base_wd: config.weight_decay,
        wd_gate_multiplier: config.wd_gate_multiplier,
    };
    let (net, mut store) = GatedNetwork::build(args)?;
    let plan = loss_plan(config, &net)?;

    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let final_path = config.out_dir.join("final.ckpt");
    let best_path = config.out_dir.join("best.ckpt");

    let gate_ids: Vec<String> = net.registry.gates.iter().map(|g| g.id.clone()).collect();
    let mut telemetry = GateTelemetry::new(gate_ids)?;
    let mut metrics: Vec<EpochMetrics> = Vec::with_capacity(config.epochs);

    let n_eval_batches = eval_set.len().div_ceil(config.batch_size) as u64;
    let mut lr = config.lr;
    let mut best_acc = f64::NEG_INFINITY;
    let mut global_step = 0u64;

    for epoch in 0..config.epochs {
        if config.lr_step_epochs.contains(&epoch) {
            lr *= config.lr_decay_factor;
        }

        let order = data::shuffled_indices(train_set.len(), config.seed, epoch as u64);
        let (mut sum_total, mut sum_class, mut sum_act, mut steps) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for (step_in_epoch, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                // Batchnorm needs batch statistics; a trailing
                // single-sample batch is dropped.
                continue;
            }
            let (x, labels) = train_set.batch(chunk)?;
            let mut g = Graph::new();
            let fwd = net.forward(
                &mut store,
                &mut g,
                &x,
                &ForwardCfg { bn_train: true, gates: GateSource::Sampled { seed: config.seed, step: global_step } },
            )?;
            let class_loss = g.softmax_cross_entropy(&fwd.logits, &labels)?;
            let act_loss = match (net.kind(), plan.kind) {
                (GateKind::None, _) => g.constant(&Tensor::scalar(0.0)),
                (_, LossKind::Batch) => batch_activation_loss(&mut g, &fwd.record, config.target_rate)?,
                (_, LossKind::Flops) => flops_activation_loss(
                    &mut g,
                    &fwd.record,
                    &plan.flop_weights,
                    plan.ungated_floor,
                    plan.max_flops,
                    config.target_rate,
                )?,
                (_, LossKind::Aig) => aig_per_gate_loss(&mut g, &fwd.record, &plan.aig_targets)?,
            };
            let total = total_training_loss(&mut g, &class_loss, &act_loss, config.act_loss_coeff)?;

            let (tv, cv, av) = (total.item() as f64, class_loss.item() as f64, act_loss.item() as f64);
            if !tv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step_in_epoch,
                    diagnostics: format!(
                        "lr = {lr}; class_loss = {cv}; act_loss = {av}; {}",
                        gate_p_summary(&fwd.gate_p_mean)
                    ),
                });
            }
            g.backward(&total)?;
            store.absorb_grads(&g);
            store.sgd_step(lr, config.momentum)?;
            store.zero_grads();

            sum_total += tv;
            sum_class += cv;
            sum_act += av;
            steps += 1;
            global_step += 1;
        }
        if steps == 0 {
            return Err(Error::invalid("train", "no trainable batches (need at least 2 samples)"));
        }

        let eval_m = evaluate(
            &net,
            &mut store,
            &eval_set,
            &InferenceStrategy::Stochastic { seed: config.seed },
            config.batch_size,
            EVAL_STEP_BASE + epoch as u64 * n_eval_batches,
        )?;
        let p_mean = mean_gate_probabilities(&net, &mut store, &eval_set, config.batch_size)?;
        telemetry.push_epoch(epoch, eval_m.gate_rates.clone(), p_mean)?;

        let mean_act = if eval_m.gate_rates.is_empty() {
            1.0
        } else {
            eval_m.gate_rates.iter().sum::<f64>() / eval_m.gate_rates.len() as f64
        };
        metrics.push(EpochMetrics {
            epoch,
            lr,
            total_loss: sum_total / steps as f64,
            class_loss: sum_class / steps as f64,
            act_loss: sum_act / steps as f64,
            eval_accuracy: eval_m.top1,
            mean_activation: mean_act,
        });

        if eval_m.top1 > best_acc {
            best_acc = eval_m.top1;
            checkpoint::save_gated(&best_path, &net, &store)?;
        }
    }

    // Deployment pass: heatmap, summary, prediction dump.
    let strategy = deployment_strategy(net.kind(), config.seed);
    let final_eval = evaluate(&net, &mut store, &eval_set, &strategy, config.batch_size, EVAL_STEP_BASE)?;
    telemetry.set_heatmap(final_eval.per_class.clone())?;

    let summary = Summary {
        final_accuracy: final_eval.top1,
        flops_ratio: final_eval.mean_flops / net.flops.max_flops() as f64,
        // No gates means the network has trivially committed everywhere.
        fraction_polarized: telemetry.fraction_polarized().unwrap_or(1.0),
        target_rate: config.target_rate as f64,
        // Stochastic-behavior activation from the last epoch, not the
        // 0/1 rates of a thresholded deployment pass.
        mean_activation: metrics.last().map_or(1.0, |m| m.mean_activation),
    };

    checkpoint::save_gated(&final_path, &net, &store)?;
    emit_telemetry(&telemetry, &summary, &config.out_dir)?;
    write_metrics_csv(&config.out_dir.join("metrics.csv"), &metrics)?;
    crate::telemetry::write_predictions(
        &config.out_dir.join("predictions.csv"),
        &final_eval.labels,
        &final_eval.predictions,
    )?;

    Ok(TrainOutcome {
        net,
        store,
        telemetry,
        summary,
        metrics,
        final_eval,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    })
}
