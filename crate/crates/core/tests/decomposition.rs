//! Monte Carlo validation of the closed-form expectation of the batch
//! activation loss. For independent Bernoulli(p_i) gate draws and
//! Q = mean over |B| samples and |G| gates,
//!
//!   E[(t - Q)^2] = (t - p_bar)^2 + sum_i p_i(1 - p_i) / (|B| |G|^2)
//!
//! so the loss splits into a bias term the optimizer can kill by moving
//! the population mean, and a variance term that vanishes only when
//! every gate polarizes. Ten random (p-vector, t, |B|) configurations
//! are each averaged over 1e5 simulated batches and compared against the
//! closed form within 1% relative; a polarized population whose mean
//! hits the target must yield exactly zero both analytically and in
//! simulation.

use gates_core::graph::Graph;
use gates_core::losses::{batch_activation_loss, expected_batch_loss_analytic, ActivationRecord};
use gates_core::rng::{stream, StreamKey};
use gates_core::tensor::Tensor;
use rand::Rng;

const BATCHES: usize = 100_000;

struct Config {
    probs: Vec<f32>,
    t: f32,
    batch: usize,
}

fn random_configs(seed: u64, count: usize) -> Vec<Config> {
    let mut rng = stream(seed, StreamKey::new("decomp-test-config"));
    (0..count)
        .map(|_| {
            let gates = 2 + (rng.random::<u64>() % 7) as usize; // 2..=8
            let batch = 4 + (rng.random::<u64>() % 61) as usize; // 4..=64
            let probs: Vec<f32> = (0..gates)
                .map(|_| 0.05 + 0.9 * rng.random::<f32>())
                .collect();
            let t = 0.1 + 0.8 * rng.random::<f32>();
            Config { probs, t, batch }
        })
        .collect()
}

/// Mean of (t - Q)^2 over simulated batches, accumulated in f64.
fn simulate(cfg: &Config, seed: u64) -> f64 {
    let mut rng = stream(seed, StreamKey::new("decomp-test-draws"));
    let denom = (cfg.batch * cfg.probs.len()) as f64;
    let mut acc = 0.0f64;
    for _ in 0..BATCHES {
        let mut on = 0u32;
        for &p in &cfg.probs {
            for _ in 0..cfg.batch {
                on += (rng.random::<f32>() < p) as u32;
            }
        }
        let q = on as f64 / denom;
        let d = cfg.t as f64 - q;
        acc += d * d;
    }
    acc / BATCHES as f64
}

#[test]
fn monte_carlo_matches_closed_form() {
    let mut worst = 0.0f64;
    for (i, cfg) in random_configs(0xDEC0, 10).iter().enumerate() {
        let analytic = expected_batch_loss_analytic(&cfg.probs, cfg.batch, cfg.t);
        let mc = simulate(cfg, 0x5EED0 + i as u64);
        let rel = (mc - analytic).abs() / analytic;
        eprintln!(
            "config {i}: G={} B={} t={:.3} analytic {analytic:.6e} mc {mc:.6e} rel {rel:.3e}",
            cfg.probs.len(),
            cfg.batch,
            cfg.t
        );
        assert!(
            rel < 0.01,
            "config {i}: closed form {analytic:.6e} vs simulation {mc:.6e} (rel {rel:.3e})"
        );
        worst = worst.max(rel);
    }
    eprintln!("worst relative gap: {worst:.3e}");
}

#[test]
fn graph_loss_agrees_with_definition_per_batch() {
    // Ties the simulation's per-batch formula to the actual graph loss:
    // a few sampled batches must give the same value through both paths.
    let cfg = Config { probs: vec![0.3, 0.8, 0.55], t: 0.4, batch: 16 };
    let mut rng = stream(77, StreamKey::new("decomp-test-tie"));
    for _ in 0..25 {
        let cols: Vec<Vec<f32>> = cfg
            .probs
            .iter()
            .map(|&p| (0..cfg.batch).map(|_| (rng.random::<f32>() < p) as u8 as f32).collect())
            .collect();
        let on: f64 = cols.iter().flatten().map(|&v| v as f64).sum();
        let q = on / (cfg.batch * cfg.probs.len()) as f64;
        let by_hand = (cfg.t as f64 - q) * (cfg.t as f64 - q);

        let mut g = Graph::new();
        let z: Vec<Tensor> = cols
            .iter()
            .map(|c| g.leaf(&Tensor::new(vec![cfg.batch], c.clone()).unwrap()))
            .collect();
        let loss = batch_activation_loss(&mut g, &ActivationRecord::new(z), cfg.t).unwrap();
        assert!(
            (loss.item() as f64 - by_hand).abs() < 1e-6,
            "graph loss {} vs definition {by_hand}",
            loss.item()
        );
    }
}

#[test]
fn polarized_population_hitting_target_is_exactly_zero() {
    // Eight gates pinned to {0, 1} with two on: p_bar = 0.25 = t, exactly
    // representable so the bias term is a true zero. The closed form and
    // every simulated batch are exactly zero, because degenerate
    // Bernoullis have no variance and the bias term vanishes.
    let probs = vec![1.0f32, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let t = 0.25;
    assert_eq!(expected_batch_loss_analytic(&probs, 32, t), 0.0);

    let cfg = Config { probs, t, batch: 32 };
    // With p in {0,1} the draws are deterministic, so a small batch count
    // suffices to witness exact zeros.
    let mut rng = stream(3, StreamKey::new("decomp-test-polar"));
    for _ in 0..100 {
        let mut on = 0u32;
        for &p in &cfg.probs {
            for _ in 0..cfg.batch {
                on += (rng.random::<f32>() < p) as u32;
            }
        }
        let q = on as f64 / (cfg.batch * cfg.probs.len()) as f64;
        let d = cfg.t as f64 - q;
        assert_eq!(d * d, 0.0, "polarized batch must hit the target exactly");
    }
}

#[test]
fn variance_term_scales_inversely_with_batch_size() {
    // Doubling |B| halves the variance term; the bias term is untouched.
    let probs = vec![0.5f32, 0.5, 0.5, 0.5];
    let t = 0.5;
    let l16 = expected_batch_loss_analytic(&probs, 16, t);
    let l32 = expected_batch_loss_analytic(&probs, 32, t);
    assert!((l16 / l32 - 2.0).abs() < 1e-12);
}
