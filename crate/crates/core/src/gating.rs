//! Stochastic binary gate math.
//!
//! A gate holds two logits (w0, w1) and opens with probability
//! sigmoid(w1 - w0). Training samples hard opens/closes by perturbing
//! each logit with Gumbel noise and taking the argmax; gradients are
//! routed through a straight-through surrogate (see
//! [`StConfig`] / [`StBackward`]).

use rand_chacha::ChaCha8Rng;
use rand::Rng;

pub use crate::graph::{StBackward, StConfig};

/// Uniform draws are clamped away from {0, 1} before the double log so
/// the noise is always finite.
const UNIFORM_FLOOR: f64 = 1e-12;

/// Probability that the gate opens: sigmoid(w1 - w0), evaluated on the
/// non-overflowing branch.
pub fn gate_probability(w0: f32, w1: f32) -> f32 {
    gate_probability_f64(w0, w1) as f32
}

/// Full-precision variant for analyses that cannot afford the f32
/// rounding of the probability (e.g. the decay-energy decomposition).
pub fn gate_probability_f64(w0: f32, w1: f32) -> f64 {
    let d = (w1 as f64) - (w0 as f64);
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Standard Gumbel sample -ln(-ln(u)) from a uniform draw, in f64.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_FLOOR, 1.0 - UNIFORM_FLOOR);
    -((-u.ln()).ln())
}

/// One (g0, g1) pair per batch row, in draw order g0 then g1.
pub fn sample_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f32, f32)> {
    (0..n)
        .map(|_| {
            let g0 = gumbel_from_uniform(rng.random::<f64>()) as f32;
            let g1 = gumbel_from_uniform(rng.random::<f64>()) as f32;
            (g0, g1)
        })
        .collect()
}

/// Logit pair (w0, w1) = (0, ln(p / (1 - p))) whose gate opens with
/// probability `p`.
pub fn initial_logits(p: f32) -> (f32, f32) {
    assert!(p > 0.0 && p < 1.0, "initial gate probability must be in (0, 1)");
    let p = p as f64;
    (0.0, (p / (1.0 - p)).ln() as f32)
}
