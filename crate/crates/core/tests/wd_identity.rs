//! Algebraic decomposition of gate-logit weight decay. With
//! p = sigmoid(w1 - w0), the decay energy of a gate splits as
//!
//!   w0^2 + w1^2 = ((w0 + w1)^2 + ln^2((1 - p)/p)) / 2
//!
//! i.e. a magnitude term plus a polarization term that is minimized at
//! p = 0.5. Plain weight decay on gate logits therefore actively pulls
//! gates toward indecision, which is why the training loop scales the
//! gate decay coefficient down by the gate count.

use gates_core::gating::{gate_probability, gate_probability_f64};
use gates_core::losses::gate_decay_split;

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[test]
fn decay_energy_decomposition_on_grid() {
    // 10 x 10 logit grid over [-3, 3]^2; the spacing avoids (0, 0), so
    // the energy never vanishes and relative error is well defined.
    let axis = linspace(-3.0, 3.0, 10);
    let mut worst = 0.0f64;
    let mut points = 0usize;
    for &w0 in &axis {
        for &w1 in &axis {
            let (w0, w1) = (w0 as f32, w1 as f32);
            let lhs = (w0 as f64) * (w0 as f64) + (w1 as f64) * (w1 as f64);
            let (magnitude, polarization) = gate_decay_split(w0, w1);
            let rhs = magnitude + polarization;
            let rel = (lhs - rhs).abs() / lhs;
            assert!(
                rel < 1e-9,
                "({w0}, {w1}): energy {lhs:.12e} vs split {rhs:.12e} (rel {rel:.3e})"
            );
            worst = worst.max(rel);
            points += 1;
        }
    }
    assert_eq!(points, 100);
    eprintln!("worst relative gap over the grid: {worst:.3e}");
}

#[test]
fn decay_on_antisymmetric_line_is_minimized_at_half() {
    // Restricted to w0 = -w1 = a the magnitude term vanishes, the whole
    // energy is the polarization term 2a^2, and its minimum sits at
    // a = 0 where the gate probability is exactly one half.
    let mut best: Option<(f64, f32)> = None;
    for &a in &linspace(-2.0, 2.0, 41) {
        let (w0, w1) = (a as f32, -a as f32);
        let (magnitude, polarization) = gate_decay_split(w0, w1);
        assert_eq!(magnitude, 0.0, "w0 = -w1 has no magnitude component");
        // Compare against 2a^2 at the f32-rounded logit actually used.
        let direct = 2.0 * (w0 as f64) * (w0 as f64);
        assert!(
            (polarization - direct).abs() <= 1e-9 * direct.max(1.0),
            "a = {a}: polarization {polarization} vs 2a^2 {direct}"
        );
        let energy = (w0 as f64) * (w0 as f64) + (w1 as f64) * (w1 as f64);
        let p = gate_probability(w0, w1);
        if best.is_none_or(|(e, _)| energy < e) {
            best = Some((energy, p));
        }
    }
    let (energy, p_at_min) = best.unwrap();
    assert_eq!(energy, 0.0);
    assert_eq!(p_at_min, 0.5);
}

#[test]
fn full_precision_probability_matches_rounded_path() {
    // The f32 probability used everywhere else is the f64 one rounded
    // once; they must agree to f32 resolution across the logit range.
    for &w0 in &linspace(-4.0, 4.0, 17) {
        for &w1 in &linspace(-4.0, 4.0, 17) {
            let (w0, w1) = (w0 as f32, w1 as f32);
            let lo = gate_probability(w0, w1) as f64;
            let hi = gate_probability_f64(w0, w1);
            assert!((lo - hi).abs() <= f32::EPSILON as f64, "({w0}, {w1})");
        }
    }
}
