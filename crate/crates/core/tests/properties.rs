//! Property tests for the cost model, the activation losses, and the
//! masking algebra: randomized inputs, structural invariants.

use gates_core::flops::{ConvEntry, FlopsModel, SiteSpec};
use gates_core::gating::gate_probability;
use gates_core::graph::{Graph, MaskLayout};
use gates_core::losses::{aig_per_gate_loss, batch_activation_loss, ActivationRecord};
use gates_core::tensor::Tensor;
use proptest::prelude::*;

/// Random single-site cost model plus a per-conv wiring choice.
fn arb_model() -> impl Strategy<Value = FlopsModel> {
    let conv = (
        1usize..12,  // cin
        1usize..12,  // cout
        prop_oneof![Just(1usize), Just(3usize)],
        1usize..6,   // hout
        1usize..6,   // wout
        0u64..4,     // elemwise
        0usize..4,   // wiring: which sides the site gates
    )
        .prop_map(|(cin, cout, k, hout, wout, elemwise, wiring)| {
            let (input_site, output_site) = match wiring {
                0 => (None, None),
                1 => (Some(0), None),
                2 => (None, Some(0)),
                _ => (Some(0), Some(0)),
            };
            ConvEntry {
                layer_id: "prop.conv".into(),
                cin,
                cout,
                kh: k,
                kw: k,
                hout,
                wout,
                input_site,
                output_site,
                elemwise_ops: elemwise,
            }
        });
    (1usize..16, prop::collection::vec(conv, 1..6), 0u64..10_000).prop_map(
        |(width, convs, floor)| FlopsModel {
            sites: vec![SiteSpec { id: "prop.site".into(), channels: width }],
            convs,
            ungated_floor: floor,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Opening more channels can only cost more: realized FLOPs are
    /// monotone in the per-site open counts.
    #[test]
    fn realized_flops_monotone_in_open_channels(
        model in arb_model(),
        lo_frac in 0.0f64..1.0,
        hi_frac in 0.0f64..1.0,
    ) {
        let width = model.sites[0].channels;
        let a = (width as f64 * lo_frac.min(hi_frac)) as usize;
        let b = (width as f64 * lo_frac.max(hi_frac)) as usize;
        let cheap = model.realized_flops(&[a]).unwrap();
        let dear = model.realized_flops(&[b]).unwrap();
        prop_assert!(cheap <= dear, "open {a} cost {cheap} > open {b} cost {dear}");
        prop_assert!(dear <= model.realized_flops(&[width]).unwrap());
        prop_assert!(model.ungated_floor <= model.realized_flops(&[0]).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// The batch loss sees only the population mean, so reordering
    /// samples or gates cannot change it beyond accumulation rounding.
    #[test]
    fn batch_loss_is_permutation_invariant(
        bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 8), 1..6),
        row_perm in Just(()).prop_flat_map(|_| Just((0usize..8).collect::<Vec<_>>()).prop_shuffle()),
        col_seed in any::<u64>(),
        t in 0.0f32..=1.0,
    ) {
        let loss = |cols: &[Vec<f32>]| -> f32 {
            let mut g = Graph::new();
            let z: Vec<Tensor> = cols
                .iter()
                .map(|c| g.leaf(&Tensor::new(vec![c.len()], c.clone()).unwrap()))
                .collect();
            batch_activation_loss(&mut g, &ActivationRecord::new(z), t).unwrap().item()
        };

        let cols: Vec<Vec<f32>> = bits
            .iter()
            .map(|col| col.iter().map(|&b| b as u8 as f32).collect())
            .collect();
        let base = loss(&cols);

        let shuffled_rows: Vec<Vec<f32>> = cols
            .iter()
            .map(|col| row_perm.iter().map(|&i| col[i]).collect())
            .collect();
        // Gate order: rotate by a random offset (a permutation easy to
        // derive from one integer).
        let offset = (col_seed % cols.len() as u64) as usize;
        let mut rotated = shuffled_rows.clone();
        rotated.rotate_left(offset);

        prop_assert!((loss(&shuffled_rows) - base).abs() <= 1e-6);
        prop_assert!((loss(&rotated) - base).abs() <= 1e-6);
    }

    /// With a single gate the population mean *is* the per-gate mean, so
    /// the batch loss and the per-gate loss coincide.
    #[test]
    fn single_gate_batch_and_per_gate_losses_coincide(
        bits in prop::collection::vec(any::<bool>(), 1..64),
        t in 0.0f32..=1.0,
    ) {
        let col: Vec<f32> = bits.iter().map(|&b| b as u8 as f32).collect();
        let n = col.len();
        let mut g = Graph::new();
        let z = vec![g.leaf(&Tensor::new(vec![n], col.clone()).unwrap())];
        let rec = ActivationRecord::new(z);
        let batch = batch_activation_loss(&mut g, &rec, t).unwrap().item();
        let aig = aig_per_gate_loss(&mut g, &rec, &[t]).unwrap().item();
        prop_assert!((batch - aig).abs() <= 1e-6, "batch {batch} vs per-gate {aig}");
    }

    /// Masking distributes over disjoint binary channel masks: the sum
    /// of the two masked copies equals masking by the union, exactly.
    #[test]
    fn mask_linearity_on_disjoint_binary_masks(
        owners in prop::collection::vec(0u8..3, 1..8),
        xs in prop::collection::vec(-2.0f32..2.0, 64),
    ) {
        let c = owners.len();
        let x_data: Vec<f32> = (0..2 * c * 4).map(|i| xs[i % xs.len()]).collect();
        let z1: Vec<f32> = owners.iter().map(|&o| (o == 1) as u8 as f32).collect();
        let z2: Vec<f32> = owners.iter().map(|&o| (o == 2) as u8 as f32).collect();
        let zu: Vec<f32> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();

        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(vec![2, c, 2, 2], x_data).unwrap());
        let masked = |g: &mut Graph, x: &Tensor, z: &[f32]| {
            let zt = g.constant(&Tensor::new(vec![z.len()], z.to_vec()).unwrap());
            g.channel_mask(x, &zt, MaskLayout::PerChannel).unwrap()
        };
        let m1 = masked(&mut g, &x, &z1);
        let m2 = masked(&mut g, &x, &z2);
        let sum = g.add(&m1, &m2).unwrap();
        let union = masked(&mut g, &x, &zu);
        for (i, (&a, &b)) in sum.data().iter().zip(union.data().iter()).enumerate() {
            prop_assert!(a == b, "element {i}: {a} vs {b}");
        }
    }

    /// The gate probability is a proper probability, monotone in the
    /// logit gap, and complement-symmetric under swapping the logits.
    /// Logit gaps stay within +-16: past that, sigmoid rounds to exactly
    /// 0 or 1 in f32 (covered by a dedicated saturation unit test).
    #[test]
    fn gate_probability_shape(
        w0 in -8.0f32..8.0,
        w1 in -8.0f32..8.0,
        bump in 0.0f32..4.0,
    ) {
        let p = gate_probability(w0, w1);
        prop_assert!(p > 0.0 && p < 1.0);
        prop_assert!(gate_probability(w0, w1 + bump) >= p);
        prop_assert!(gate_probability(w0 + bump, w1) <= p);
        let q = gate_probability(w1, w0);
        prop_assert!((p + q - 1.0).abs() <= 2.0 * f32::EPSILON);
    }
}
