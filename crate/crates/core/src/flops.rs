//! FLOPs bookkeeping for gated networks.
//!
//! Convention (used consistently everywhere, including targets and
//! reports): a multiply-add counts as 2 FLOPs; batchnorm costs 2 and
//! ReLU 1 per element. A convolution's cost is bilinear in the number
//! of active channels at its input and output gate sites:
//!
//! ```text
//! cost = 2 * n_in * n_out * Kh * Kw * Hout * Wout
//! ```
//!
//! The BN+ReLU that follow a conv scale with its active output
//! channels and are attributed to the same output site, so that a
//! pruned network's static maximum equals the original network's
//! realized count at the same mask — exactly, in integer arithmetic.
//! Costs not controlled by any gate (stem, residual adds, pooling,
//! classifier) sit in `ungated_floor`.

use crate::error::{Error, Result};

/// FLOPs of a dense 2-D convolution.
pub fn conv_flops(cin: usize, cout: usize, kh: usize, kw: usize, hout: usize, wout: usize) -> u64 {
    2 * cin as u64 * cout as u64 * kh as u64 * kw as u64 * hout as u64 * wout as u64
}

/// A group of channels controlled by gates, e.g. "block0 conv1 outputs".
#[derive(Debug, Clone)]
pub struct SiteSpec {
    pub id: String,
    pub channels: usize,
}

/// One convolution's cost entry. `input_site` / `output_site` index into
/// [`FlopsModel::sites`]; `None` means that side is never masked.
#[derive(Debug, Clone)]
pub struct ConvEntry {
    pub layer_id: String,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub hout: usize,
    pub wout: usize,
    pub input_site: Option<usize>,
    pub output_site: Option<usize>,
    /// Elementwise ops per output element for the BN/ReLU that follow
    /// this conv (0 if none); scales with active output channels.
    pub elemwise_ops: u64,
}

impl ConvEntry {
    /// Cost with the given numbers of active channels on each side.
    pub fn cost(&self, n_in: usize, n_out: usize) -> u64 {
        conv_flops(n_in, n_out, self.kh, self.kw, self.hout, self.wout)
            + self.elemwise_ops * n_out as u64 * self.hout as u64 * self.wout as u64
    }

    pub fn max_cost(&self) -> u64 {
        self.cost(self.cin, self.cout)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FlopsModel {
    pub sites: Vec<SiteSpec>,
    pub convs: Vec<ConvEntry>,
    pub ungated_floor: u64,
}

impl FlopsModel {
    /// Total cost with every gate open.
    pub fn max_flops(&self) -> u64 {
        self.ungated_floor + self.convs.iter().map(|c| c.max_cost()).sum::<u64>()
    }

    fn check(&self, active: &[usize]) -> Result<()> {
        if active.len() != self.sites.len() {
            return Err(Error::shape(
                "realized_flops",
                "per-site active counts",
                self.sites.len().to_string(),
                active.len().to_string(),
            ));
        }
        for (s, &a) in self.sites.iter().zip(active) {
            if a > s.channels {
                return Err(Error::invalid(
                    "realized_flops",
                    format!("site '{}' has {} channels but {} marked active", s.id, s.channels, a),
                ));
            }
        }
        Ok(())
    }

    /// Exact cost for one sample given the number of open channels at
    /// each site. Ungated sides count at full width.
    pub fn realized_flops(&self, active: &[usize]) -> Result<u64> {
        self.check(active)?;
        let mut total = self.ungated_floor;
        for conv in &self.convs {
            let n_in = conv.input_site.map_or(conv.cin, |s| active[s]);
            let n_out = conv.output_site.map_or(conv.cout, |s| active[s]);
            total += conv.cost(n_in, n_out);
        }
        Ok(total)
    }

    /// Per-gate linear cost weights for the FLOPs-targeted loss.
    ///
    /// Each conv's full cost is attributed half to its input site and
    /// half to its output site (fully to one side when only that side
    /// is gated), then split evenly over the site's gates; elementwise
    /// overhead goes to the output side. The weights satisfy
    /// `floor + sum(weights) ~= max_flops` (exactly, up to the f64
    /// division per gate), so `floor + sum_i w_i * mean(z_i)` is the
    /// linear interpolation of the cost between all-off and all-on.
    pub fn gate_weights(&self, gates_per_site: &[usize]) -> Result<Vec<f64>> {
        if gates_per_site.len() != self.sites.len() {
            return Err(Error::shape(
                "gate_weights",
                "gates per site",
                self.sites.len().to_string(),
                gates_per_site.len().to_string(),
            ));
        }
        let mut site_totals = vec![0u64; self.sites.len()];
        for conv in &self.convs {
            let core = conv_flops(conv.cin, conv.cout, conv.kh, conv.kw, conv.hout, conv.wout);
            let elem = conv.elemwise_ops * conv.cout as u64 * conv.hout as u64 * conv.wout as u64;
            match (conv.input_site, conv.output_site) {
                (Some(i), Some(o)) => {
                    site_totals[i] += core / 2;
                    site_totals[o] += core - core / 2 + elem;
                }
                (Some(i), None) => site_totals[i] += core + elem,
                (None, Some(o)) => site_totals[o] += core + elem,
                (None, None) => {}
            }
        }
        let mut weights = Vec::new();
        for (s, (&total, &count)) in site_totals.iter().zip(gates_per_site).enumerate() {
            if count == 0 {
                return Err(Error::invalid(
                    "gate_weights",
                    format!("site '{}' has no gates", self.sites[s].id),
                ));
            }
            let w = total as f64 / count as f64;
            weights.extend(std::iter::repeat(w).take(count));
        }
        Ok(weights)
    }

    /// Expected per-layer cost under independent per-channel open
    /// probabilities, where `site_p[s]` is the mean open probability at
    /// site s. Used by the report command.
    pub fn expected_layer_flops(&self, site_p: &[f64]) -> Result<Vec<f64>> {
        if site_p.len() != self.sites.len() {
            return Err(Error::shape(
                "expected_flops",
                "per-site probabilities",
                self.sites.len().to_string(),
                site_p.len().to_string(),
            ));
        }
        Ok(self
            .convs
            .iter()
            .map(|conv| {
                let p_in = conv.input_site.map_or(1.0, |s| site_p[s]);
                let p_out = conv.output_site.map_or(1.0, |s| site_p[s]);
                let core = conv_flops(conv.cin, conv.cout, conv.kh, conv.kw, conv.hout, conv.wout) as f64;
                let elem = (conv.elemwise_ops * conv.cout as u64 * conv.hout as u64 * conv.wout as u64) as f64;
                core * p_in * p_out + elem * p_out
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_flops_hand_counts() {
        assert_eq!(conv_flops(3, 8, 3, 3, 8, 8), 27_648);
        assert_eq!(conv_flops(4, 8, 1, 1, 2, 2), 256);
        assert_eq!(conv_flops(1, 1, 1, 1, 1, 1), 2);
    }

    #[test]
    fn doubling_output_dims_quadruples_cost() {
        let a = conv_flops(3, 8, 3, 3, 8, 8);
        let b = conv_flops(3, 8, 3, 3, 16, 16);
        assert_eq!(b, 4 * a);
    }

    /// Two output-gated convs costing 300 and 100 with no floor.
    fn toy_model() -> FlopsModel {
        FlopsModel {
            sites: vec![
                SiteSpec { id: "a".into(), channels: 3 },
                SiteSpec { id: "b".into(), channels: 1 },
            ],
            convs: vec![
                ConvEntry {
                    layer_id: "conv_a".into(),
                    cin: 1, cout: 3, kh: 1, kw: 1, hout: 5, wout: 10,
                    input_site: None, output_site: Some(0), elemwise_ops: 0,
                },
                ConvEntry {
                    layer_id: "conv_b".into(),
                    cin: 1, cout: 1, kh: 1, kw: 1, hout: 5, wout: 10,
                    input_site: None, output_site: Some(1), elemwise_ops: 0,
                },
            ],
            ungated_floor: 0,
        }
    }

    #[test]
    fn toy_max_and_realized() {
        let m = toy_model();
        assert_eq!(m.max_flops(), 400);
        assert_eq!(m.realized_flops(&[3, 1]).unwrap(), 400);
        assert_eq!(m.realized_flops(&[3, 0]).unwrap(), 300);
        assert_eq!(m.realized_flops(&[0, 0]).unwrap(), 0);
    }

    #[test]
    fn toy_layer_granularity_weights() {
        let m = toy_model();
        // One gate per site: weights are the full site costs.
        assert_eq!(m.gate_weights(&[1, 1]).unwrap(), vec![300.0, 100.0]);
        // Channel granularity on site a: the 300 splits over 3 gates.
        assert_eq!(m.gate_weights(&[3, 1]).unwrap(), vec![100.0, 100.0, 100.0, 100.0]);
    }

    #[test]
    fn weights_sum_to_max_minus_floor() {
        let m = toy_model();
        let w: f64 = m.gate_weights(&[3, 1]).unwrap().iter().sum();
        assert_eq!(w as u64 + m.ungated_floor, m.max_flops());
    }

    #[test]
    fn bilinear_cost_on_a_doubly_gated_conv() {
        let m = FlopsModel {
            sites: vec![
                SiteSpec { id: "in".into(), channels: 2 },
                SiteSpec { id: "out".into(), channels: 2 },
            ],
            convs: vec![ConvEntry {
                layer_id: "c".into(),
                cin: 2, cout: 2, kh: 1, kw: 1, hout: 1, wout: 1,
                input_site: Some(0), output_site: Some(1), elemwise_ops: 0,
            }],
            ungated_floor: 7,
        };
        assert_eq!(m.max_flops(), 7 + 8);
        // Half the channels on each side: quarter of the conv cost.
        assert_eq!(m.realized_flops(&[1, 1]).unwrap(), 7 + 2);
        // Dead output: the conv contributes nothing.
        assert_eq!(m.realized_flops(&[2, 0]).unwrap(), 7);
    }

    #[test]
    fn elemwise_overhead_follows_output_channels() {
        let m = FlopsModel {
            sites: vec![SiteSpec { id: "out".into(), channels: 4 }],
            convs: vec![ConvEntry {
                layer_id: "c".into(),
                cin: 1, cout: 4, kh: 1, kw: 1, hout: 3, wout: 3,
                input_site: None, output_site: Some(0), elemwise_ops: 3,
            }],
            ungated_floor: 0,
        };
        // core 2*1*4*9 = 72, elem 3*4*9 = 108.
        assert_eq!(m.max_flops(), 180);
        assert_eq!(m.realized_flops(&[2]).unwrap(), 36 + 54);
        let w = m.gate_weights(&[4]).unwrap();
        assert_eq!(w, vec![45.0; 4]);
    }

    #[test]
    fn active_counts_are_validated() {
        let m = toy_model();
        assert!(m.realized_flops(&[3]).is_err());
        assert!(m.realized_flops(&[4, 0]).is_err());
    }
}
