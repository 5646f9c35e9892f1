//! Gate telemetry collected during training and its on-disk formats.
//!
//! Three files per run directory:
//! - `gates_per_epoch.csv` — `epoch,gate_id,activation_rate,p_mean`,
//!   one row per gate per epoch, measured on the evaluation split.
//! - `class_heatmap.csv` — `class_id,gate_id,activation_rate`, the
//!   final per-class activation matrix.
//! - `summary.json` — run outcome: accuracy, cost ratio, polarization.
//!
//! Floats are written with the shortest round-trip formatting, so a
//! reader recovers exactly the values that were measured.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gates with open probability strictly outside
/// `[POLARIZED_LO, POLARIZED_HI]` count as polarized: the stochastic
/// network has effectively committed to keeping or dropping them.
pub const POLARIZED_LO: f64 = 0.05;
pub const POLARIZED_HI: f64 = 0.95;

/// One epoch's per-gate measurements, aligned with
/// [`GateTelemetry::gate_ids`].
#[derive(Debug, Clone)]
pub struct EpochGates {
    pub epoch: usize,
    /// Fraction of evaluation samples on which the gate fired.
    pub activation_rate: Vec<f64>,
    /// Open probability (static for data-independent gates, averaged
    /// over the evaluation set for data-dependent ones).
    pub p_mean: Vec<f64>,
}

/// Telemetry accumulated over a training run.
#[derive(Debug, Clone, Default)]
pub struct GateTelemetry {
    pub gate_ids: Vec<String>,
    pub epochs: Vec<EpochGates>,
    /// Final per-class activation rates, `[class][gate]`.
    pub heatmap: Vec<Vec<f64>>,
}

/// Run outcome written to `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    /// Top-1 accuracy of the final model on the evaluation split.
    pub final_accuracy: f64,
    /// Mean realized FLOPs per sample divided by the static maximum.
    pub flops_ratio: f64,
    /// Fraction of gates polarized at the final epoch (open probability
    /// below [`POLARIZED_LO`] or above [`POLARIZED_HI`]).
    pub fraction_polarized: f64,
    /// Activation-rate target the run was asked to hit.
    pub target_rate: f64,
    /// Mean final activation rate over all gates and eval samples.
    pub mean_activation: f64,
}

fn check_rates(what: &str, rates: &[f64]) -> Result<()> {
    for (i, &r) in rates.iter().enumerate() {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(
                "telemetry",
                format!("{what}[{i}] = {r} is outside [0, 1]"),
            ));
        }
    }
    Ok(())
}

impl GateTelemetry {
    pub fn new(gate_ids: Vec<String>) -> Result<Self> {
        for id in &gate_ids {
            if id.contains([',', '"', '\n']) {
                return Err(Error::invalid("telemetry", format!("gate id {id:?} would break the CSV format")));
            }
        }
        Ok(GateTelemetry { gate_ids, epochs: Vec::new(), heatmap: Vec::new() })
    }

    /// Appends one epoch's measurements; both vectors follow
    /// `gate_ids` order.
    pub fn push_epoch(&mut self, epoch: usize, activation_rate: Vec<f64>, p_mean: Vec<f64>) -> Result<()> {
        if activation_rate.len() != self.gate_ids.len() || p_mean.len() != self.gate_ids.len() {
            return Err(Error::shape(
                "telemetry",
                "per-gate vectors",
                self.gate_ids.len().to_string(),
                format!("{} and {}", activation_rate.len(), p_mean.len()),
            ));
        }
        check_rates("activation_rate", &activation_rate)?;
        check_rates("p_mean", &p_mean)?;
        self.epochs.push(EpochGates { epoch, activation_rate, p_mean });
        Ok(())
    }

    /// Stores the final per-class activation matrix, `[class][gate]`.
    pub fn set_heatmap(&mut self, rates: Vec<Vec<f64>>) -> Result<()> {
        for row in &rates {
            if row.len() != self.gate_ids.len() {
                return Err(Error::shape(
                    "telemetry",
                    "heatmap row",
                    self.gate_ids.len().to_string(),
                    row.len().to_string(),
                ));
            }
            check_rates("heatmap", row)?;
        }
        self.heatmap = rates;
        Ok(())
    }

    /// Fraction of gates polarized at the latest recorded epoch.
    pub fn fraction_polarized(&self) -> Option<f64> {
        let last = self.epochs.last()?;
        if last.p_mean.is_empty() {
            return None;
        }
        let n = last.p_mean.iter().filter(|&&p| p < POLARIZED_LO || p > POLARIZED_HI).count();
        Some(n as f64 / last.p_mean.len() as f64)
    }

    /// Mean activation rate over all gates at the latest epoch.
    pub fn mean_activation(&self) -> Option<f64> {
        let last = self.epochs.last()?;
        if last.activation_rate.is_empty() {
            return None;
        }
        Some(last.activation_rate.iter().sum::<f64>() / last.activation_rate.len() as f64)
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Writes `gates_per_epoch.csv`, `class_heatmap.csv`, and
/// `summary.json` into `dir` (created if missing). Refuses empty
/// telemetry: a run that recorded nothing has no outcome to report.
pub fn emit_telemetry(telemetry: &GateTelemetry, summary: &Summary, dir: &Path) -> Result<()> {
    if telemetry.epochs.is_empty() {
        return Err(Error::invalid("telemetry", "no epochs recorded"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut csv = String::from("epoch,gate_id,activation_rate,p_mean\n");
    for e in &telemetry.epochs {
        for (g, id) in telemetry.gate_ids.iter().enumerate() {
            writeln!(csv, "{},{},{},{}", e.epoch, id, e.activation_rate[g], e.p_mean[g]).expect("string write");
        }
    }
    write_file(dir, "gates_per_epoch.csv", &csv)?;

    let mut csv = String::from("class_id,gate_id,activation_rate\n");
    for (class, row) in telemetry.heatmap.iter().enumerate() {
        for (g, id) in telemetry.gate_ids.iter().enumerate() {
            writeln!(csv, "{},{},{}", class, id, row[g]).expect("string write");
        }
    }
    write_file(dir, "class_heatmap.csv", &csv)?;

    let json = serde_json::to_string_pretty(summary)?;
    write_file(dir, "summary.json", &json)
}

/// Writes per-sample predictions as `sample_index,label,prediction`,
/// letting accuracy be recounted independently of the harness.
pub fn write_predictions(path: &Path, labels: &[usize], predictions: &[usize]) -> Result<()> {
    if labels.len() != predictions.len() {
        return Err(Error::shape(
            "predictions",
            "labels vs predictions",
            labels.len().to_string(),
            predictions.len().to_string(),
        ));
    }
    let mut csv = String::from("sample_index,label,prediction\n");
    for (i, (l, p)) in labels.iter().zip(predictions).enumerate() {
        writeln!(csv, "{i},{l},{p}").expect("string write");
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (GateTelemetry, Summary) {
        let mut t = GateTelemetry::new(vec!["b0.conv1.c0".into(), "b0.conv1.c1".into(), "b0.conv2".into(), "b1.input".into()]).unwrap();
        t.push_epoch(0, vec![0.5, 0.25, 1.0, 0.75], vec![0.5, 0.3, 0.9, 0.7]).unwrap();
        t.push_epoch(1, vec![1.0, 0.0, 1.0, 0.5], vec![0.01, 0.5, 0.99, 0.96]).unwrap();
        t.set_heatmap(vec![vec![1.0, 0.0, 1.0, 0.5], vec![0.0, 1.0, 1.0, 0.5]]).unwrap();
        let summary = Summary {
            final_accuracy: 0.9375,
            flops_ratio: 0.40625,
            fraction_polarized: t.fraction_polarized().unwrap(),
            target_rate: 0.5,
            mean_activation: t.mean_activation().unwrap(),
        };
        (t, summary)
    }

    /// Splits CSV lines as (epoch, gate_id, rate, p).
    fn parse_epoch_csv(text: &str) -> Vec<(usize, String, f64, f64)> {
        text.lines()
            .skip(1)
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                (f[0].parse().unwrap(), f[1].to_string(), f[2].parse().unwrap(), f[3].parse().unwrap())
            })
            .collect()
    }

    #[test]
    fn fraction_polarized_matches_a_recount_from_the_emitted_csv() {
        let (t, s) = sample();
        // Hand count: final p_mean = [0.01, 0.5, 0.99, 0.96] -> 0.01 and
        // 0.96, 0.99 are outside [0.05, 0.95]; 3 of 4 gates.
        assert_eq!(s.fraction_polarized, 0.75);

        let dir = tempfile::tempdir().unwrap();
        emit_telemetry(&t, &s, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("gates_per_epoch.csv")).unwrap();
        let rows = parse_epoch_csv(&text);
        let last_epoch = rows.iter().map(|r| r.0).max().unwrap();
        let finals: Vec<f64> = rows.iter().filter(|r| r.0 == last_epoch).map(|r| r.3).collect();
        let recount =
            finals.iter().filter(|&&p| p < POLARIZED_LO || p > POLARIZED_HI).count() as f64 / finals.len() as f64;
        assert_eq!(recount, s.fraction_polarized);

        let parsed: Summary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(parsed, s);
    }

    #[test]
    fn saturated_gates_emit_rate_one_everywhere() {
        let mut t = GateTelemetry::new(vec!["a".into(), "b".into()]).unwrap();
        t.push_epoch(0, vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        t.set_heatmap(vec![vec![1.0, 1.0]]).unwrap();
        let s = Summary {
            final_accuracy: 1.0,
            flops_ratio: 1.0,
            fraction_polarized: 1.0,
            target_rate: 1.0,
            mean_activation: 1.0,
        };
        let dir = tempfile::tempdir().unwrap();
        emit_telemetry(&t, &s, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("gates_per_epoch.csv")).unwrap();
        for (_, _, rate, _) in parse_epoch_csv(&text) {
            assert_eq!(rate, 1.0);
        }
        let heat = std::fs::read_to_string(dir.path().join("class_heatmap.csv")).unwrap();
        for line in heat.lines().skip(1) {
            assert_eq!(line.rsplit(',').next().unwrap(), "1");
        }
    }

    #[test]
    fn heatmap_round_trips_through_the_csv() {
        let (t, s) = sample();
        let dir = tempfile::tempdir().unwrap();
        emit_telemetry(&t, &s, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("class_heatmap.csv")).unwrap();
        let mut matrix = vec![vec![f64::NAN; t.gate_ids.len()]; t.heatmap.len()];
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let class: usize = f[0].parse().unwrap();
            let g = t.gate_ids.iter().position(|id| id == f[1]).unwrap();
            matrix[class][g] = f[2].parse().unwrap();
        }
        assert_eq!(matrix, t.heatmap);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut t = GateTelemetry::new(vec!["a".into()]).unwrap();
        assert!(t.push_epoch(0, vec![1.5], vec![0.5]).is_err());
        assert!(t.push_epoch(0, vec![0.5, 0.5], vec![0.5]).is_err());
        assert!(t.set_heatmap(vec![vec![0.5, 0.5]]).is_err());
        assert!(GateTelemetry::new(vec!["a,b".into()]).is_err());

        let s = Summary {
            final_accuracy: 0.0,
            flops_ratio: 0.0,
            fraction_polarized: 0.0,
            target_rate: 0.0,
            mean_activation: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        // Nothing recorded: refused.
        assert!(emit_telemetry(&t, &s, dir.path()).is_err());

        // A file where the directory should be: unwritable.
        t.push_epoch(0, vec![0.5], vec![0.5]).unwrap();
        let blocker = dir.path().join("not_a_dir");
        std::fs::write(&blocker, b"x").unwrap();
        assert!(emit_telemetry(&t, &s, &blocker).is_err());
    }

    #[test]
    fn predictions_csv_supports_an_independent_accuracy_recount() {
        let labels = vec![0, 1, 2, 1, 0];
        let preds = vec![0, 1, 1, 1, 2];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        write_predictions(&path, &labels, &preds).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            total += 1;
            if f[1] == f[2] {
                correct += 1;
            }
        }
        assert_eq!(total, 5);
        assert_eq!(correct as f64 / total as f64, crate::infer::accuracy(&preds, &labels));

        assert!(write_predictions(&path, &labels, &preds[..3]).is_err());
    }
}
