//! Experiment configuration: strict JSON in, validated settings out.
//!
//! Unknown keys are errors — a typo in a config silently falling back
//! to a default would make runs irreproducible in the worst way.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::network::{GateKind, Granularity, NetworkSpec};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Class-conditional pattern images with Gaussian pixel noise.
    Synthetic {
        num_classes: usize,
        samples_per_class: usize,
        image_size: usize,
        #[serde(default = "default_noise_sigma")]
        noise_sigma: f32,
        #[serde(default)]
        seed: u64,
    },
    /// IDX-format image/label file pair (big-endian binary).
    Idx { images: PathBuf, labels: PathBuf },
}

fn default_noise_sigma() -> f32 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_decay_factor: f32,
    /// Zero-based epoch indices at whose start the LR is multiplied by
    /// the decay factor.
    pub lr_step_epochs: Vec<usize>,
    pub momentum: f32,
    pub weight_decay: f32,
    pub wd_gate_multiplier: f32,
    pub target_rate: f32,
    pub loss_kind: LossKind,
    pub gate_kind: GateKind,
    pub gate_granularity: Granularity,
    pub gate_init_p: f32,
    pub temperature: f32,
    /// Weight on the activation loss relative to the classification
    /// loss.
    #[serde(default = "default_one_f32")]
    pub act_loss_coeff: f32,
    /// Optional per-gate targets for the per-gate loss; defaults to
    /// `target_rate` everywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aig_targets: Option<Vec<f32>>,
    pub dataset: DatasetConfig,
    /// Path to a network spec JSON; omitted means the desk-scale
    /// reference network sized to the dataset's class count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<PathBuf>,
    pub out_dir: PathBuf,
}

fn default_one_f32() -> f32 {
    1.0
}

impl TrainConfig {
    /// Small-scale preset: batch 64, 30 epochs, LR 0.05 stepping down
    /// by 10x at epochs 15 and 25, momentum 0.9, weight decay 1e-4
    /// with a 20x gate multiplier.
    pub fn desk_preset() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            lr_decay_factor: 0.1,
            lr_step_epochs: vec![15, 25],
            momentum: 0.9,
            weight_decay: 1e-4,
            wd_gate_multiplier: 20.0,
            target_rate: 0.5,
            loss_kind: LossKind::Batch,
            gate_kind: GateKind::Independent,
            gate_granularity: Granularity::Channel,
            gate_init_p: 0.8,
            temperature: 1.0,
            act_loss_coeff: 1.0,
            aig_targets: None,
            dataset: DatasetConfig::Synthetic {
                num_classes: 4,
                samples_per_class: 320,
                image_size: 16,
                noise_sigma: 0.1,
                seed: 0,
            },
            network: None,
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text)?;
        if let Some(net) = &cfg.network {
            if !net.exists() {
                return Err(Error::Config(format!("network spec not found: {}", net.display())));
            }
        }
        if let DatasetConfig::Idx { images, labels } = &cfg.dataset {
            for p in [images, labels] {
                if !p.exists() {
                    return Err(Error::Config(format!("dataset file not found: {}", p.display())));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f32| -> Result<()> {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
            Ok(())
        };
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 (batchnorm needs batch statistics)".into()));
        }
        // lr = 0 is allowed: a frozen run that only moves BN statistics.
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        rate("momentum", self.momentum)?;
        rate("target_rate", self.target_rate)?;
        rate("gate_init_p", self.gate_init_p)?;
        if !(self.gate_init_p > 0.0 && self.gate_init_p < 1.0) {
            return Err(Error::Config(format!("gate_init_p must be strictly inside (0, 1), got {}", self.gate_init_p)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.wd_gate_multiplier >= 0.0) || !self.wd_gate_multiplier.is_finite() {
            return Err(Error::Config(format!(
                "wd_gate_multiplier must be >= 0, got {}",
                self.wd_gate_multiplier
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.act_loss_coeff >= 0.0) || !self.act_loss_coeff.is_finite() {
            return Err(Error::Config(format!("act_loss_coeff must be >= 0, got {}", self.act_loss_coeff)));
        }
        if let Some(targets) = &self.aig_targets {
            for (i, &t) in targets.iter().enumerate() {
                rate(&format!("aig_targets[{i}]"), t)?;
            }
        }
        match &self.dataset {
            DatasetConfig::Synthetic { num_classes, samples_per_class, image_size, noise_sigma, .. } => {
                if *num_classes < 2 {
                    return Err(Error::Config("synthetic dataset needs num_classes >= 2".into()));
                }
                if *samples_per_class == 0 {
                    return Err(Error::Config("samples_per_class must be >= 1".into()));
                }
                if *image_size == 0 {
                    return Err(Error::Config("image_size must be >= 1".into()));
                }
                if !(*noise_sigma >= 0.0) || !noise_sigma.is_finite() {
                    return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
                }
            }
            DatasetConfig::Idx { .. } => {}
        }
        Ok(())
    }

    /// Number of classes implied by the dataset config; IDX datasets
    /// resolve it when loaded, so it is only known for synthetic data.
    pub fn synthetic_num_classes(&self) -> Option<usize> {
        match &self.dataset {
            DatasetConfig::Synthetic { num_classes, .. } => Some(*num_classes),
            DatasetConfig::Idx { .. } => None,
        }
    }

    /// Resolves the network spec: explicit path if given, otherwise the
    /// desk reference sized to `num_classes`.
    pub fn resolve_network(&self, num_classes: usize) -> Result<NetworkSpec> {
        match &self.network {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let spec: NetworkSpec = serde_json::from_str(&text)?;
                spec.validate()?;
                if spec.num_classes != num_classes {
                    return Err(Error::Config(format!(
                        "network spec declares {} classes but the dataset has {num_classes}",
                        spec.num_classes
                    )));
                }
                Ok(spec)
            }
            None => Ok(NetworkSpec::desk_reference(num_classes)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_a_fixed_point() {
        let cfg = TrainConfig::desk_preset();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = TrainConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
        let text2 = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = TrainConfig::desk_preset();
        let mut v: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        v.as_object_mut().unwrap().insert("learning_rate".into(), 0.1.into());
        let text = serde_json::to_string(&v).unwrap();
        let err = TrainConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = TrainConfig::desk_preset();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::desk_preset();
        cfg.target_rate = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::desk_preset();
        cfg.gate_init_p = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::desk_preset();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desk_preset_matches_documented_schedule() {
        let cfg = TrainConfig::desk_preset();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.epochs, 30);
        assert!((cfg.lr - 0.05).abs() < 1e-9);
        assert_eq!(cfg.lr_step_epochs, vec![15, 25]);
        assert!((cfg.momentum - 0.9).abs() < 1e-9);
        assert!((cfg.weight_decay - 1e-4).abs() < 1e-12);
        assert!((cfg.wd_gate_multiplier - 20.0).abs() < 1e-9);
    }
}
