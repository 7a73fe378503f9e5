use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::eam::FusionWeights;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Hyper-parameters of the two-stage protocol. Defaults follow the
/// DRIVE-style schedule; [`TrainConfig::stare`] shortens stage 1 to 40 epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub momentum: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub lr_power: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub fusion: FusionWeights,
    pub backbone: BackboneConfig,
    /// Random flips, quarter turns and pixel noise on training batches.
    pub augment: bool,
    /// Stop the cross-entropy gradient from reaching the attention branch.
    pub detach_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 50,
            stage2_epochs: 15,
            lr_stage1: 0.005,
            lr_stage2: 0.001,
            momentum: 0.9,
            lr_power: 0.9,
            seed: 0,
            batch_size: 4,
            loss_weights: LossWeights::default(),
            fusion: FusionWeights::default(),
            backbone: BackboneConfig::default(),
            augment: true,
            detach_attention: false,
        }
    }
}

impl TrainConfig {
    pub fn stare() -> Self {
        TrainConfig {
            stage1_epochs: 40,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.loss_weights.validate()?;
        self.backbone.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be > 0".into()));
        }
        for (name, v) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2", self.lr_stage2),
            ("momentum", self.momentum),
            ("lr_power", self.lr_power),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Short stable fingerprint of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Polynomial decay `base · (1 − epoch/total)^power`.
pub fn poly_lr(base: f64, epoch: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - epoch as f64 / total as f64).max(0.0).powf(power)
}

/// [`poly_lr`] with the default exponent 0.9.
pub fn lr_schedule(base: f64, epoch: usize, total: usize) -> f64 {
    poly_lr(base, epoch, total, 0.9)
}
