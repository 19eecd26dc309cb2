//! Run configuration (JSON) and command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::SyntheticDatasetSpec;
use crate::attack::{AdamSettings, AttackConfig};
use crate::encryptor::{EncryptionConfig, KeyTrainingConfig};
use crate::error::{Error, Result};
use crate::models::{PatchDiscriminatorSpec, ServiceModelSpec, ServiceTrainConfig, UNetSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSource {
    /// Rendered into the run directory, then ingested like any other directory.
    Synthetic(SyntheticDatasetSpec),
    /// `<path>/<identity>/<file>.png|jpg`.
    Directory { path: PathBuf },
}

impl DatasetSource {
    fn synthetic(
        identities: usize,
        per_identity: usize,
        size: usize,
        first_identity: usize,
    ) -> Self {
        DatasetSource::Synthetic(SyntheticDatasetSpec {
            first_identity,
            ..SyntheticDatasetSpec::new(identities, per_identity, size, 0)
        })
    }
}

/// One seed per stage; every seed is recorded in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub service: u64,
    /// The private key's seed.
    pub key: u64,
    pub attack: u64,
    /// Evaluation service model and wrong-key control.
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            service: 2,
            key: 3,
            attack: 4,
            eval: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub gan_loss: bool,
    pub aug_id_loss: bool,
}

impl AblationCell {
    pub const FULL: AblationCell = AblationCell {
        gan_loss: true,
        aug_id_loss: true,
    };

    pub fn grid() -> Vec<AblationCell> {
        [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(gan_loss, aug_id_loss)| AblationCell {
                gan_loss,
                aug_id_loss,
            })
            .collect()
    }

    pub fn tag(&self) -> String {
        format!(
            "gan{}_aug{}",
            u8::from(self.gan_loss),
            u8::from(self.aug_id_loss)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub fraction: f64,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub gallery: DatasetSource,
    /// Natural images for the discriminator; identities disjoint from the gallery.
    pub auxiliary: DatasetSource,
    /// Training data for the target and evaluation service models.
    pub service_data: DatasetSource,
    /// The key owner's private images used to prepare the key model.
    pub key_private: DatasetSource,
    /// Fresh identities used as the "random images" baseline.
    pub random_baseline: DatasetSource,
    pub image_size: usize,
    pub seeds: Seeds,
    pub service_model: ServiceModelSpec,
    pub eval_model: ServiceModelSpec,
    pub service_training: ServiceTrainConfig,
    pub key_model: UNetSpec,
    pub key_training: KeyTrainingConfig,
    pub encryption: EncryptionConfig,
    /// Template for every attack run; the seed, fraction and ablation toggles are filled per run.
    pub attack: AttackConfig,
    pub fractions: Vec<f64>,
    /// Attack replicates; replicate `i` uses attack seed `seeds.attack + i`.
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub ablation: Option<AblationGrid>,
    pub far_target: f64,
    /// Train and evaluate the attack on 8-bit PNG round-trips of the encrypted images.
    #[serde(default)]
    pub attack_from_quantized: bool,
    /// Not part of any cache key.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    /// Desk-scale profile: 32×32 images, 100-image gallery (50 training pool / 50 held out).
    fn default() -> Self {
        let size = 32;
        Self {
            gallery: DatasetSource::synthetic(25, 4, size, 0),
            auxiliary: DatasetSource::synthetic(32, 4, size, 3000),
            service_data: DatasetSource::synthetic(32, 8, size, 1000),
            key_private: DatasetSource::synthetic(16, 4, size, 2000),
            random_baseline: DatasetSource::synthetic(50, 1, size, 4000),
            image_size: size,
            seeds: Seeds::default(),
            service_model: ServiceModelSpec {
                width: 16,
                ..Default::default()
            },
            eval_model: ServiceModelSpec {
                width: 16,
                ..Default::default()
            },
            service_training: ServiceTrainConfig::default(),
            key_model: UNetSpec {
                depth: 2,
                base_channels: 16,
                ..Default::default()
            },
            key_training: KeyTrainingConfig::default(),
            encryption: EncryptionConfig {
                batch_size: 25,
                ..Default::default()
            },
            attack: AttackConfig {
                steps: 800,
                batch_size: 16,
                unet: UNetSpec {
                    depth: 2,
                    base_channels: 16,
                    group_norm: false,
                    ..Default::default()
                },
                discriminator: PatchDiscriminatorSpec {
                    layers: 3,
                    base_channels: 32,
                    in_channels: 3,
                },
                generator_optimizer: AdamSettings {
                    learning_rate: 1e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
            fractions: vec![0.01, 0.03, 0.10, 0.70],
            replicates: 1,
            ablation: Some(AblationGrid {
                fraction: 0.03,
                cells: AblationCell::grid(),
            }),
            far_target: 0.01,
            attack_from_quantized: false,
            output_dir: PathBuf::from("avih-run"),
        }
    }
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::contract("replicates must be at least 1"));
        }
        if self.fractions.is_empty() && self.ablation.is_none() {
            return Err(Error::contract("no attack runs configured"));
        }
        for w in self.fractions.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::contract("fractions must be sorted and unique"));
            }
        }
        let ab = self.ablation.iter().map(|a| a.fraction);
        for f in self.fractions.iter().copied().chain(ab) {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::contract(format!("fraction {f} outside (0, 1]")));
            }
        }
        if !(self.far_target > 0.0 && self.far_target < 1.0) {
            return Err(Error::contract("far_target must lie in (0, 1)"));
        }
        if !self
            .image_size
            .is_multiple_of(1 << self.key_model.depth.max(self.attack.unet.depth))
        {
            return Err(Error::contract(
                "image_size must be divisible by 2^depth of the U-Nets",
            ));
        }
        self.encryption.validate()?;
        self.attack.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn attack_seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64)
            .map(|i| self.seeds.attack + i)
            .collect()
    }

    /// Every attack run of this configuration, without duplicates, in a fixed order.
    pub fn attack_runs(&self) -> Vec<(f64, AblationCell)> {
        let mut runs: Vec<(f64, AblationCell)> = self
            .fractions
            .iter()
            .map(|&f| (f, AblationCell::FULL))
            .collect();
        if let Some(grid) = &self.ablation {
            for &cell in &grid.cells {
                if !runs.iter().any(|&(f, c)| f == grid.fraction && c == cell) {
                    runs.push((grid.fraction, cell));
                }
            }
        }
        runs
    }

    /// Apply `key=value` overrides on the JSON form, e.g. `seeds.attack=7` or `fractions=[0.01,0.7]`.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let value: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .get_mut(part)
                    .ok_or_else(|| Error::contract(format!("unknown config field `{key}`")))?;
            }
            *slot = value;
        }
        let cfg: RunConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn fraction_tag(f: f64) -> String {
    format!("f{:.4}", f).replace('.', "p")
}
