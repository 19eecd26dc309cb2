//! Surrogate key-model attack: trains `a_k` on encrypted images only, using (augmented)
//! identity loss through the white-box service model and an optional patch-level adversarial
//! game against auxiliary natural images.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::nn::{self, OptimizerConfig};
use tch::Tensor;

use crate::augment::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::losses::{
    attacker_generator_loss, augmented_identity_loss_with_targets, discriminator_loss,
    identity_loss_with_targets, GanConvention, IdentityDistance,
};
use crate::models::{
    make_patch_discriminator, make_unet, KeyModel, PatchDiscriminator, PatchDiscriminatorSpec,
    ServiceModel, UNet, UNetSpec,
};
use crate::rng;
use crate::tensor::ImageBatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

impl AdamSettings {
    fn build(&self, vs: &nn::VarStore) -> Result<nn::Optimizer> {
        let cfg = nn::Adam {
            beta1: self.beta1,
            beta2: self.beta2,
            ..Default::default()
        };
        Ok(cfg.build(vs, self.learning_rate)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub identity_weight: f64,
    pub generator_optimizer: AdamSettings,
    pub discriminator_optimizer: AdamSettings,
    pub augmentation: AugmentationPolicy,
    pub gan_convention: GanConvention,
    /// Adversarial term and discriminator updates.
    pub use_gan: bool,
    /// Random flip/pad/crop on the reconstruction branch of the identity loss.
    pub use_augmentation: bool,
    pub identity_distance: IdentityDistance,
    pub unet: UNetSpec,
    pub discriminator: PatchDiscriminatorSpec,
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 1600,
            batch_size: 32,
            identity_weight: 30.0,
            generator_optimizer: AdamSettings::default(),
            discriminator_optimizer: AdamSettings::default(),
            augmentation: AugmentationPolicy::default(),
            gan_convention: GanConvention::Standard,
            use_gan: true,
            use_augmentation: true,
            identity_distance: IdentityDistance::L2,
            unet: UNetSpec::default(),
            discriminator: PatchDiscriminatorSpec::default(),
            snapshot_every: 100,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::contract(
                "attack needs steps >= 1 and batch_size >= 1",
            ));
        }
        if !(self.identity_weight.is_finite() && self.identity_weight >= 0.0) {
            return Err(Error::contract(format!(
                "identity weight must be nonnegative, got {}",
                self.identity_weight
            )));
        }
        for o in [&self.generator_optimizer, &self.discriminator_optimizer] {
            if !(o.learning_rate > 0.0
                && (0.0..1.0).contains(&o.beta1)
                && (0.0..1.0).contains(&o.beta2))
            {
                return Err(Error::contract(format!("invalid optimizer settings {o:?}")));
            }
        }
        self.augmentation.validate()?;
        self.unet.validate()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }
}

/// Indices into the encrypted gallery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyShareSplit {
    /// Images the attacker trains on (sharing the key with the evaluation pool).
    pub train: Vec<usize>,
    /// Held-out pool used for evaluation; identical for every fraction under one seed.
    pub eval: Vec<usize>,
    /// Full training pool from which `train` is drawn.
    pub train_pool: Vec<usize>,
}

/// Seeded half/half split of `gallery_size` images into a training pool and a held-out pool,
/// then the first `round(fraction × |pool|)` images of a seeded order of the training pool.
/// Smaller fractions yield prefixes of larger ones.
pub fn split_key_share(gallery_size: usize, fraction: f64, seed: u64) -> Result<KeyShareSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..gallery_size).collect();
    order.shuffle(&mut rng::stream(seed, "key-share-pools"));
    let pool_size = gallery_size - gallery_size / 2;
    let mut train_pool = order[..pool_size].to_vec();
    let mut eval = order[pool_size..].to_vec();
    let n = (fraction * pool_size as f64).round() as usize;
    if n == 0 {
        return Err(Error::contract(format!(
            "fraction {fraction} of a pool of {pool_size} selects no images"
        )));
    }
    let mut train = train_pool.clone();
    train.shuffle(&mut rng::stream(seed, "key-share-order"));
    train.truncate(n);
    train_pool.sort_unstable();
    eval.sort_unstable();
    Ok(KeyShareSplit {
        train,
        eval,
        train_pool,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackStepLog {
    pub step: usize,
    pub generator: f64,
    /// Absent when the adversarial game is disabled.
    pub discriminator: Option<f64>,
    pub identity: f64,
}

/// Window means of the log, one per `snapshot_every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSnapshot {
    pub step: usize,
    pub generator: f64,
    pub discriminator: Option<f64>,
    pub identity: f64,
}

pub struct AttackRun {
    pub attacker: UNet,
    pub discriminator: Option<PatchDiscriminator>,
    pub log: Vec<AttackStepLog>,
    pub snapshots: Vec<AttackSnapshot>,
    pub key_share_fraction: f64,
    pub train_size: usize,
    pub config_hash: String,
}

impl std::fmt::Debug for AttackRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttackRun")
            .field("attacker", &self.attacker.id())
            .field("steps", &self.log.len())
            .field("key_share_fraction", &self.key_share_fraction)
            .field("train_size", &self.train_size)
            .finish()
    }
}

fn sample_rows(r: &mut rng::Rng, n: usize, k: usize) -> Tensor {
    Tensor::from_slice(&(0..k).map(|_| r.gen_range(0..n) as i64).collect::<Vec<_>>())
}

fn finite(step: usize, parts: &[(&str, f64)]) -> Result<()> {
    if parts.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFinite {
        step,
        components: parts
            .iter()
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join(", "),
    })
}

/// Train a surrogate key model from encrypted images, the white-box service model and
/// auxiliary natural images. Neither the true key model nor any original gallery image is
/// an input.
pub fn train_attacker(
    train_subset: &ImageBatch,
    fs: &dyn ServiceModel,
    aux: &ImageBatch,
    key_share_fraction: f64,
    cfg: &AttackConfig,
) -> Result<AttackRun> {
    cfg.validate()?;
    if train_subset.is_empty() {
        return Err(Error::contract(
            "attack needs at least one encrypted training image",
        ));
    }
    if cfg.use_gan && aux.is_empty() {
        return Err(Error::contract(
            "the adversarial game needs a non-empty auxiliary set",
        ));
    }
    if cfg.use_gan && aux.image_shape() != train_subset.image_shape() {
        return Err(Error::contract(
            "auxiliary images must match the encrypted image shape",
        ));
    }

    let mut attacker = make_unet(cfg.unet, rng::derive_seed(cfg.seed, "attacker-unet"))?;
    let mut g_opt = cfg.generator_optimizer.build(attacker.var_store())?;
    let disc = if cfg.use_gan {
        Some(make_patch_discriminator(
            cfg.discriminator,
            rng::derive_seed(cfg.seed, "attacker-discriminator"),
        )?)
    } else {
        None
    };
    let mut d_opt = match &disc {
        Some(d) => Some(cfg.discriminator_optimizer.build(d.var_store())?),
        None => None,
    };

    let encrypted = train_subset.tensor().detach();
    let targets = tch::no_grad(|| fs.forward(&encrypted))?;
    let mut batch_rng = rng::stream(cfg.seed, "attack-batches");
    let mut aux_rng = rng::stream(cfg.seed, "attack-aux");
    let mut aug_rng = rng::stream(cfg.seed, "attack-augment");
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let rows = sample_rows(&mut batch_rng, train_subset.len(), cfg.batch_size);
        let xb = encrypted.index_select(0, &rows);
        let tb = targets.index_select(0, &rows);

        let mut d_value = None;
        if let (Some(d), Some(opt)) = (&disc, d_opt.as_mut()) {
            let real = aux
                .tensor()
                .index_select(0, &sample_rows(&mut aux_rng, aux.len(), cfg.batch_size));
            let fake = tch::no_grad(|| attacker.forward(&xb))?;
            let loss =
                discriminator_loss(&d.forward(&fake)?, &d.forward(&real)?, cfg.gan_convention)?;
            d_value = Some(loss.double_value(&[]));
            opt.zero_grad();
            loss.backward();
            opt.step();
        }

        let rec = attacker.forward(&xb)?;
        let id_loss = if cfg.use_augmentation {
            augmented_identity_loss_with_targets(
                fs,
                &rec,
                &tb,
                &cfg.augmentation,
                &mut aug_rng,
                cfg.identity_distance,
            )?
        } else {
            identity_loss_with_targets(fs, &rec, &tb, cfg.identity_distance)?
        };
        let g_loss = match &disc {
            Some(d) => attacker_generator_loss(
                &d.forward(&rec)?,
                &id_loss,
                cfg.identity_weight,
                cfg.gan_convention,
            )?,
            None => &id_loss * cfg.identity_weight,
        };
        let entry = AttackStepLog {
            step,
            generator: g_loss.double_value(&[]),
            discriminator: d_value,
            identity: id_loss.double_value(&[]),
        };
        finite(
            step,
            &[
                ("generator", entry.generator),
                ("discriminator", d_value.unwrap_or(0.0)),
                ("identity", entry.identity),
            ],
        )?;
        g_opt.zero_grad();
        g_loss.backward();
        g_opt.step();
        log.push(entry);
        if step % 100 == 0 {
            log::debug!(
                "attack step {step}: gen {:.4} id {:.4} disc {:?}",
                entry.generator,
                entry.identity,
                d_value
            );
        }
    }

    attacker = attacker.freeze();
    let snapshots = snapshots(&log, cfg.snapshot_every.max(1));
    Ok(AttackRun {
        attacker,
        discriminator: disc,
        log,
        snapshots,
        key_share_fraction,
        train_size: train_subset.len(),
        config_hash: cfg.digest(),
    })
}

fn snapshots(log: &[AttackStepLog], every: usize) -> Vec<AttackSnapshot> {
    log.chunks(every)
        .map(|w| {
            let n = w.len() as f64;
            let d: Vec<f64> = w.iter().filter_map(|e| e.discriminator).collect();
            AttackSnapshot {
                step: w.last().map_or(0, |e| e.step + 1),
                generator: w.iter().map(|e| e.generator).sum::<f64>() / n,
                discriminator: (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64),
                identity: w.iter().map(|e| e.identity).sum::<f64>() / n,
            }
        })
        .collect()
}

/// `clamp(a_k(x'), 0, 1)`, evaluated in chunks without gradients.
pub fn reconstruct(attacker: &dyn KeyModel, encrypted: &ImageBatch) -> Result<ImageBatch> {
    let parts = encrypted
        .split_chunks(64)
        .iter()
        .map(|c| crate::encryptor::recover(attacker, c))
        .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Ok(encrypted.clone());
    }
    ImageBatch::concat(&parts)
}

/// Mean augmented identity loss of the first and last `window` steps.
pub fn identity_trend(log: &[AttackStepLog], window: usize) -> (f64, f64) {
    let w = window.clamp(1, log.len().max(1));
    let mean =
        |s: &[AttackStepLog]| s.iter().map(|e| e.identity).sum::<f64>() / s.len().max(1) as f64;
    (
        mean(&log[..w.min(log.len())]),
        mean(&log[log.len().saturating_sub(w)..]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::toy::ChannelMeanService;
    use crate::models::IdentityKey;
    use tch::{Device, Kind};

    fn tiny_cfg() -> AttackConfig {
        AttackConfig {
            steps: 3,
            batch_size: 4,
            unet: UNetSpec {
                depth: 1,
                base_channels: 4,
                ..Default::default()
            },
            discriminator: PatchDiscriminatorSpec {
                layers: 2,
                base_channels: 4,
                in_channels: 3,
            },
            ..Default::default()
        }
    }

    fn images(n: i64, seed: i64) -> ImageBatch {
        tch::manual_seed(seed);
        ImageBatch::new(Tensor::rand([n, 3, 16, 16], (Kind::Float, Device::Cpu))).unwrap()
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let s = split_key_share(200, 0.03, 1).unwrap();
        assert_eq!(s.train.len(), 3);
        assert_eq!(s.eval.len(), 100);
        assert!(s.train.iter().all(|i| !s.eval.contains(i)));
        assert_eq!(s, split_key_share(200, 0.03, 1).unwrap());
        let full = split_key_share(200, 1.0, 1).unwrap();
        let mut t = full.train.clone();
        t.sort_unstable();
        assert_eq!(t, full.train_pool);
        assert_eq!(full.eval, s.eval);
        assert!(s.train.iter().all(|i| full.train[..3].contains(i)));
        assert!(matches!(
            split_key_share(200, 0.001, 1),
            Err(Error::Contract(_))
        ));
        assert!(split_key_share(200, 0.0, 1).is_err());
        assert!(split_key_share(200, 1.5, 1).is_err());
    }

    #[test]
    fn one_step_updates_both_players() {
        let fs = ChannelMeanService::new(8, 2);
        let cfg = AttackConfig {
            steps: 1,
            ..tiny_cfg()
        };
        let untouched = make_unet(cfg.unet, rng::derive_seed(cfg.seed, "attacker-unet")).unwrap();
        let d0 = make_patch_discriminator(
            cfg.discriminator,
            rng::derive_seed(cfg.seed, "attacker-discriminator"),
        )
        .unwrap();
        let run = train_attacker(&images(3, 0), &fs, &images(5, 1), 0.5, &cfg).unwrap();
        assert_eq!(run.log.len(), 1);
        assert_ne!(run.attacker.weight_digest(), untouched.weight_digest());
        assert_ne!(
            run.discriminator.as_ref().unwrap().weight_digest(),
            d0.weight_digest()
        );
    }

    #[test]
    fn cold_start_generator_loss_is_near_log_half() {
        let fs = ChannelMeanService::new(8, 2);
        for conv in [GanConvention::Standard, GanConvention::Printed] {
            let cfg = AttackConfig {
                steps: 5,
                identity_weight: 0.0,
                gan_convention: conv,
                ..tiny_cfg()
            };
            let run = train_attacker(&images(4, 3), &fs, &images(4, 4), 0.5, &cfg).unwrap();
            for e in &run.log {
                let signed = if conv == GanConvention::Printed {
                    e.generator
                } else {
                    -e.generator
                };
                assert!(
                    (signed - 0.5f64.ln()).abs() <= 0.7,
                    "{conv:?}: {}",
                    e.generator
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_ablations_run() {
        let fs = ChannelMeanService::new(8, 2);
        let a = train_attacker(&images(3, 0), &fs, &images(5, 1), 0.5, &tiny_cfg()).unwrap();
        let b = train_attacker(&images(3, 0), &fs, &images(5, 1), 0.5, &tiny_cfg()).unwrap();
        assert_eq!(a.log, b.log);
        let x = images(2, 9);
        assert_eq!(
            reconstruct(&a.attacker, &x).unwrap(),
            reconstruct(&a.attacker, &x).unwrap()
        );
        let plain = AttackConfig {
            use_gan: false,
            use_augmentation: false,
            ..tiny_cfg()
        };
        let r = train_attacker(
            &images(3, 0),
            &fs,
            &ImageBatch::empty(3, 16, 16),
            0.5,
            &plain,
        )
        .unwrap();
        assert!(r.discriminator.is_none() && r.log.iter().all(|e| e.discriminator.is_none()));
    }

    #[test]
    fn contract_errors() {
        let fs = ChannelMeanService::new(8, 2);
        assert!(train_attacker(
            &ImageBatch::empty(3, 16, 16),
            &fs,
            &images(2, 0),
            0.5,
            &tiny_cfg()
        )
        .is_err());
        assert!(train_attacker(
            &images(2, 0),
            &fs,
            &ImageBatch::empty(3, 16, 16),
            0.5,
            &tiny_cfg()
        )
        .is_err());
        let bad = AttackConfig {
            steps: 0,
            ..tiny_cfg()
        };
        assert!(train_attacker(&images(2, 0), &fs, &images(2, 0), 0.5, &bad).is_err());
    }

    #[test]
    fn identity_surrogate_reconstruction_is_clamp() {
        let x = ImageBatch::new(Tensor::rand([3, 3, 8, 8], (Kind::Float, Device::Cpu)) * 1.6 - 0.3)
            .unwrap();
        assert_eq!(reconstruct(&IdentityKey, &x).unwrap(), x.clamp_unit());
    }
}
