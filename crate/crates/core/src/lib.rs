//! Adversarial visual information hiding (AVIH) and a reconstruction attack against it.
//!
//! The crate is organised the way the experiment flows:
//!
//! * [`losses`]: every loss term used by the encryptor and by the attacker.
//! * [`models`]: U-Net key models, the patch discriminator and the embedding service model.
//! * [`encryptor`]: per-image pixel optimization producing encrypted gallery images.
//! * [`attack`]: surrogate key training with augmented identity loss and a patch-level GAN.
//! * [`metrics`]: reconstruction quality and recognition accuracy.
//! * [`harness`]: datasets, manifests, the staged pipeline and report emission.

pub mod attack;
pub mod augment;
pub mod encryptor;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::ImageBatch;
