//! Desk-scale networks: U-Net key models, the patch discriminator and the embedding
//! service model, plus the traits the rest of the crate programs against.

use std::path::Path;

use sha2::{Digest, Sha256};
use tch::nn::VarStore;
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::to_f32_vec;

mod discriminator;
mod service;
pub mod toy;
mod unet;

pub use discriminator::{
    make_patch_discriminator, PatchDiscriminator, PatchDiscriminatorSpec, DISC_EPS,
};
pub use service::{
    embed, rank1_identification, train_service_model, EmbeddingNet, Embeddings, ServiceModelSpec,
    ServiceTrainConfig, ServiceTrainSummary,
};
pub use unet::{make_unet, UNet, UNetSpec};

/// The white-box recognition network `f_s`: images to embeddings, differentiable w.r.t. input.
pub trait ServiceModel {
    fn id(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    /// `B×C×H×W → B×D`. Gradients flow to the input when it requires grad.
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
}

/// An image-to-image network: the private key `f_k` or the attacker's surrogate.
pub trait KeyModel {
    fn id(&self) -> &str;
    /// Output has the input's shape; range is unconstrained.
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    fn weight_digest(&self) -> String;
}

/// Models exposing intermediate activations for the perceptual distance.
pub trait FeatureModel {
    fn id(&self) -> &str;
    fn layer_features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// The identity map as a key model. Useful as a degenerate key and in tests.
#[derive(Debug, Clone, Default)]
pub struct IdentityKey;

impl KeyModel for IdentityKey {
    fn id(&self) -> &str {
        "identity"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.shallow_clone())
    }

    fn weight_digest(&self) -> String {
        hex::encode(Sha256::digest(b"identity"))
    }
}

/// Re-initialise every variable of `vs` from a seeded stream.
///
/// Convolution and linear weights get Kaiming-uniform values for leaky-ReLU(0.2); biases are
/// zero; normalization scales are one. The result depends only on `seed` and the variable
/// names and shapes, never on libtorch's global generator.
pub(crate) fn seeded_init(vs: &VarStore, seed: u64) {
    use rand::Rng;
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    let gain = (2.0f64 / (1.0 + 0.2 * 0.2)).sqrt();
    tch::no_grad(|| {
        for (name, mut t) in vars {
            let size = t.size();
            let n: i64 = size.iter().product();
            let is_norm = name.contains("norm");
            let values: Vec<f32> = if name.ends_with("bias") {
                vec![0.0; n as usize]
            } else if is_norm {
                vec![1.0; n as usize]
            } else {
                let fan_in: i64 = if size.len() >= 2 {
                    size[1..].iter().product()
                } else {
                    size[0]
                };
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                let mut r = rng::stream(seed, &name);
                (0..n).map(|_| r.gen_range(-bound..bound) as f32).collect()
            };
            let src = Tensor::from_slice(&values).reshape(&size).to_kind(t.kind());
            t.copy_(&src);
        }
    });
}

/// SHA-256 over sorted variable names and their `f32` values.
pub fn varstore_digest(vs: &VarStore) -> String {
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    for (name, t) in vars {
        h.update(name.as_bytes());
        for v in to_f32_vec(&t) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub(crate) fn save_varstore(vs: &VarStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    vs.save(path)?;
    Ok(())
}

pub(crate) fn load_varstore(vs: &mut VarStore, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint missing"),
        ));
    }
    vs.load(path)?;
    Ok(())
}

/// Leaky ReLU with slope 0.2.
pub(crate) fn lrelu(x: &Tensor) -> Tensor {
    x.maximum(&(x * 0.2))
}

/// Group count for GroupNorm: the largest of {8, 4, 2, 1} dividing `channels`.
pub(crate) fn groups_for(channels: i64) -> i64 {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

pub(crate) fn ensure_float_image(x: &Tensor, channels: i64) -> Result<(i64, i64, i64, i64)> {
    let dims = crate::tensor::ensure_rank4(x)?;
    if dims.1 != channels {
        return Err(Error::ShapeMismatch {
            expected: vec![dims.0, channels, dims.2, dims.3],
            actual: x.size(),
        });
    }
    if !matches!(x.kind(), Kind::Float | Kind::Double) {
        return Err(Error::contract(format!(
            "model input must be floating point, got {:?}",
            x.kind()
        )));
    }
    Ok(dims)
}
