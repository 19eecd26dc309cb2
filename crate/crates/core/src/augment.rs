//! Random flip / pad / crop applied to the reconstruction branch of the identity loss.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub horizontal_flip_prob: f64,
    /// Zero padding added on every side before the crop.
    pub pad_pixels: usize,
    /// Crop the padded image back to the input size at a random offset.
    pub crop_to_original: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            pad_pixels: 5,
            crop_to_original: true,
        }
    }
}

impl AugmentationPolicy {
    /// A policy whose every sample is the identity transform.
    pub fn identity() -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            pad_pixels: 0,
            crop_to_original: true,
        }
    }

    pub fn flip_only() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            pad_pixels: 0,
            crop_to_original: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::contract(format!(
                "flip probability {} outside [0, 1]",
                self.horizontal_flip_prob
            )));
        }
        Ok(())
    }
}

/// One sampled transform: optional horizontal flip, zero pad, crop at `crop_offset = (dy, dx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentDescriptor {
    pub flip: bool,
    pub pad: usize,
    pub crop_offset: (usize, usize),
    pub crop_to_original: bool,
}

impl AugmentDescriptor {
    pub fn identity() -> Self {
        Self {
            flip: false,
            pad: 0,
            crop_offset: (0, 0),
            crop_to_original: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip
            && (self.pad == 0
                || (self.crop_to_original && self.crop_offset == (self.pad, self.pad)))
    }

    /// Apply to a `B×C×H×W` tensor (the same transform for every row). Differentiable.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = crate::tensor::ensure_rank4(x)?;
        let mut y = if self.flip {
            x.flip([3])
        } else {
            x.shallow_clone()
        };
        if self.pad > 0 {
            let p = self.pad as i64;
            y = y.constant_pad_nd([p, p, p, p]);
            if self.crop_to_original {
                let (dy, dx) = (self.crop_offset.0 as i64, self.crop_offset.1 as i64);
                if dy > 2 * p || dx > 2 * p {
                    return Err(Error::contract(format!(
                        "crop offset {:?} exceeds padding {p}",
                        self.crop_offset
                    )));
                }
                y = y.narrow(2, dy, h).narrow(3, dx, w);
            }
        }
        Ok(y)
    }
}

pub fn sample_augmentation(policy: &AugmentationPolicy, rng: &mut Rng) -> AugmentDescriptor {
    let flip =
        policy.horizontal_flip_prob > 0.0 && rng.gen_bool(policy.horizontal_flip_prob.min(1.0));
    let pad = policy.pad_pixels;
    let crop_offset = if pad > 0 && policy.crop_to_original {
        (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad))
    } else {
        (pad, pad)
    };
    AugmentDescriptor {
        flip,
        pad,
        crop_offset,
        crop_to_original: policy.crop_to_original,
    }
}

/// Apply an independently sampled transform to each batch row.
pub fn augment_batch(x: &Tensor, policy: &AugmentationPolicy, rng: &mut Rng) -> Result<Tensor> {
    let (b, _, _, _) = crate::tensor::ensure_rank4(x)?;
    let rows = (0..b)
        .map(|i| sample_augmentation(policy, rng).apply(&x.narrow(0, i, 1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&rows, 0))
}
