use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::nn::{self, Module, VarStore};
use tch::{Device, Tensor};

use super::{ensure_float_image, lrelu, seeded_init, varstore_digest};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[DISC_EPS, 1 - DISC_EPS]` so every log stays finite.
pub const DISC_EPS: f64 = 1e-6;

const KERNEL: i64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchDiscriminatorSpec {
    /// Number of stride-2 convolution blocks before the 1-channel head.
    pub layers: usize,
    pub base_channels: usize,
    pub in_channels: usize,
}

impl Default for PatchDiscriminatorSpec {
    fn default() -> Self {
        Self {
            layers: 3,
            base_channels: 32,
            in_channels: 3,
        }
    }
}

impl PatchDiscriminatorSpec {
    /// Side length of the input region seen by one output cell.
    pub fn receptive_field(&self) -> usize {
        // head: k=4, s=1; each block: k=4, s=2. Walk back from one output cell.
        let mut r = KERNEL;
        for _ in 0..self.layers {
            r = 2 * r + (KERNEL - 2);
        }
        r as usize
    }

    /// Output map side for an input side, or `None` when the input is too small.
    pub fn output_side(&self, input: usize) -> Option<usize> {
        let mut s = input as i64;
        for _ in 0..self.layers {
            s = (s + 2 - KERNEL).div_euclid(2) + 1;
            if s < 1 {
                return None;
            }
        }
        let out = s + 2 - KERNEL + 1;
        (out >= 1).then_some(out as usize)
    }
}

/// PatchGAN critic: one probability per receptive-field patch.
///
/// The head is activated by `tanh` and mapped to `(t + 1) / 2`, then clamped to
/// `[DISC_EPS, 1 - DISC_EPS]`.
#[derive(Debug)]
pub struct PatchDiscriminator {
    vs: VarStore,
    spec: PatchDiscriminatorSpec,
    blocks: Vec<nn::Conv2D>,
    head: nn::Conv2D,
}

pub fn make_patch_discriminator(
    spec: PatchDiscriminatorSpec,
    seed: u64,
) -> Result<PatchDiscriminator> {
    if spec.layers == 0 || spec.base_channels == 0 {
        return Err(Error::contract(format!(
            "invalid discriminator spec {spec:?}"
        )));
    }
    let vs = VarStore::new(Device::Cpu);
    let root = vs.root();
    let cfg = nn::ConvConfig {
        stride: 2,
        padding: 1,
        ..Default::default()
    };
    let mut blocks = Vec::with_capacity(spec.layers);
    let mut cin = spec.in_channels as i64;
    for i in 0..spec.layers {
        let cout = (spec.base_channels << i) as i64;
        blocks.push(nn::conv2d(
            &root / format!("block{i}"),
            cin,
            cout,
            KERNEL,
            cfg,
        ));
        cin = cout;
    }
    let head = nn::conv2d(
        &root / "head",
        cin,
        1,
        KERNEL,
        nn::ConvConfig {
            padding: 1,
            ..Default::default()
        },
    );
    seeded_init(&vs, seed);
    Ok(PatchDiscriminator {
        vs,
        spec,
        blocks,
        head,
    })
}

impl PatchDiscriminator {
    pub fn spec(&self) -> &PatchDiscriminatorSpec {
        &self.spec
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    pub fn weight_digest(&self) -> String {
        varstore_digest(&self.vs)
    }

    /// Raw `tanh` output before the probability mapping, `B×1×k×k`.
    pub fn forward_tanh(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = ensure_float_image(x, self.spec.in_channels as i64)?;
        if self.spec.output_side(h as usize).is_none()
            || self.spec.output_side(w as usize).is_none()
        {
            return Err(Error::contract(format!(
                "input {h}×{w} too small for a {}-block patch discriminator",
                self.spec.layers
            )));
        }
        let mut z = x.to_kind(self.vs.kind());
        for b in &self.blocks {
            z = lrelu(&b.forward(&z));
        }
        Ok(self.head.forward(&z).tanh())
    }

    /// Probability map in `[DISC_EPS, 1 - DISC_EPS]`, shape `B×1×k×k`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(((self.forward_tanh(x)? + 1.0) * 0.5).clamp(DISC_EPS, 1.0 - DISC_EPS))
    }

    /// Overwrite every parameter with `value`.
    pub fn fill_parameters(&mut self, value: f64) {
        tch::no_grad(|| {
            for (_, mut t) in self.vs.variables() {
                let _ = t.fill_(value);
            }
        });
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::save_varstore(&self.vs, path)
    }
}
