use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::nn::{self, Module, VarStore};
use tch::{Device, Tensor};

use super::{ensure_float_image, groups_for, lrelu, seeded_init, varstore_digest, KeyModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    /// Number of 2× downsamplings; inputs must be divisible by `2^depth`.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub skip_connections: bool,
    /// GroupNorm after each convolution.
    pub group_norm: bool,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            in_channels: 3,
            out_channels: 3,
            skip_connections: true,
            group_norm: true,
        }
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.base_channels == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::contract(format!("invalid U-Net spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct DoubleConv {
    c1: nn::Conv2D,
    n1: Option<nn::GroupNorm>,
    c2: nn::Conv2D,
    n2: Option<nn::GroupNorm>,
}

impl DoubleConv {
    fn new(p: nn::Path, cin: i64, cout: i64, norm: bool) -> Self {
        let cfg = nn::ConvConfig {
            padding: 1,
            ..Default::default()
        };
        let g = groups_for(cout);
        Self {
            c1: nn::conv2d(&p / "conv1", cin, cout, 3, cfg),
            n1: norm.then(|| nn::group_norm(&p / "norm1", g, cout, Default::default())),
            c2: nn::conv2d(&p / "conv2", cout, cout, 3, cfg),
            n2: norm.then(|| nn::group_norm(&p / "norm2", g, cout, Default::default())),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = self.c1.forward(x);
        if let Some(n) = &self.n1 {
            h = n.forward(&h);
        }
        h = lrelu(&h);
        h = self.c2.forward(&h);
        if let Some(n) = &self.n2 {
            h = n.forward(&h);
        }
        lrelu(&h)
    }
}

/// Encoder/decoder with skip connections. Used for both the private key and the surrogate.
#[derive(Debug)]
pub struct UNet {
    vs: VarStore,
    spec: UNetSpec,
    seed: u64,
    id: String,
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<(nn::ConvTranspose2D, DoubleConv)>,
    head: nn::Conv2D,
}

/// Build a U-Net whose weights are a pure function of `(spec, seed)`.
pub fn make_unet(spec: UNetSpec, seed: u64) -> Result<UNet> {
    spec.validate()?;
    let vs = VarStore::new(Device::Cpu);
    let root = vs.root();
    let ch = |level: usize| (spec.base_channels << level) as i64;
    let mut down = Vec::with_capacity(spec.depth);
    let mut cin = spec.in_channels as i64;
    for level in 0..spec.depth {
        down.push(DoubleConv::new(
            &root / format!("down{level}"),
            cin,
            ch(level),
            spec.group_norm,
        ));
        cin = ch(level);
    }
    let bottleneck = DoubleConv::new(&root / "bottleneck", cin, ch(spec.depth), spec.group_norm);
    let mut up = Vec::with_capacity(spec.depth);
    for level in (0..spec.depth).rev() {
        let tcfg = nn::ConvTransposeConfig {
            stride: 2,
            ..Default::default()
        };
        let upconv = nn::conv_transpose2d(
            &root / format!("upconv{level}"),
            ch(level + 1),
            ch(level),
            2,
            tcfg,
        );
        let merged = if spec.skip_connections {
            2 * ch(level)
        } else {
            ch(level)
        };
        let block = DoubleConv::new(
            &root / format!("up{level}"),
            merged,
            ch(level),
            spec.group_norm,
        );
        up.push((upconv, block));
    }
    let head = nn::conv2d(
        &root / "head",
        ch(0),
        spec.out_channels as i64,
        1,
        Default::default(),
    );
    seeded_init(&vs, seed);
    let id = format!("unet-{}", &varstore_digest(&vs)[..12]);
    Ok(UNet {
        vs,
        spec,
        seed,
        id,
        down,
        bottleneck,
        up,
        head,
    })
}

impl UNet {
    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    /// Stop gradients into the weights (the model stays usable as a differentiable map).
    pub fn freeze(mut self) -> Self {
        self.vs.freeze();
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::save_varstore(&self.vs, path)
    }

    /// Rebuild from spec and overwrite the weights from a checkpoint.
    pub fn load(spec: UNetSpec, path: &Path) -> Result<UNet> {
        let mut net = make_unet(spec, 0)?;
        super::load_varstore(&mut net.vs, path)?;
        net.id = format!("unet-{}", &varstore_digest(&net.vs)[..12]);
        Ok(net)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, _, h, w) = ensure_float_image(x, self.spec.in_channels as i64)?;
        let m = 1i64 << self.spec.depth;
        if h % m != 0 || w % m != 0 {
            return Err(Error::contract(format!(
                "U-Net of depth {} needs H and W divisible by {m}, got {h}×{w}",
                self.spec.depth
            )));
        }
        Ok(())
    }
}

impl KeyModel for UNet {
    fn id(&self) -> &str {
        &self.id
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let x = x.to_kind(self.vs.kind());
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut h = x;
        for block in &self.down {
            let s = block.forward(&h);
            h = s.max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], false);
            skips.push(s);
        }
        h = self.bottleneck.forward(&h);
        for (upconv, block) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let u = upconv.forward(&h);
            h = if self.spec.skip_connections {
                block.forward(&Tensor::cat(&[&u, &skip], 1))
            } else {
                block.forward(&u)
            };
        }
        Ok(self.head.forward(&h))
    }

    fn weight_digest(&self) -> String {
        varstore_digest(&self.vs)
    }
}
