//! Closed-form service models for tests, oracles and smoke runs.

use tch::{Device, Kind, Tensor};

use super::ServiceModel;
use crate::error::{Error, Result};
use crate::rng;

/// `D = 1`: the mean over every pixel and channel.
#[derive(Debug, Default)]
pub struct MeanPoolService;

impl ServiceModel for MeanPoolService {
    fn id(&self) -> &str {
        "mean-pool"
    }

    fn embedding_dim(&self) -> usize {
        1
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::ensure_rank4(x)?;
        Ok(x.flatten(1, -1)
            .mean_dim([1i64].as_slice(), true, None::<Kind>))
    }
}

/// `f(x) = W · vec(x)` with a seeded Gaussian `W` of shape `D × (C·H·W)`.
#[derive(Debug)]
pub struct LinearService {
    weight: Tensor,
    input: [usize; 3],
    id: String,
}

impl LinearService {
    pub fn new(input: [usize; 3], dim: usize, seed: u64, kind: Kind) -> Self {
        use rand::Rng;
        let n = input.iter().product::<usize>();
        let mut r = rng::stream(seed, "linear-service");
        let scale = 1.0 / (n as f64).sqrt();
        let values: Vec<f64> = (0..dim * n)
            .map(|_| r.sample::<f64, _>(rand_distr::StandardNormal) * scale)
            .collect();
        let weight = Tensor::from_slice(&values)
            .reshape([dim as i64, n as i64])
            .to_kind(kind)
            .to_device(Device::Cpu);
        Self {
            weight,
            input,
            id: format!("linear-{dim}-{seed}"),
        }
    }

    /// Row-major `D × (C·H·W)` weights, for independent oracles.
    pub fn weights(&self) -> Vec<f64> {
        crate::tensor::to_f64_vec(&self.weight)
    }
}

impl ServiceModel for LinearService {
    fn id(&self) -> &str {
        &self.id
    }

    fn embedding_dim(&self) -> usize {
        self.weight.size()[0] as usize
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = crate::tensor::ensure_rank4(x)?;
        if [c as usize, h as usize, w as usize] != self.input {
            return Err(Error::ShapeMismatch {
                expected: self.input.iter().map(|&d| d as i64).collect(),
                actual: vec![c, h, w],
            });
        }
        Ok(x.flatten(1, -1)
            .to_kind(self.weight.kind())
            .matmul(&self.weight.tr()))
    }
}

/// Per-channel global average followed by a seeded linear map: invariant to horizontal flips
/// and to any spatial permutation.
#[derive(Debug)]
pub struct ChannelMeanService {
    weight: Tensor,
}

impl ChannelMeanService {
    pub fn new(dim: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut r = rng::stream(seed, "channel-mean-service");
        let values: Vec<f64> = (0..dim * 3)
            .map(|_| r.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self {
            weight: Tensor::from_slice(&values)
                .reshape([dim as i64, 3])
                .to_kind(Kind::Double),
        }
    }
}

impl ServiceModel for ChannelMeanService {
    fn id(&self) -> &str {
        "channel-mean"
    }

    fn embedding_dim(&self) -> usize {
        self.weight.size()[0] as usize
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::ensure_rank4(x)?;
        let m = x
            .to_kind(Kind::Double)
            .mean_dim([2i64, 3].as_slice(), false, None::<Kind>);
        Ok(m.matmul(&self.weight.tr()).to_kind(x.kind()))
    }
}
