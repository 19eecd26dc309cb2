//! Per-image pixel optimization producing encrypted images that keep the service model's
//! output, look like noise, and decode back to the original through the private key model.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::nn::{self, OptimizerConfig, VarStore};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};
use crate::losses::{AvihComponents, LossWeights, PatchSpec};
use crate::models::{make_unet, KeyModel, ServiceModel, UNet, UNetSpec};
use crate::rng;
use crate::tensor::{to_f64_vec, ImageBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// I.i.d. uniform noise in `[0, 1]`.
    #[default]
    FromNoise,
    FromOriginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncryptionConfig {
    pub steps: usize,
    /// Adam on pixels.
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub patch_spec: PatchSpec,
    pub init_mode: InitMode,
    pub seed: u64,
    /// Images optimized together; each image has its own objective, so this only affects speed.
    pub batch_size: usize,
}

impl Default for EncryptionConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            learning_rate: 0.01,
            weights: LossWeights::default(),
            patch_spec: PatchSpec::square(4),
            init_mode: InitMode::FromNoise,
            seed: 0,
            batch_size: 16,
        }
    }
}

impl EncryptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::contract("encryption needs at least one step"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        self.weights.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Loss components evaluated at one optimization step, before that step's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub task: f64,
    pub difference: f64,
    pub variance_consistency: f64,
    pub recovery: f64,
    pub total: f64,
}

impl StepLosses {
    fn is_finite(&self) -> bool {
        [
            self.task,
            self.difference,
            self.variance_consistency,
            self.recovery,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn mean(rows: &[StepLosses]) -> StepLosses {
        let n = rows.len().max(1) as f64;
        let s = |f: fn(&StepLosses) -> f64| rows.iter().map(f).sum::<f64>() / n;
        StepLosses {
            task: s(|r| r.task),
            difference: s(|r| r.difference),
            variance_consistency: s(|r| r.variance_consistency),
            recovery: s(|r| r.recovery),
            total: s(|r| r.total),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncryptionResult {
    pub x_prime: ImageBatch,
    /// One entry per step (batch mean when several images were encrypted together).
    pub loss_trace: Vec<StepLosses>,
    pub config_hash: String,
    pub key_model_id: String,
    pub service_model_id: String,
    pub seed: u64,
}

/// Starting point of the optimization.
///
/// Noise for an image depends on the seed and that image's content only, so identical images
/// under the same seed start (and end) identically regardless of their batch position.
pub fn init_encrypted_image(x: &ImageBatch, cfg: &EncryptionConfig) -> ImageBatch {
    match cfg.init_mode {
        InitMode::FromOriginal => x.clone(),
        InitMode::FromNoise => {
            let (c, h, w) = x.image_shape();
            let mut values = Vec::with_capacity(x.len() * c * h * w);
            for img in x.split() {
                let mut r = rng::stream(cfg.seed, &format!("encrypt-init:{}", img.digest()));
                values.extend((0..c * h * w).map(|_| r.gen::<f32>()));
            }
            ImageBatch::from_vec(values, [x.len(), c, h, w])
                .expect("noise matches shape")
                .to_kind(x.kind())
        }
    }
}

/// Optimize every row of `x` independently; one result per row.
pub fn encrypt_rows(
    x: &ImageBatch,
    fs: &dyn ServiceModel,
    fk: &dyn KeyModel,
    cfg: &EncryptionConfig,
) -> Result<Vec<EncryptionResult>> {
    cfg.validate()?;
    let b = x.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    let (c, h, w) = x.image_shape();
    if c != 3 {
        return Err(Error::contract(format!(
            "encryption needs 3-channel images, got {c}"
        )));
    }
    cfg.patch_spec.validate_for(h, w)?;

    let target = x.tensor().detach();
    let vs = VarStore::new(Device::Cpu);
    let xp = vs
        .root()
        .var_copy("x_prime", init_encrypted_image(x, cfg).tensor());
    let mut opt = nn::Adam::default().build(&vs, cfg.learning_rate)?;
    let mut traces: Vec<Vec<StepLosses>> = vec![Vec::with_capacity(cfg.steps); b];

    for step in 0..cfg.steps {
        let recovered = fk.forward(&xp)?;
        let comps = AvihComponents::compute(fs, &recovered, &target, &xp, &cfg.patch_spec)?;
        let per_image = comps.objective(&cfg.weights);
        let rows = [
            to_f64_vec(&comps.task),
            to_f64_vec(&comps.difference),
            to_f64_vec(&comps.variance_consistency),
            to_f64_vec(&comps.recovery),
            to_f64_vec(&per_image),
        ];
        for (i, trace) in traces.iter_mut().enumerate() {
            let s = StepLosses {
                task: rows[0][i],
                difference: rows[1][i],
                variance_consistency: rows[2][i],
                recovery: rows[3][i],
                total: rows[4][i],
            };
            if !s.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    components: format!("image {i}: {s:?}"),
                });
            }
            trace.push(s);
        }
        // Sum, not mean: every image keeps its own gradient scale.
        opt.zero_grad();
        per_image.sum(per_image.kind()).backward();
        opt.step();
        tch::no_grad(|| {
            let mut p = xp.shallow_clone();
            let _ = p.clamp_(0.0, 1.0);
        });
    }

    let final_x = ImageBatch::new(xp.detach().copy())?;
    let hash = cfg.digest();
    Ok(traces
        .into_iter()
        .enumerate()
        .map(|(i, loss_trace)| EncryptionResult {
            x_prime: final_x.image(i),
            loss_trace,
            config_hash: hash.clone(),
            key_model_id: fk.id().to_string(),
            service_model_id: fs.id().to_string(),
            seed: cfg.seed,
        })
        .collect())
}

/// Encrypt a batch; the trace is the per-step batch mean.
pub fn encrypt_image(
    x: &ImageBatch,
    fs: &dyn ServiceModel,
    fk: &dyn KeyModel,
    cfg: &EncryptionConfig,
) -> Result<EncryptionResult> {
    if x.is_empty() {
        return Err(Error::contract("cannot encrypt an empty batch"));
    }
    let mut rows = encrypt_rows(x, fs, fk, cfg)?;
    if rows.len() == 1 {
        return Ok(rows.pop().expect("one row"));
    }
    let x_prime = ImageBatch::concat(&rows.iter().map(|r| r.x_prime.clone()).collect::<Vec<_>>())?;
    let loss_trace = (0..cfg.steps)
        .map(|t| StepLosses::mean(&rows.iter().map(|r| r.loss_trace[t]).collect::<Vec<_>>()))
        .collect();
    let first = rows.swap_remove(0);
    Ok(EncryptionResult {
        x_prime,
        loss_trace,
        ..first
    })
}

/// Encrypt every image of the gallery. Results are order-aligned; a failing image does not
/// affect the others.
pub fn encrypt_gallery(
    gallery: &ImageBatch,
    fs: &dyn ServiceModel,
    fk: &dyn KeyModel,
    cfg: &EncryptionConfig,
) -> Vec<Result<EncryptionResult>> {
    if let Err(e) = cfg.validate() {
        return (0..gallery.len())
            .map(|_| Err(Error::contract(e.to_string())))
            .collect();
    }
    let n = gallery.len();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + cfg.batch_size).min(n)).collect();
        let chunk = gallery.select(&idx);
        match encrypt_rows(&chunk, fs, fk, cfg) {
            Ok(rows) => out.extend(rows.into_iter().map(Ok)),
            Err(e) if idx.len() == 1 => out.push(Err(e)),
            Err(e) => {
                log::warn!(
                    "chunk {start}..{} failed ({e}); retrying images one by one",
                    start + idx.len()
                );
                for &i in &idx {
                    out.push(encrypt_rows(&gallery.image(i), fs, fk, cfg).map(|mut r| r.remove(0)));
                }
            }
        }
        log::debug!("encrypted {}/{n}", out.len());
        start += idx.len();
    }
    out
}

/// Decode with a key model: `clamp(f_k(x'), 0, 1)`.
pub fn recover(fk: &dyn KeyModel, x_prime: &ImageBatch) -> Result<ImageBatch> {
    let out = tch::no_grad(|| fk.forward(x_prime.tensor()))?;
    if out.size() != x_prime.tensor().size() {
        return Err(Error::ShapeMismatch {
            expected: x_prime.tensor().size(),
            actual: out.size(),
        });
    }
    ImageBatch::new(out.clamp(0.0, 1.0).to_kind(Kind::Float))
}

/// Mean cosine between service embeddings of paired rows.
pub fn mean_feature_cosine(fs: &dyn ServiceModel, a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    let ea = crate::models::embed(fs, a)?.data;
    let eb = crate::models::embed(fs, b)?.data;
    let cos = Tensor::cosine_similarity(&ea, &eb, 1, 1e-8);
    Ok(cos.mean(Kind::Double).double_value(&[]))
}

/// Preparation of a private key model before any gallery image is encrypted.
///
/// The key starts from seeded random weights and is fitted jointly with throwaway encrypted
/// codes of the owner's private images (same objective as encryption, key weights and pixels
/// updated together). The result is frozen; encryption itself never touches it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyTrainingConfig {
    pub rounds: usize,
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub key_learning_rate: f64,
    pub seed: u64,
}

impl Default for KeyTrainingConfig {
    fn default() -> Self {
        Self {
            rounds: 12,
            steps_per_round: 100,
            batch_size: 8,
            key_learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyTrainingSummary {
    /// Batch-mean recovery loss at the end of each round.
    pub final_recovery: Vec<f64>,
    pub key_model_id: String,
}

/// Build the key U-Net from `(spec, cfg.seed)` and fit it on `private` images.
/// `rounds = 0` returns the untrained random network.
pub fn train_key_model(
    spec: UNetSpec,
    private: &ImageBatch,
    fs: &dyn ServiceModel,
    enc: &EncryptionConfig,
    cfg: &KeyTrainingConfig,
) -> Result<(UNet, KeyTrainingSummary)> {
    enc.validate()?;
    let key = make_unet(spec, cfg.seed)?;
    if cfg.rounds > 0 && (private.is_empty() || cfg.steps_per_round == 0 || cfg.batch_size == 0) {
        return Err(Error::contract(
            "key training needs private images, steps and a batch size",
        ));
    }
    let (_, h, w) = private.image_shape();
    enc.patch_spec.validate_for(h, w)?;
    let mut key_opt = nn::Adam::default().build(key.var_store(), cfg.key_learning_rate)?;
    let mut order: Vec<usize> = Vec::new();
    let mut r = rng::stream(cfg.seed, "key-training-batches");
    let mut final_recovery = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(private.len()) {
            if order.is_empty() {
                order = (0..private.len()).collect();
                order.shuffle(&mut r);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let x = private.select(&idx);
        let init_cfg = EncryptionConfig {
            seed: rng::derive_seed(cfg.seed, &format!("key-round:{round}")),
            ..enc.clone()
        };
        let vs = VarStore::new(Device::Cpu);
        let xp = vs
            .root()
            .var_copy("x_prime", init_encrypted_image(&x, &init_cfg).tensor());
        let mut opt = nn::Adam::default().build(&vs, enc.learning_rate)?;
        let mut last = f64::NAN;
        for step in 0..cfg.steps_per_round {
            let rec = key.forward(&xp)?;
            let comps = AvihComponents::compute(fs, &rec, x.tensor(), &xp, &enc.patch_spec)?;
            let loss = comps.objective(&enc.weights).sum(Kind::Float);
            let v = loss.double_value(&[]);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    components: format!("key training round {round}: total={v}"),
                });
            }
            last = comps.recovery.mean(Kind::Double).double_value(&[]);
            opt.zero_grad();
            key_opt.zero_grad();
            loss.backward();
            opt.step();
            key_opt.step();
            tch::no_grad(|| {
                let mut p = xp.shallow_clone();
                let _ = p.clamp_(0.0, 1.0);
            });
        }
        log::debug!("key training round {round}: recovery {last:.4}");
        final_recovery.push(last);
    }
    let key = key.freeze();
    let key_model_id = key.id().to_string();
    Ok((
        key,
        KeyTrainingSummary {
            final_recovery,
            key_model_id,
        },
    ))
}
