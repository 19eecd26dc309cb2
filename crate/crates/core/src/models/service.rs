use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tch::nn::{self, Module, OptimizerConfig, VarStore};
use tch::{Device, Kind, Tensor};

use super::{
    ensure_float_image, groups_for, lrelu, seeded_init, varstore_digest, FeatureModel, ServiceModel,
};
use crate::augment::{augment_batch, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::metrics::cmc_and_map;
use crate::rng;
use crate::tensor::{scalar, to_f64_vec, ImageBatch, LabeledImages};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceModelSpec {
    /// Channels of the first stage; doubled at each downsampling.
    pub width: usize,
    /// Number of residual stages (downsampling between consecutive stages).
    pub stages: usize,
    pub embedding_dim: usize,
}

impl Default for ServiceModelSpec {
    fn default() -> Self {
        Self {
            width: 16,
            stages: 3,
            embedding_dim: 128,
        }
    }
}

#[derive(Debug)]
struct ResBlock {
    c1: nn::Conv2D,
    n1: nn::GroupNorm,
    c2: nn::Conv2D,
    n2: nn::GroupNorm,
}

impl ResBlock {
    fn new(p: nn::Path, ch: i64) -> Self {
        let cfg = nn::ConvConfig {
            padding: 1,
            ..Default::default()
        };
        let g = groups_for(ch);
        Self {
            c1: nn::conv2d(&p / "conv1", ch, ch, 3, cfg),
            n1: nn::group_norm(&p / "norm1", g, ch, Default::default()),
            c2: nn::conv2d(&p / "conv2", ch, ch, 3, cfg),
            n2: nn::group_norm(&p / "norm2", g, ch, Default::default()),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let h = lrelu(&self.n1.forward(&self.c1.forward(x)));
        let h = self.n2.forward(&self.c2.forward(&h));
        lrelu(&(x + h))
    }
}

#[derive(Debug)]
struct Downsample {
    conv: nn::Conv2D,
    norm: nn::GroupNorm,
}

/// Small residual encoder with GroupNorm and unit-norm embeddings.
///
/// GroupNorm normalizes per sample, so an image's embedding never depends on the other rows
/// of its batch.
#[derive(Debug)]
pub struct EmbeddingNet {
    vs: VarStore,
    spec: ServiceModelSpec,
    id: String,
    stem: nn::Conv2D,
    stem_norm: nn::GroupNorm,
    stages: Vec<ResBlock>,
    downs: Vec<Downsample>,
    head: nn::Linear,
}

impl EmbeddingNet {
    pub fn new(spec: ServiceModelSpec, seed: u64) -> Result<Self> {
        if spec.width == 0 || spec.stages == 0 || spec.embedding_dim == 0 {
            return Err(Error::contract(format!(
                "invalid service model spec {spec:?}"
            )));
        }
        let vs = VarStore::new(Device::Cpu);
        let root = vs.root();
        let w = spec.width as i64;
        let cfg = nn::ConvConfig {
            padding: 1,
            ..Default::default()
        };
        let stem = nn::conv2d(&root / "stem", 3, w, 3, cfg);
        let stem_norm = nn::group_norm(&root / "stem_norm", groups_for(w), w, Default::default());
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        let mut ch = w;
        for i in 0..spec.stages {
            stages.push(ResBlock::new(&root / format!("stage{i}"), ch));
            if i + 1 < spec.stages {
                let dcfg = nn::ConvConfig {
                    stride: 2,
                    padding: 1,
                    ..Default::default()
                };
                downs.push(Downsample {
                    conv: nn::conv2d(&root / format!("down{i}"), ch, 2 * ch, 3, dcfg),
                    norm: nn::group_norm(
                        &root / format!("down{i}_norm"),
                        groups_for(2 * ch),
                        2 * ch,
                        Default::default(),
                    ),
                });
                ch *= 2;
            }
        }
        let head = nn::linear(
            &root / "head",
            ch,
            spec.embedding_dim as i64,
            Default::default(),
        );
        seeded_init(&vs, seed);
        let id = format!("embednet-{}", &varstore_digest(&vs)[..12]);
        Ok(Self {
            vs,
            spec,
            id,
            stem,
            stem_norm,
            stages,
            downs,
            head,
        })
    }

    pub fn spec(&self) -> &ServiceModelSpec {
        &self.spec
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    pub fn weight_digest(&self) -> String {
        varstore_digest(&self.vs)
    }

    pub fn freeze(mut self) -> Self {
        self.vs.freeze();
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::save_varstore(&self.vs, path)
    }

    pub fn load(spec: ServiceModelSpec, path: &Path) -> Result<Self> {
        let mut net = Self::new(spec, 0)?;
        super::load_varstore(&mut net.vs, path)?;
        net.id = format!("embednet-{}", &varstore_digest(&net.vs)[..12]);
        Ok(net.freeze())
    }

    /// Activations after the stem and after every stage, followed by the embedding.
    fn trunk(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        ensure_float_image(x, 3)?;
        let x = x.to_kind(self.vs.kind()) - 0.5;
        let mut feats = Vec::with_capacity(self.spec.stages + 1);
        let mut h = lrelu(&self.stem_norm.forward(&self.stem.forward(&x)));
        feats.push(h.shallow_clone());
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(&h);
            feats.push(h.shallow_clone());
            if let Some(d) = self.downs.get(i) {
                h = lrelu(&d.norm.forward(&d.conv.forward(&h)));
            }
        }
        let pooled = h.mean_dim([2i64, 3].as_slice(), false, None::<Kind>);
        let e = self.head.forward(&pooled);
        let norm = e
            .square()
            .sum_dim_intlist([1i64].as_slice(), true, None::<Kind>)
            .sqrt()
            .clamp_min(1e-12);
        Ok((feats, e / norm))
    }
}

impl ServiceModel for EmbeddingNet {
    fn id(&self) -> &str {
        &self.id
    }

    fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.trunk(x)?.1)
    }
}

impl FeatureModel for EmbeddingNet {
    fn id(&self) -> &str {
        &self.id
    }

    fn layer_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.trunk(x)?.0)
    }
}

/// A batch of embeddings (`B×D`) tagged with the producing model.
#[derive(Debug)]
pub struct Embeddings {
    pub data: Tensor,
    pub source: String,
}

impl Embeddings {
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let d = self.data.size()[1] as usize;
        to_f64_vec(&self.data)
            .chunks(d.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.data.size()[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const EMBED_CHUNK: usize = 64;

/// Inference-only embedding of a whole batch.
pub fn embed(fs: &dyn ServiceModel, x: &ImageBatch) -> Result<Embeddings> {
    let n = x.len();
    if n == 0 {
        return Ok(Embeddings {
            data: Tensor::zeros([0, fs.embedding_dim() as i64], (Kind::Float, Device::Cpu)),
            source: fs.id().to_string(),
        });
    }
    let parts = tch::no_grad(|| -> Result<Vec<Tensor>> {
        (0..n)
            .step_by(EMBED_CHUNK)
            .map(|s| {
                fs.forward(
                    &x.tensor()
                        .narrow(0, s as i64, EMBED_CHUNK.min(n - s) as i64),
                )
            })
            .collect()
    })?;
    Ok(Embeddings {
        data: Tensor::cat(&parts, 0).to_kind(Kind::Float),
        source: fs.id().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceTrainConfig {
    pub max_epochs: usize,
    /// Train at least this many epochs before checking the stop criterion.
    pub min_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Additive cosine margin of the normalized-softmax objective.
    pub margin: f64,
    pub scale: f64,
    pub target_rank1: f64,
    pub augmentation: AugmentationPolicy,
    pub seed: u64,
}

impl Default for ServiceTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 40,
            min_epochs: 10,
            batch_size: 32,
            learning_rate: 2e-3,
            margin: 0.25,
            scale: 16.0,
            target_rank1: 0.9,
            augmentation: AugmentationPolicy {
                horizontal_flip_prob: 0.5,
                pad_pixels: 2,
                crop_to_original: true,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceTrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub heldout_rank1: f64,
    pub converged: bool,
    pub warning: Option<String>,
}

/// Hold out the last image of every identity as a query; the rest form the training gallery.
fn heldout_split(labels: &[usize], identities: usize) -> (Vec<usize>, Vec<usize>) {
    let mut last = vec![None; identities];
    for (i, &l) in labels.iter().enumerate() {
        last[l] = Some(i);
    }
    let held: Vec<usize> = last.into_iter().flatten().collect();
    let train = (0..labels.len()).filter(|i| !held.contains(i)).collect();
    (train, held)
}

/// Rank-1 identification of `queries` against `gallery` under `fs` (cosine ranking).
pub fn rank1_identification(
    fs: &dyn ServiceModel,
    queries: &LabeledImages,
    gallery: &LabeledImages,
) -> Result<f64> {
    let q = embed(fs, &queries.images)?.rows();
    let g = embed(fs, &gallery.images)?.rows();
    Ok(cmc_and_map(&q, &g, &queries.labels, &gallery.labels)?.rank1)
}

/// Train an embedding network with an additive-margin normalized softmax.
///
/// Stops once held-out rank-1 reaches `target_rank1` (after `min_epochs`) or at `max_epochs`;
/// in the latter case the summary carries a warning.
pub fn train_service_model(
    train_set: &LabeledImages,
    spec: ServiceModelSpec,
    cfg: &ServiceTrainConfig,
) -> Result<(EmbeddingNet, ServiceTrainSummary)> {
    let ids = train_set.num_identities();
    if ids < 2 {
        return Err(Error::contract(format!(
            "service training needs at least 2 identities, got {ids}"
        )));
    }
    let mut counts = vec![0usize; ids];
    for &l in &train_set.labels {
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::contract(
            "service training needs at least 2 images per identity",
        ));
    }
    cfg.augmentation.validate()?;
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::contract(
            "batch_size and max_epochs must be positive",
        ));
    }

    let net = EmbeddingNet::new(spec, cfg.seed)?;
    let head_vs = VarStore::new(Device::Cpu);
    let class_w = head_vs.root().var(
        "class_weights",
        &[ids as i64, spec.embedding_dim as i64],
        nn::Init::Const(0.0),
    );
    seeded_class_weights(&class_w, cfg.seed);
    let mut opt = nn::Adam::default().build(&net.vs, cfg.learning_rate)?;
    let mut head_opt = nn::Adam::default().build(&head_vs, cfg.learning_rate)?;

    let (train_idx, held_idx) = heldout_split(&train_set.labels, ids);
    let train_part = train_set.select(&train_idx);
    let held_part = train_set.select(&held_idx);
    let mut order: Vec<usize> = (0..train_part.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, "service-shuffle");
    let mut aug_rng = rng::stream(cfg.seed, "service-augment");

    let mut summary = ServiceTrainSummary {
        epochs: 0,
        final_loss: f64::NAN,
        heldout_rank1: 0.0,
        converged: false,
        warning: None,
    };
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_part.images.select(chunk);
            let x = augment_batch(x.tensor(), &cfg.augmentation, &mut aug_rng)?;
            let labels: Vec<i64> = chunk.iter().map(|&i| train_part.labels[i] as i64).collect();
            let target = Tensor::from_slice(&labels);
            let e = net.forward(&x)?;
            let w = &class_w
                / class_w
                    .square()
                    .sum_dim_intlist([1i64].as_slice(), true, None::<Kind>)
                    .sqrt()
                    .clamp_min(1e-12);
            let cos = e.matmul(&w.tr());
            let margin = target.one_hot(ids as i64).to_kind(Kind::Float) * cfg.margin;
            let logits = (cos - margin) * cfg.scale;
            let loss = logits.cross_entropy_for_logits(&target);
            opt.zero_grad();
            head_opt.zero_grad();
            loss.backward();
            opt.step();
            head_opt.step();
            total += scalar(&loss);
            batches += 1;
        }
        summary.epochs = epoch;
        summary.final_loss = total / batches.max(1) as f64;
        if !summary.final_loss.is_finite() {
            return Err(Error::NonFinite {
                step: epoch,
                components: format!("service loss {}", summary.final_loss),
            });
        }
        if epoch >= cfg.min_epochs || epoch == cfg.max_epochs {
            summary.heldout_rank1 = rank1_identification(&net, &held_part, &train_part)?;
            log::debug!(
                "service epoch {epoch}: loss {:.4} rank1 {:.3}",
                summary.final_loss,
                summary.heldout_rank1
            );
            if summary.heldout_rank1 >= cfg.target_rank1 {
                summary.converged = true;
                break;
            }
        }
    }
    if !summary.converged {
        summary.warning = Some(format!(
            "held-out rank-1 {:.3} below target {:.3} after {} epochs",
            summary.heldout_rank1, cfg.target_rank1, summary.epochs
        ));
        log::warn!("{}", summary.warning.as_deref().unwrap_or_default());
    }
    Ok((net.freeze(), summary))
}

fn seeded_class_weights(w: &Tensor, seed: u64) {
    use rand::Rng;
    let n = w.numel();
    let mut r = rng::stream(seed, "service-class-weights");
    let values: Vec<f32> = (0..n)
        .map(|_| r.sample::<f64, _>(rand_distr::StandardNormal) as f32)
        .collect();
    tch::no_grad(|| {
        let mut w = w.shallow_clone();
        w.copy_(&Tensor::from_slice(&values).reshape(w.size()));
    });
}
