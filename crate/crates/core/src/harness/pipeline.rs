//! Staged pipeline with content-digest caching and an append-only manifest.
//!
//! Stages exchange data only through files under the run directory. Each stage directory
//! holds a `stage.json` with its cache key and output digests; a stage is skipped when the
//! key matches and every output still hashes to the recorded digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::Tensor;

use super::config::{fraction_tag, AblationCell, DatasetSource, RunConfig};
use super::data::{generate_synthetic_dataset, ingest_gallery, load_image, save_png};
use super::io::{self, AccessLog};
use crate::attack::{reconstruct, split_key_share, train_attacker, AttackConfig, KeyShareSplit};
use crate::encryptor::{
    encrypt_gallery, mean_feature_cosine, recover, train_key_model, EncryptionConfig, StepLosses,
};
use crate::error::{Error, Result};
use crate::metrics::{self, EvaluationSet, MetricsReport, VerificationProtocol};
use crate::models::{
    make_unet, train_service_model, EmbeddingNet, KeyModel, ServiceModelSpec, UNet, UNetSpec,
};
use crate::tensor::{ImageBatch, LabeledImages};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub cache_key: String,
    pub cache_hit: bool,
    pub seconds: f64,
    /// Relative path → SHA-256 of every declared input artifact.
    pub inputs: BTreeMap<String, String>,
    /// Relative path → SHA-256 of every output artifact.
    pub outputs: BTreeMap<String, String>,
    /// Every file the stage body opened, relative to the run directory when inside it.
    pub reads: Vec<String>,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    /// Not run because a stage it depends on failed.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub config_digest: String,
    pub stages: Vec<StageRecord>,
    pub complete: bool,
    /// Stages actually executed (not served from cache).
    pub recomputed: usize,
}

impl ExperimentManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|s| s.name == name)
    }

    /// Re-hash every recorded output under `root`.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for s in self.stages.iter().filter(|s| s.status == StageStatus::Ok) {
            for (rel, digest) in &s.outputs {
                let got = io::file_digest(&root.join(rel))?;
                if &got != digest {
                    return Err(Error::Stage {
                        stage: s.name.clone(),
                        message: format!("digest mismatch for {rel}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Digest of the configuration with the output directory blanked.
pub fn config_digest(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    hex::encode(Sha256::digest(
        serde_json::to_vec(&c).expect("config serializes"),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageFile {
    cache_key: String,
    outputs: BTreeMap<String, String>,
    reads: Vec<String>,
}

/// Paths of the artifacts, relative to the run directory.
pub mod paths {
    pub fn dataset(name: &str) -> String {
        format!("data/{name}")
    }
    pub const SERVICE_MODEL: &str = "service/target.ot";
    pub const EVAL_MODEL: &str = "service/eval.ot";
    pub const KEY_MODEL: &str = "key/key.ot";
    pub const ENCRYPTED: &str = "encrypt/x_prime.npy";
    pub const ENCRYPTED_PNG: &str = "encrypt/png";
    pub const ENCRYPTION_EFFICACY: &str = "evaluate/encryption/efficacy.json";
}

pub fn attack_dir(seed: u64, fraction: f64, cell: AblationCell) -> String {
    format!("attack/s{seed}_{}_{}", fraction_tag(fraction), cell.tag())
}

pub fn evaluation_dir(seed: u64, fraction: f64, cell: AblationCell) -> String {
    format!("evaluate/s{seed}_{}_{}", fraction_tag(fraction), cell.tag())
}

pub fn baseline_dir(seed: u64) -> String {
    format!("evaluate/s{seed}_baselines")
}

struct Runner {
    root: PathBuf,
    manifest: ExperimentManifest,
}

impl Runner {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .map(|r| r.to_string_lossy().into_owned())
            .unwrap_or_else(|_| p.to_string_lossy().into_owned())
    }

    fn save_manifest(&self) -> Result<()> {
        io::write_json(&self.root.join("manifest.json"), &self.manifest)
    }

    fn skip(&mut self, name: &str) -> Result<()> {
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            cache_key: String::new(),
            cache_hit: false,
            seconds: 0.0,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            reads: Vec::new(),
            status: StageStatus::Skipped,
            error: None,
        });
        self.manifest.complete = false;
        self.save_manifest()
    }

    /// Run (or serve from cache) one stage. `body` receives the stage directory and an access
    /// log, and returns its output files.
    fn stage<F>(
        &mut self,
        name: &str,
        dir: &str,
        key_material: serde_json::Value,
        inputs: &[&str],
        body: F,
    ) -> Result<bool>
    where
        F: FnOnce(&Path, &AccessLog) -> Result<Vec<PathBuf>>,
    {
        let stage_dir = self.root.join(dir);
        let mut input_digests = BTreeMap::new();
        for rel in inputs {
            match io::file_digest(&self.root.join(rel)) {
                Ok(d) => {
                    input_digests.insert(rel.to_string(), d);
                }
                Err(e) => {
                    log::warn!("stage {name}: input {rel} unavailable");
                    self.skip(name)?;
                    if let Some(last) = self.manifest.stages.last_mut() {
                        last.error = Some(format!("missing input: {e}"));
                    }
                    self.save_manifest()?;
                    return Ok(false);
                }
            }
        }
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(serde_json::to_vec(&key_material)?);
        h.update(serde_json::to_vec(&input_digests)?);
        let cache_key = hex::encode(h.finalize());

        let record_path = stage_dir.join("stage.json");
        if let Ok(text) = std::fs::read_to_string(&record_path) {
            if let Ok(prev) = serde_json::from_str::<StageFile>(&text) {
                let valid = prev.cache_key == cache_key
                    && prev.outputs.iter().all(|(rel, d)| {
                        io::file_digest(&self.root.join(rel))
                            .map(|g| &g == d)
                            .unwrap_or(false)
                    });
                if valid {
                    log::info!("stage {name}: cache hit");
                    self.manifest.stages.push(StageRecord {
                        name: name.to_string(),
                        cache_key,
                        cache_hit: true,
                        seconds: 0.0,
                        inputs: input_digests,
                        outputs: prev.outputs,
                        reads: prev.reads,
                        status: StageStatus::Ok,
                        error: None,
                    });
                    self.save_manifest()?;
                    return Ok(true);
                }
            }
        }

        log::info!("stage {name}: running");
        if stage_dir.exists() {
            std::fs::remove_dir_all(&stage_dir).map_err(|e| Error::io(&stage_dir, e))?;
        }
        io::ensure_dir(&stage_dir)?;
        let t = Instant::now();
        let access = AccessLog::default();
        let result = body(&stage_dir, &access);
        let reads: Vec<String> = access.paths().iter().map(|p| self.rel(p)).collect();
        let seconds = t.elapsed().as_secs_f64();
        self.manifest.recomputed += 1;
        match result {
            Ok(files) => {
                let mut outputs = BTreeMap::new();
                for f in files {
                    outputs.insert(self.rel(&f), io::file_digest(&f)?);
                }
                io::write_json(
                    &record_path,
                    &StageFile {
                        cache_key: cache_key.clone(),
                        outputs: outputs.clone(),
                        reads: reads.clone(),
                    },
                )?;
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    cache_key,
                    cache_hit: false,
                    seconds,
                    inputs: input_digests,
                    outputs,
                    reads,
                    status: StageStatus::Ok,
                    error: None,
                });
                self.save_manifest()?;
                Ok(true)
            }
            Err(e) => {
                log::error!("stage {name} failed: {e}");
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    cache_key,
                    cache_hit: false,
                    seconds,
                    inputs: input_digests,
                    outputs: BTreeMap::new(),
                    reads,
                    status: StageStatus::Failed,
                    error: Some(e.to_string()),
                });
                self.manifest.complete = false;
                self.save_manifest()?;
                Ok(false)
            }
        }
    }
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "stage.json") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Store a labeled set as `images.npy`, `labels.npy` and `names.json`.
fn write_labeled(dir: &Path, set: &LabeledImages) -> Result<()> {
    io::write_images(&dir.join("images.npy"), &set.images)?;
    io::write_labels(&dir.join("labels.npy"), &set.labels)?;
    io::write_json(&dir.join("names.json"), &set.identity_names)
}

pub fn read_labeled(dir: &Path, log: &AccessLog) -> Result<LabeledImages> {
    let images = io::read_images(&dir.join("images.npy"), log)?;
    let labels = io::read_labels(&dir.join("labels.npy"), log)?;
    let names: Vec<String> = io::read_json(&dir.join("names.json"), log)?;
    LabeledImages::new(images, labels, names)
}

fn load_service(spec: ServiceModelSpec, path: &Path, log: &AccessLog) -> Result<EmbeddingNet> {
    log.record(path);
    EmbeddingNet::load(spec, path)
}

fn load_key(spec: UNetSpec, path: &Path, log: &AccessLog) -> Result<UNet> {
    log.record(path);
    Ok(UNet::load(spec, path)?.freeze())
}

/// Mean over the gallery of the encryption targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncryptionEfficacy {
    pub images: usize,
    /// Cosine between target-model embeddings of x and x'.
    pub mean_feature_cosine: f64,
    pub mean_ssim: f64,
    pub key_recovery_psnr: f64,
    pub wrong_key_psnr: f64,
    pub wrong_key_seed: u64,
    pub failed_images: Vec<usize>,
}

/// Per-image summary written next to the encrypted images.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncryptionSidecar {
    config: EncryptionConfig,
    config_hash: String,
    key_model_id: String,
    service_model_id: String,
    seeds: super::config::Seeds,
    initial: Vec<StepLosses>,
    last: Vec<StepLosses>,
    failures: Vec<(usize, String)>,
}

fn dataset_stage(
    r: &mut Runner,
    name: &str,
    source: &DatasetSource,
    cfg: &RunConfig,
) -> Result<bool> {
    let dir = paths::dataset(name);
    let size = cfg.image_size;
    let seed = cfg.seeds.data;
    let material = serde_json::json!({ "source": source, "size": size, "seed": seed });
    let source = source.clone();
    r.stage(
        &format!("data:{name}"),
        &dir,
        material,
        &[],
        move |d, log| {
            let set = match &source {
                DatasetSource::Synthetic(spec) => {
                    let spec = super::data::SyntheticDatasetSpec {
                        seed,
                        image_size: size,
                        ..spec.clone()
                    };
                    generate_synthetic_dataset(&spec, &d.join("png"))?;
                    ingest_gallery(&d.join("png"), size, log)?.set
                }
                DatasetSource::Directory { path } => {
                    let got = ingest_gallery(path, size, log)?;
                    io::write_json(
                        &d.join("skipped.json"),
                        &got.skipped
                            .iter()
                            .map(|(p, m)| (p.display().to_string(), m))
                            .collect::<Vec<_>>(),
                    )?;
                    got.set
                }
            };
            write_labeled(d, &set)?;
            files_under(d)
        },
    )
}

/// Last stage group a pipeline invocation executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    Data,
    Service,
    /// Key preparation, encryption and the encryption efficacy check.
    Encrypt,
    Attack,
    /// Baselines, per-run evaluation and the report.
    Evaluate,
}

/// Execute every stage of `cfg`, reusing cached stages.
pub fn run_pipeline(cfg: &RunConfig) -> Result<ExperimentManifest> {
    run_pipeline_to(cfg, Goal::Evaluate)
}

/// Execute the stages up to and including `goal`.
pub fn run_pipeline_to(cfg: &RunConfig, goal: Goal) -> Result<ExperimentManifest> {
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    io::ensure_dir(&root)?;
    let root = std::fs::canonicalize(&root).map_err(|e| Error::io(&root, e))?;
    let mut r = Runner {
        root: root.clone(),
        manifest: ExperimentManifest {
            tool_version: TOOL_VERSION.to_string(),
            config: cfg.clone(),
            config_digest: config_digest(cfg),
            stages: Vec::new(),
            complete: goal == Goal::Evaluate,
            recomputed: 0,
        },
    };
    io::write_json(&root.join("config.json"), cfg)?;

    let mut data_ok = true;
    for (name, source) in [
        ("gallery", &cfg.gallery),
        ("auxiliary", &cfg.auxiliary),
        ("service_data", &cfg.service_data),
        ("key_private", &cfg.key_private),
        ("random_baseline", &cfg.random_baseline),
    ] {
        data_ok &= dataset_stage(&mut r, name, source, cfg)?;
    }
    let gallery_images = format!("{}/images.npy", paths::dataset("gallery"));
    let aux_images = format!("{}/images.npy", paths::dataset("auxiliary"));
    if goal == Goal::Data {
        return finish(r, &[]);
    }

    let service_ok = data_ok && {
        let material = serde_json::json!({
            "target": cfg.service_model, "eval": cfg.eval_model, "training": cfg.service_training,
            "seed": cfg.seeds.service, "eval_seed": cfg.seeds.eval,
        });
        let c = cfg.clone();
        let svc_images = format!("{}/images.npy", paths::dataset("service_data"));
        r.stage(
            "service",
            "service",
            material,
            &[&svc_images],
            move |d, log| {
                let set = read_labeled(&root_of(d).join(paths::dataset("service_data")), log)?;
                let tcfg = crate::models::ServiceTrainConfig {
                    seed: c.seeds.service,
                    ..c.service_training.clone()
                };
                let (target, ts) = train_service_model(&set, c.service_model, &tcfg)?;
                let ecfg = crate::models::ServiceTrainConfig {
                    seed: c.seeds.eval,
                    ..c.service_training.clone()
                };
                let (eval, es) = train_service_model(&set, c.eval_model, &ecfg)?;
                target.save(&d.join("target.ot"))?;
                eval.save(&d.join("eval.ot"))?;
                io::write_json(
                    &d.join("summary.json"),
                    &serde_json::json!({ "target": ts, "eval": es }),
                )?;
                files_under(d)
            },
        )?
    };
    if !service_ok {
        return finish(
            r,
            &[
                "key",
                "encrypt",
                "evaluate:encryption",
                "attack",
                "evaluate",
            ],
        );
    }
    if goal == Goal::Service {
        return finish(r, &[]);
    }

    let key_ok = {
        let material = serde_json::json!({ "spec": cfg.key_model, "training": cfg.key_training, "seed": cfg.seeds.key, "encryption": cfg.encryption });
        let c = cfg.clone();
        let private_images = format!("{}/images.npy", paths::dataset("key_private"));
        r.stage(
            "key",
            "key",
            material,
            &[&private_images, paths::SERVICE_MODEL],
            move |d, log| {
                let root = root_of(d);
                let private = read_labeled(&root.join(paths::dataset("key_private")), log)?;
                let fs = load_service(c.service_model, &root.join(paths::SERVICE_MODEL), log)?;
                let kcfg = crate::encryptor::KeyTrainingConfig {
                    seed: c.seeds.key,
                    ..c.key_training.clone()
                };
                let (key, summary) =
                    train_key_model(c.key_model, &private.images, &fs, &c.encryption, &kcfg)?;
                key.save(&d.join("key.ot"))?;
                io::write_json(&d.join("summary.json"), &summary)?;
                files_under(d)
            },
        )?
    };
    if !key_ok {
        return finish(r, &["encrypt", "evaluate:encryption", "attack", "evaluate"]);
    }

    let encrypt_ok = {
        let material = serde_json::json!({ "encryption": cfg.encryption, "key_spec": cfg.key_model, "service_spec": cfg.service_model });
        let c = cfg.clone();
        r.stage(
            "encrypt",
            "encrypt",
            material,
            &[&gallery_images, paths::SERVICE_MODEL, paths::KEY_MODEL],
            move |d, log| {
                let root = root_of(d);
                let gallery = read_labeled(&root.join(paths::dataset("gallery")), log)?;
                let fs = load_service(c.service_model, &root.join(paths::SERVICE_MODEL), log)?;
                let fk = load_key(c.key_model, &root.join(paths::KEY_MODEL), log)?;
                let results = encrypt_gallery(&gallery.images, &fs, &fk, &c.encryption);
                let mut rows = Vec::with_capacity(results.len());
                let mut traces = Vec::with_capacity(results.len());
                let mut failures = Vec::new();
                let (mut initial, mut last) = (Vec::new(), Vec::new());
                let png = d.join("png");
                io::ensure_dir(&png)?;
                for (i, res) in results.into_iter().enumerate() {
                    match res {
                        Ok(e) => {
                            save_png(&e.x_prime, &png.join(format!("{i:04}.png")))?;
                            initial.push(e.loss_trace[0]);
                            last.push(*e.loss_trace.last().expect("steps >= 1"));
                            let flat: Vec<f64> = e
                                .loss_trace
                                .iter()
                                .flat_map(|s| {
                                    [
                                        s.task,
                                        s.difference,
                                        s.variance_consistency,
                                        s.recovery,
                                        s.total,
                                    ]
                                })
                                .collect();
                            traces.push(Tensor::from_slice(&flat).view([-1, 5]));
                            rows.push(e.x_prime);
                        }
                        Err(err) => failures.push((i, err.to_string())),
                    }
                }
                if !failures.is_empty() {
                    io::write_json(&d.join("sidecar.json"), &failures)?;
                    return Err(Error::Stage {
                        stage: "encrypt".into(),
                        message: format!("{} images failed to encrypt", failures.len()),
                    });
                }
                let x_prime = ImageBatch::concat(&rows)?;
                io::write_images(&d.join("x_prime.npy"), &x_prime)?;
                io::write_tensor(&d.join("trace.npy"), &Tensor::stack(&traces, 0))?;
                let sidecar = EncryptionSidecar {
                    config: c.encryption.clone(),
                    config_hash: c.encryption.digest(),
                    key_model_id: fk.id().to_string(),
                    service_model_id: crate::models::ServiceModel::id(&fs).to_string(),
                    seeds: c.seeds,
                    initial,
                    last,
                    failures,
                };
                io::write_json(&d.join("sidecar.json"), &sidecar)?;
                files_under(d)
            },
        )?
    };
    if !encrypt_ok {
        return finish(r, &["evaluate:encryption", "attack", "evaluate"]);
    }

    {
        let material = serde_json::json!({ "key_spec": cfg.key_model, "service_spec": cfg.service_model, "eval_seed": cfg.seeds.eval });
        let c = cfg.clone();
        r.stage(
            "evaluate:encryption",
            "evaluate/encryption",
            material,
            &[
                &gallery_images,
                paths::ENCRYPTED,
                paths::SERVICE_MODEL,
                paths::KEY_MODEL,
            ],
            move |d, log| {
                let root = root_of_depth(d, 2);
                let gallery = read_labeled(&root.join(paths::dataset("gallery")), log)?;
                let xp = io::read_images(&root.join(paths::ENCRYPTED), log)?;
                let fs = load_service(c.service_model, &root.join(paths::SERVICE_MODEL), log)?;
                let fk = load_key(c.key_model, &root.join(paths::KEY_MODEL), log)?;
                let wrong_seed = crate::rng::derive_seed(c.seeds.eval, "wrong-key");
                let wrong = make_unet(c.key_model, wrong_seed)?.freeze();
                let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
                let eff = EncryptionEfficacy {
                    images: xp.len(),
                    mean_feature_cosine: mean_feature_cosine(&fs, &gallery.images, &xp)?,
                    mean_ssim: mean(metrics::ssim(&gallery.images, &xp)?),
                    key_recovery_psnr: mean(metrics::psnr(&recover(&fk, &xp)?, &gallery.images)?),
                    wrong_key_psnr: mean(metrics::psnr(&recover(&wrong, &xp)?, &gallery.images)?),
                    wrong_key_seed: wrong_seed,
                    failed_images: Vec::new(),
                };
                io::write_images(&d.join("key_recovered.npy"), &recover(&fk, &xp)?)?;
                io::write_json(&d.join("efficacy.json"), &eff)?;
                files_under(d)
            },
        )?;
    }
    if goal == Goal::Encrypt {
        return finish(r, &[]);
    }

    for seed in cfg.attack_seeds() {
        if goal == Goal::Evaluate {
            baselines_stage(&mut r, cfg, seed)?;
        }
        attack_runs(&mut r, cfg, seed, goal, &gallery_images, &aux_images)?;
    }
    if goal == Goal::Evaluate {
        r.save_manifest()?;
        super::report::emit_report(&r.root)?;
    }
    finish(r, &[])
}

fn attack_runs(
    r: &mut Runner,
    cfg: &RunConfig,
    seed: u64,
    goal: Goal,
    gallery_images: &str,
    aux_images: &str,
) -> Result<()> {
    {
        for (fraction, cell) in cfg.attack_runs() {
            let adir = attack_dir(seed, fraction, cell);
            let acfg = attack_config_for(cfg, cell, seed);
            let material = serde_json::json!({
                "attack": acfg, "fraction": fraction, "quantized": cfg.attack_from_quantized, "service_spec": cfg.service_model,
            });
            let quantized = cfg.attack_from_quantized;
            let size = cfg.image_size;
            let service_spec = cfg.service_model;
            let attack_inputs: Vec<&str> = vec![paths::ENCRYPTED, paths::SERVICE_MODEL, aux_images];
            let ok = r.stage(&format!("attack:{adir}"), &adir, material, &attack_inputs, move |d, log| {
            let root = root_of_depth(d, 2);
            let encrypted = if quantized {
                read_encrypted_pngs(&root.join(paths::ENCRYPTED_PNG), size, log)?
            } else {
                io::read_images(&root.join(paths::ENCRYPTED), log)?
            };
            let fs = load_service(service_spec, &root.join(paths::SERVICE_MODEL), log)?;
            let aux = io::read_images(&root.join(aux_images_path()), log)?;
            let split = split_key_share(encrypted.len(), fraction, acfg.seed)?;
            let run = train_attacker(&encrypted.select(&split.train), &fs, &aux, fraction, &acfg)?;
            run.attacker.save(&d.join("attacker.ot"))?;
            if let Some(disc) = &run.discriminator {
                disc.save(&d.join("discriminator.ot"))?;
            }
            let recon = reconstruct(&run.attacker, &encrypted.select(&split.eval))?;
            io::write_images(&d.join("recon_eval.npy"), &recon)?;
            io::write_json(&d.join("split.json"), &split)?;
            io::write_json(
                &d.join("log.json"),
                &serde_json::json!({
                    "config": acfg, "fraction": fraction, "train_size": run.train_size,
                    "config_hash": run.config_hash, "snapshots": run.snapshots, "steps": run.log,
                }),
            )?;
            files_under(d)
        })?;
            let edir = evaluation_dir(seed, fraction, cell);
            if goal != Goal::Evaluate {
                continue;
            }
            if !ok {
                r.skip(&format!("evaluate:{edir}"))?;
                continue;
            }
            let material =
                serde_json::json!({ "eval_spec": cfg.eval_model, "far": cfg.far_target });
            let eval_spec = cfg.eval_model;
            let far = cfg.far_target;
            let recon_path = format!("{adir}/recon_eval.npy");
            let split_path = format!("{adir}/split.json");
            let label = format!("attack {} {}", fraction_tag(fraction), cell.tag());
            r.stage(
                &format!("evaluate:{edir}"),
                &edir,
                material,
                &[
                    gallery_images,
                    &recon_path.clone(),
                    &split_path.clone(),
                    paths::EVAL_MODEL,
                ],
                move |d, log| {
                    let root = root_of_depth(d, 2);
                    let gallery = read_labeled(&root.join(paths::dataset("gallery")), log)?;
                    let recon = io::read_images(&root.join(&recon_path), log)?;
                    let split: KeyShareSplit = io::read_json(&root.join(&split_path), log)?;
                    let fe = load_service(eval_spec, &root.join(paths::EVAL_MODEL), log)?;
                    let report = evaluate_probes(&gallery, &split, &recon, &fe, far, &label)?;
                    write_report(d, &report)?;
                    files_under(d)
                },
            )?;
        }
    }
    Ok(())
}

fn aux_images_path() -> String {
    format!("{}/images.npy", paths::dataset("auxiliary"))
}

fn read_encrypted_pngs(dir: &Path, size: usize, log: &AccessLog) -> Result<ImageBatch> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    let imgs = files
        .iter()
        .map(|f| load_image(f, size, log))
        .collect::<Result<Vec<_>>>()?;
    ImageBatch::concat(&imgs)
}

fn root_of(stage_dir: &Path) -> PathBuf {
    root_of_depth(stage_dir, 1)
}

fn root_of_depth(stage_dir: &Path, depth: usize) -> PathBuf {
    let mut p = stage_dir.to_path_buf();
    for _ in 0..depth {
        p.pop();
    }
    p
}

/// Attack template with the run's toggles and seed applied.
pub fn attack_config_for(cfg: &RunConfig, cell: AblationCell, seed: u64) -> AttackConfig {
    AttackConfig {
        use_gan: cell.gan_loss,
        use_augmentation: cell.aug_id_loss,
        seed,
        ..cfg.attack.clone()
    }
}

/// Verify probes (reconstructions of the held-out pool) against the whole original gallery.
pub fn evaluate_probes(
    gallery: &LabeledImages,
    split: &KeyShareSplit,
    probes: &ImageBatch,
    fs_eval: &EmbeddingNet,
    far: f64,
    label: &str,
) -> Result<MetricsReport> {
    let ids: Vec<usize> = split.eval.iter().map(|&i| gallery.labels[i]).collect();
    let selfs: Vec<Option<usize>> = split.eval.iter().map(|&i| Some(i)).collect();
    let protocol = VerificationProtocol::all_pairs(&ids, &gallery.labels, &selfs, far)?;
    let set = EvaluationSet {
        reference: &gallery.images,
        reference_ids: &gallery.labels,
        probe_ids: &ids,
        probe_self: &selfs,
    };
    let originals = gallery.images.select(&split.eval);
    metrics::evaluate_reconstruction(&originals, probes, &set, fs_eval, fs_eval, &protocol, label)
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    let json = report.to_json()?;
    std::fs::write(dir.join("metrics.json"), json + "\n").map_err(|e| Error::io(dir, e))?;
    let f = std::fs::File::create(dir.join("metrics.csv")).map_err(|e| Error::io(dir, e))?;
    report.write_csv(f)
}

/// Original, encrypted, random-identity and key-recovery probes on the held-out pool.
fn baselines_stage(r: &mut Runner, cfg: &RunConfig, seed: u64) -> Result<bool> {
    let dir = baseline_dir(seed);
    let material = serde_json::json!({ "eval_spec": cfg.eval_model, "far": cfg.far_target, "split_seed": seed });
    let c = cfg.clone();
    let gallery_images = format!("{}/images.npy", paths::dataset("gallery"));
    let random_images = format!("{}/images.npy", paths::dataset("random_baseline"));
    r.stage(
        &format!("evaluate:{dir}"),
        &dir,
        material,
        &[
            &gallery_images,
            &random_images.clone(),
            paths::ENCRYPTED,
            "evaluate/encryption/key_recovered.npy",
            paths::EVAL_MODEL,
        ],
        move |d, log| {
            let root = root_of_depth(d, 2);
            let gallery = read_labeled(&root.join(paths::dataset("gallery")), log)?;
            let random = io::read_images(&root.join(&random_images), log)?;
            let xp = io::read_images(&root.join(paths::ENCRYPTED), log)?;
            let key_rec =
                io::read_images(&root.join("evaluate/encryption/key_recovered.npy"), log)?;
            let fe = load_service(c.eval_model, &root.join(paths::EVAL_MODEL), log)?;
            // Any fraction gives the same held-out pool for one seed.
            let split = split_key_share(gallery.len(), 1.0, seed)?;
            let n = split.eval.len();
            if random.len() < n {
                return Err(Error::contract(format!(
                    "random baseline has {} images, need {n}",
                    random.len()
                )));
            }
            let idx: Vec<usize> = (0..n).collect();
            for (name, probes) in [
                ("original", gallery.images.select(&split.eval)),
                ("protected", xp.select(&split.eval)),
                ("random", random.select(&idx)),
                ("key_recovery", key_rec.select(&split.eval)),
            ] {
                let sub = d.join(name);
                io::ensure_dir(&sub)?;
                write_report(
                    &sub,
                    &evaluate_probes(&gallery, &split, &probes, &fe, c.far_target, name)?,
                )?;
            }
            files_under(d)
        },
    )
}

fn finish(mut r: Runner, skipped: &[&str]) -> Result<ExperimentManifest> {
    for s in skipped {
        r.skip(s)?;
    }
    r.save_manifest()?;
    Ok(r.manifest)
}

pub fn load_manifest(root: &Path) -> Result<ExperimentManifest> {
    let text = std::fs::read_to_string(root.join("manifest.json"))
        .map_err(|e| Error::io(root.join("manifest.json"), e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Read back an evaluation stage's report.
pub fn load_report(root: &Path, rel_dir: &str) -> Result<MetricsReport> {
    let p = root.join(rel_dir).join("metrics.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_efficacy(root: &Path) -> Result<EncryptionEfficacy> {
    io::read_json(
        &root.join(paths::ENCRYPTION_EFFICACY),
        &AccessLog::default(),
    )
}
