//! Reconstruction quality and recognition accuracy.
//!
//! Pixel metrics run on the CPU in `f64` over `[0, 1]` images. Accuracy metrics work on
//! cosine similarities of embeddings produced by an evaluation service model.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use tch::Kind;

use crate::error::{Error, Result};
use crate::models::{embed, FeatureModel, ServiceModel};
use crate::tensor::{ensure_same_shape, to_f64_vec, ImageBatch};

pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &ImageBatch, b: &ImageBatch) -> Result<()> {
    ensure_same_shape(a.tensor(), b.tensor())
}

/// Per-image mean squared error.
pub fn mse(a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    Ok(a.to_f64_images()
        .iter()
        .zip(b.to_f64_images().iter())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64)
        .collect())
}

/// `10 log10(1 / mse)` for unit-range images, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
    Ok(mse(a, b)?.into_iter().map(psnr_from_mse).collect())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| plane[y * w + x + i] * k[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| rows[(y + i) * ow + x] * k[i]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, k);
    let mu_b = filter_valid(b, h, w, k);
    let e_aa = filter_valid(&aa, h, w, k);
    let e_bb = filter_valid(&bb, h, w, k);
    let e_ab = filter_valid(&ab, h, w, k);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Single-scale SSIM with an 11-tap Gaussian window (σ = 1.5), computed per channel over
/// fully covered window positions and averaged over channels.
pub fn ssim(a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let (c, h, w) = a.image_shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let k = gaussian_window();
    let plane = h * w;
    Ok(a.to_f64_images()
        .iter()
        .zip(b.to_f64_images().iter())
        .map(|(x, y)| {
            (0..c)
                .map(|ch| {
                    ssim_plane(
                        &x[ch * plane..(ch + 1) * plane],
                        &y[ch * plane..(ch + 1) * plane],
                        h,
                        w,
                        &k,
                    )
                })
                .sum::<f64>()
                / c as f64
        })
        .collect())
}

/// Multi-layer feature distance (LPIPS-style, untrained weights).
///
/// Each layer's activations are unit-normalized along channels at every position; the
/// squared difference is summed over channels, averaged over positions, and summed over
/// layers. Symmetric in `(a, b)` and zero for identical inputs.
pub fn perceptual_distance(
    a: &ImageBatch,
    b: &ImageBatch,
    model: &dyn FeatureModel,
) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    if a.is_empty() {
        return Ok(Vec::new());
    }
    tch::no_grad(|| {
        let fa = model.layer_features(a.tensor())?;
        let fb = model.layer_features(b.tensor())?;
        if fa.len() < 2 || fa.len() != fb.len() {
            return Err(Error::contract(format!(
                "feature model `{}` must expose at least 2 layers",
                model.id()
            )));
        }
        let mut total = vec![0.0; a.len()];
        for (x, y) in fa.iter().zip(&fb) {
            let nx = x
                / (x.square()
                    .sum_dim_intlist([1i64].as_slice(), true, None::<Kind>)
                    .sqrt()
                    + 1e-10);
            let ny = y
                / (y.square()
                    .sum_dim_intlist([1i64].as_slice(), true, None::<Kind>)
                    .sqrt()
                    + 1e-10);
            let d = (nx - ny)
                .square()
                .sum_dim_intlist([1i64].as_slice(), false, Kind::Double)
                .mean_dim([1i64, 2].as_slice(), false, Kind::Double);
            for (t, v) in total.iter_mut().zip(to_f64_vec(&d)) {
                *t += v;
            }
        }
        Ok(total)
    })
}

/// Verification accuracy at a fixed false-accept rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TprAtFar {
    pub tpr: f64,
    /// Scores strictly above this value are accepted. `-inf` when every impostor may be accepted.
    pub threshold_exclusive: f64,
}

/// True-positive rate at the smallest threshold `τ` whose impostor acceptance rate
/// `|{s ≥ τ}| / n` does not exceed `far`.
///
/// With impostor scores sorted descending, that infimum sits just above the `(k+1)`-th largest
/// impostor score, where `k` is the largest count with `k / n ≤ far`; genuine scores strictly
/// above it are accepted.
pub fn tpr_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<TprAtFar> {
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::contract(format!(
            "far must lie in (0, 1), got {far}"
        )));
    }
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::contract(
            "genuine and impostor score lists must be nonempty",
        ));
    }
    if genuine.iter().chain(impostor).any(|v| !v.is_finite()) {
        return Err(Error::contract("similarity scores must be finite"));
    }
    let mut imp = impostor.to_vec();
    imp.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let n = imp.len();
    let mut k = 0usize;
    while k < n && ((k + 1) as f64 / n as f64) <= far {
        k += 1;
    }
    // k < n because far < 1; imp[k] is the (k+1)-th largest and must be rejected.
    let threshold = imp[k];
    let accepted = genuine.iter().filter(|&&g| g > threshold).count();
    Ok(TprAtFar {
        tpr: accepted as f64 / genuine.len() as f64,
        threshold_exclusive: threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmcReport {
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    /// Queries without any matching gallery entry; excluded from the averages.
    pub excluded_queries: usize,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CMC rank-1 / rank-5 and mAP under cosine ranking (ties broken by gallery order).
pub fn cmc_and_map(
    query: &[Vec<f64>],
    gallery: &[Vec<f64>],
    query_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<CmcReport> {
    cmc_and_map_excluding(query, gallery, query_ids, gallery_ids, |_, _| false)
}

/// As [`cmc_and_map`], skipping gallery entries for which `exclude(query, gallery)` holds
/// (e.g. the query's own source image).
pub fn cmc_and_map_excluding(
    query: &[Vec<f64>],
    gallery: &[Vec<f64>],
    query_ids: &[usize],
    gallery_ids: &[usize],
    exclude: impl Fn(usize, usize) -> bool,
) -> Result<CmcReport> {
    if query.len() != query_ids.len() || gallery.len() != gallery_ids.len() {
        return Err(Error::contract("embeddings and ids are not aligned"));
    }
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut ap_sum = 0.0;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for (qi, q) in query.iter().enumerate() {
        let mut ranked: Vec<(usize, f64)> = gallery
            .iter()
            .enumerate()
            .filter(|(gi, _)| !exclude(qi, *gi))
            .map(|(gi, g)| (gi, cosine(q, g)))
            .collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let matches: Vec<bool> = ranked
            .iter()
            .map(|(gi, _)| gallery_ids[*gi] == query_ids[qi])
            .collect();
        let total = matches.iter().filter(|&&m| m).count();
        if total == 0 {
            excluded += 1;
            continue;
        }
        counted += 1;
        if matches.first() == Some(&true) {
            hits1 += 1;
        }
        if matches.iter().take(5).any(|&m| m) {
            hits5 += 1;
        }
        let mut found = 0usize;
        let mut ap = 0.0;
        for (r, &m) in matches.iter().enumerate() {
            if m {
                found += 1;
                ap += found as f64 / (r + 1) as f64;
            }
        }
        ap_sum += ap / total as f64;
    }
    if counted == 0 {
        return Err(Error::contract("no query has a matching gallery entry"));
    }
    let c = counted as f64;
    Ok(CmcReport {
        rank1: hits1 as f64 / c,
        rank5: hits5 as f64 / c,
        map: ap_sum / c,
        excluded_queries: excluded,
    })
}

/// Pairs of (probe row, reference row) with a target false-accept rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationProtocol {
    pub genuine_pairs: Vec<(usize, usize)>,
    pub impostor_pairs: Vec<(usize, usize)>,
    pub far_target: f64,
}

impl VerificationProtocol {
    /// All probe/reference pairs: same identity is genuine, different identity is impostor.
    /// `probe_self[i]` names the reference row holding probe `i`'s own source image, which
    /// never forms a pair.
    pub fn all_pairs(
        probe_ids: &[usize],
        reference_ids: &[usize],
        probe_self: &[Option<usize>],
        far_target: f64,
    ) -> Result<Self> {
        if probe_self.len() != probe_ids.len() {
            return Err(Error::contract("probe_self must align with probe ids"));
        }
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for (p, &pid) in probe_ids.iter().enumerate() {
            for (r, &rid) in reference_ids.iter().enumerate() {
                if probe_self[p] == Some(r) {
                    continue;
                }
                if pid == rid {
                    genuine.push((p, r));
                } else {
                    impostor.push((p, r));
                }
            }
        }
        let proto = Self {
            genuine_pairs: genuine,
            impostor_pairs: impostor,
            far_target,
        };
        proto.validate()?;
        Ok(proto)
    }

    pub fn validate(&self) -> Result<()> {
        if self.genuine_pairs.is_empty() || self.impostor_pairs.is_empty() {
            return Err(Error::contract(
                "verification protocol needs genuine and impostor pairs",
            ));
        }
        if !(self.far_target > 0.0 && self.far_target < 1.0) {
            return Err(Error::contract(format!(
                "far_target must lie in (0, 1), got {}",
                self.far_target
            )));
        }
        let g: std::collections::BTreeSet<_> = self.genuine_pairs.iter().collect();
        if self.impostor_pairs.iter().any(|p| g.contains(p)) {
            return Err(Error::contract("genuine and impostor pair lists overlap"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub index: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mse: MeanStd,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub perceptual: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBlock {
    pub tpr_at_far: f64,
    pub threshold: f64,
    /// TPR with the original images as probes, same protocol and model.
    pub baseline_tpr_at_far: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    pub excluded_queries: usize,
    /// Mean cosine between evaluation embeddings of each probe and its original.
    pub mean_feature_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolDescriptor {
    pub description: String,
    pub far_target: f64,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub eval_model: String,
    pub perceptual_model: String,
    pub original_digest: String,
    pub reconstructed_digest: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<PerImageMetrics>,
    pub aggregate: AggregateMetrics,
    pub accuracy: AccuracyBlock,
    pub protocol: ProtocolDescriptor,
    pub provenance: Provenance,
    /// Scores from a pluggable external scorer (e.g. a CLIP-style model), when configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_score: Option<MeanStd>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One CSV row per (image, metric).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["label", "index", "metric", "value"])?;
        for p in &self.per_image {
            for (name, v) in [
                ("mse", p.mse),
                ("psnr", p.psnr),
                ("ssim", p.ssim),
                ("perceptual", p.perceptual),
            ] {
                out.write_record([
                    self.provenance.label.as_str(),
                    &p.index.to_string(),
                    name,
                    &format!("{v}"),
                ])?;
            }
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Scores images against their originals with an external model (e.g. CLIP similarity).
pub trait ExternalScorer {
    fn name(&self) -> &str;
    fn score(&self, original: &ImageBatch, reconstructed: &ImageBatch) -> Result<Vec<f64>>;
}

/// Who the probes are and what they are verified against.
pub struct EvaluationSet<'a> {
    /// Original images used as verification/identification references.
    pub reference: &'a ImageBatch,
    pub reference_ids: &'a [usize],
    /// Identity of each probe row.
    pub probe_ids: &'a [usize],
    /// Reference row holding the probe's own original, excluded from pairs and rankings.
    pub probe_self: &'a [Option<usize>],
}

/// Fill a [`MetricsReport`] for `reconstructed` against the order-aligned `original`.
pub fn evaluate_reconstruction(
    original: &ImageBatch,
    reconstructed: &ImageBatch,
    set: &EvaluationSet<'_>,
    fs_eval: &dyn ServiceModel,
    perceptual_model: &dyn FeatureModel,
    protocol: &VerificationProtocol,
    label: &str,
) -> Result<MetricsReport> {
    check_pair(original, reconstructed)?;
    if set.probe_ids.len() != original.len() || set.probe_self.len() != original.len() {
        return Err(Error::contract("probe ids are not aligned with the images"));
    }
    if set.reference_ids.len() != set.reference.len() {
        return Err(Error::contract(
            "reference ids are not aligned with the reference images",
        ));
    }
    protocol.validate()?;
    let m = mse(original, reconstructed)?;
    let s = ssim(original, reconstructed)?;
    let p = perceptual_distance(original, reconstructed, perceptual_model)?;
    let per_image: Vec<PerImageMetrics> = (0..m.len())
        .map(|i| PerImageMetrics {
            index: i,
            mse: m[i],
            psnr: psnr_from_mse(m[i]),
            ssim: s[i],
            perceptual: p[i],
        })
        .collect();
    let col = |f: fn(&PerImageMetrics) -> f64| per_image.iter().map(f).collect::<Vec<_>>();
    let aggregate = AggregateMetrics {
        mse: MeanStd::of(&col(|r| r.mse)),
        psnr: MeanStd::of(&col(|r| r.psnr)),
        ssim: MeanStd::of(&col(|r| r.ssim)),
        perceptual: MeanStd::of(&col(|r| r.perceptual)),
    };

    let probes = embed(fs_eval, reconstructed)?.rows();
    let originals = embed(fs_eval, original)?.rows();
    let refs = embed(fs_eval, set.reference)?.rows();
    let scores = |rows: &[Vec<f64>], pairs: &[(usize, usize)]| -> Vec<f64> {
        pairs
            .iter()
            .map(|&(pi, ri)| cosine(&rows[pi], &refs[ri]))
            .collect()
    };
    let tpr = tpr_at_far(
        &scores(&probes, &protocol.genuine_pairs),
        &scores(&probes, &protocol.impostor_pairs),
        protocol.far_target,
    )?;
    let base = tpr_at_far(
        &scores(&originals, &protocol.genuine_pairs),
        &scores(&originals, &protocol.impostor_pairs),
        protocol.far_target,
    )?;
    let cmc = cmc_and_map_excluding(&probes, &refs, set.probe_ids, set.reference_ids, |q, g| {
        set.probe_self[q] == Some(g)
    })?;
    let mean_feature_cosine = probes
        .iter()
        .zip(&originals)
        .map(|(a, b)| cosine(a, b))
        .sum::<f64>()
        / probes.len().max(1) as f64;

    Ok(MetricsReport {
        per_image,
        aggregate,
        accuracy: AccuracyBlock {
            tpr_at_far: tpr.tpr,
            threshold: tpr.threshold_exclusive,
            baseline_tpr_at_far: base.tpr,
            rank1: cmc.rank1,
            rank5: cmc.rank5,
            map: cmc.map,
            excluded_queries: cmc.excluded_queries,
            mean_feature_cosine,
        },
        protocol: ProtocolDescriptor {
            description: "probe vs every other reference image; same identity genuine, different identity impostor; cosine similarity".into(),
            far_target: protocol.far_target,
            genuine_pairs: protocol.genuine_pairs.len(),
            impostor_pairs: protocol.impostor_pairs.len(),
        },
        provenance: Provenance {
            eval_model: fs_eval.id().to_string(),
            perceptual_model: perceptual_model.id().to_string(),
            original_digest: original.digest(),
            reconstructed_digest: reconstructed.digest(),
            label: label.to_string(),
        },
        external_score: None,
    })
}

/// Attach an external scorer's mean ± std to a report.
pub fn attach_external_score(
    report: &mut MetricsReport,
    scorer: &dyn ExternalScorer,
    original: &ImageBatch,
    reconstructed: &ImageBatch,
) -> Result<()> {
    let v = scorer.score(original, reconstructed)?;
    report.external_score = Some(MeanStd::of(&v));
    Ok(())
}
