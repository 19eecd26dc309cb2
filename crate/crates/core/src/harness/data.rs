//! Synthetic identity datasets and directory ingestion.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::AccessLog;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ImageBatch, LabeledImages};

/// Parametric textured-shape renderer. An identity fixes background, shape, colors and
/// texture; each image of that identity jitters position, scale, rotation and illumination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub identities: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Identity names are `id{first_identity + i:04}`, so disjoint sets can share a seed.
    #[serde(default)]
    pub first_identity: usize,
    /// Scales all intra-identity variation.
    #[serde(default = "one")]
    pub jitter: f64,
}

fn one() -> f64 {
    1.0
}

impl SyntheticDatasetSpec {
    pub fn new(
        identities: usize,
        images_per_identity: usize,
        image_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            identities,
            images_per_identity,
            image_size,
            seed,
            first_identity: 0,
            jitter: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::contract(
                "a synthetic dataset needs at least 2 identities",
            ));
        }
        if self.images_per_identity == 0 || self.image_size < 8 {
            return Err(Error::contract(
                "need at least one image per identity and size >= 8",
            ));
        }
        if !(0.0..=2.0).contains(&self.jitter) {
            return Err(Error::contract("jitter must lie in [0, 2]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

#[derive(Debug, Clone)]
struct Identity {
    background: [f64; 3],
    background_tilt: [f64; 2],
    shape: Shape,
    color: [f64; 3],
    stripe_freq: f64,
    stripe_angle: f64,
    accent: [f64; 3],
    accent_pos: [f64; 2],
}

fn color(r: &mut rng::Rng) -> [f64; 3] {
    [
        r.gen_range(0.05..0.95),
        r.gen_range(0.05..0.95),
        r.gen_range(0.05..0.95),
    ]
}

fn identity(seed: u64, global: usize) -> Identity {
    let mut r = rng::stream(seed, &format!("synthetic-identity:{global}"));
    let background = color(&mut r);
    let mut c = color(&mut r);
    // Keep the figure visible against the background.
    while c
        .iter()
        .zip(&background)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        < 0.6
    {
        c = color(&mut r);
    }
    Identity {
        background,
        background_tilt: [r.gen_range(-0.25..0.25), r.gen_range(-0.25..0.25)],
        shape: [
            Shape::Disk,
            Shape::Square,
            Shape::Triangle,
            Shape::Ring,
            Shape::Cross,
        ][r.gen_range(0..5)],
        color: c,
        stripe_freq: r.gen_range(0.0..4.0),
        stripe_angle: r.gen_range(0.0..std::f64::consts::PI),
        accent: color(&mut r),
        accent_pos: [r.gen_range(0.15..0.85), r.gen_range(0.15..0.85)],
    }
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    // 1 inside (x < edge), 0 outside, one-pixel soft boundary in normalized units.
    ((edge - x) * 32.0 + 0.5).clamp(0.0, 1.0)
}

fn coverage(shape: Shape, u: f64, v: f64) -> f64 {
    // (u, v) in the shape's local frame, nominal extent [-1, 1].
    match shape {
        Shape::Disk => smoothstep(1.0, (u * u + v * v).sqrt()),
        Shape::Square => smoothstep(0.85, u.abs().max(v.abs())),
        Shape::Triangle => {
            // Vertices (0, -1), (±0.9, 0.7).
            let d = (v - 0.7).max((1.7 * u.abs() - 0.9 * (v + 1.0)) / 1.924);
            smoothstep(0.0, d)
        }
        Shape::Ring => {
            let r = (u * u + v * v).sqrt();
            smoothstep(1.0, r) * (1.0 - smoothstep(0.55, r))
        }
        Shape::Cross => smoothstep(
            0.3,
            u.abs().max(v.abs() * 0.3).min(v.abs().max(u.abs() * 0.3)),
        ),
    }
}

fn render(id: &Identity, side: usize, r: &mut rng::Rng, jitter: f64) -> Vec<f32> {
    let j = jitter;
    let cx = 0.5 + j * r.gen_range(-0.08..0.08);
    let cy = 0.5 + j * r.gen_range(-0.08..0.08);
    let scale = 0.3 * (1.0 + j * r.gen_range(-0.12..0.12));
    let rot: f64 = j * r.gen_range(-0.3..0.3);
    let gain = 1.0 + j * r.gen_range(-0.12..0.12);
    let light = [j * r.gen_range(-0.15..0.15), j * r.gen_range(-0.15..0.15)];
    let noise = Normal::new(0.0, 0.015 * j.max(1e-9)).expect("valid sigma");
    let (sr, cr) = rot.sin_cos();
    let (sa, ca) = id.stripe_angle.sin_cos();
    let mut out = vec![0f32; 3 * side * side];
    for yi in 0..side {
        for xi in 0..side {
            let x = (xi as f64 + 0.5) / side as f64;
            let y = (yi as f64 + 0.5) / side as f64;
            let dx = (x - cx) / scale;
            let dy = (y - cy) / scale;
            let u = cr * dx + sr * dy;
            let v = -sr * dx + cr * dy;
            let m = coverage(id.shape, u, v);
            let stripe =
                1.0 + 0.18 * (std::f64::consts::TAU * id.stripe_freq * (ca * u + sa * v)).sin();
            let ad = ((x - id.accent_pos[0]).powi(2) + (y - id.accent_pos[1]).powi(2)).sqrt();
            let a = smoothstep(0.09, ad) * (1.0 - m);
            let shade = 1.0 + id.background_tilt[0] * (x - 0.5) + id.background_tilt[1] * (y - 0.5);
            let illum = gain * (1.0 + light[0] * (x - 0.5) + light[1] * (y - 0.5));
            for c in 0..3 {
                let bg = id.background[c] * shade;
                let fg = id.color[c] * stripe;
                let val = ((1.0 - m) * (1.0 - a) * bg + m * fg + a * id.accent[c]) * illum
                    + noise.sample(r);
                out[c * side * side + yi * side + xi] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Render the dataset in memory.
pub fn synthesize(spec: &SyntheticDatasetSpec) -> Result<LabeledImages> {
    spec.validate()?;
    let side = spec.image_size;
    let n = spec.identities * spec.images_per_identity;
    let mut values = Vec::with_capacity(n * 3 * side * side);
    let mut labels = Vec::with_capacity(n);
    let mut names = Vec::with_capacity(spec.identities);
    for i in 0..spec.identities {
        let global = spec.first_identity + i;
        let id = identity(spec.seed, global);
        names.push(format!("id{global:04}"));
        for k in 0..spec.images_per_identity {
            let mut r = rng::stream(spec.seed, &format!("synthetic-image:{global}:{k}"));
            values.extend(render(&id, side, &mut r, spec.jitter));
            labels.push(i);
        }
    }
    LabeledImages::new(
        ImageBatch::from_vec(values, [n, 3, side, side])?,
        labels,
        names,
    )
}

/// Write `<dir>/<id>/<idx>.png` and return the rendered set.
pub fn generate_synthetic_dataset(
    spec: &SyntheticDatasetSpec,
    dir: &Path,
) -> Result<LabeledImages> {
    let set = synthesize(spec)?;
    let mut counters = vec![0usize; set.num_identities()];
    for (row, &label) in set.labels.iter().enumerate() {
        let sub = dir.join(&set.identity_names[label]);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        save_png(
            &set.images.image(row),
            &sub.join(format!("{:03}.png", counters[label])),
        )?;
        counters[label] += 1;
    }
    Ok(set)
}

/// Quantize one image (batch of 1) to 8 bits and write it as PNG.
pub fn save_png(img: &ImageBatch, path: &Path) -> Result<()> {
    let [n, c, h, w] = img.shape();
    if n != 1 || c != 3 {
        return Err(Error::contract(format!(
            "save_png expects 1×3×H×W, got {:?}",
            img.shape()
        )));
    }
    let v = img.clamp_unit().to_vec();
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| (v[ch * h * w + y as usize * w + x as usize] * 255.0).round() as u8;
        Rgb([at(0), at(1), at(2)])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Decode an image file to a 1×3×size×size batch in `[0, 1]`.
pub fn load_image(path: &Path, size: usize, log: &AccessLog) -> Result<ImageBatch> {
    log.record(path);
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let mut v = vec![0f32; 3 * size * size];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            v[c * size * size + y as usize * size + x as usize] = p[c] as f32 / 255.0;
        }
    }
    ImageBatch::from_vec(v, [1, 3, size, size])
}

/// Result of ingesting a directory; unreadable files are listed, not fatal.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub set: LabeledImages,
    pub files: Vec<PathBuf>,
    pub skipped: Vec<(PathBuf, String)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Read a `<dir>/<identity>/<file>.png|jpg` tree in lexicographic order.
pub fn ingest_gallery(dir: &Path, image_size: usize, log: &AccessLog) -> Result<Ingested> {
    if image_size == 0 {
        return Err(Error::contract("image_size must be positive"));
    }
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    for sub in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = sub
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let label = names.len();
        let mut any = false;
        for f in sorted_entries(&sub)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
        {
            match load_image(&f, image_size, log) {
                Ok(img) => {
                    parts.push(img);
                    labels.push(label);
                    files.push(f);
                    any = true;
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped.push((f, e.to_string()));
                }
            }
        }
        if any {
            names.push(name);
        }
    }
    if parts.is_empty() {
        return Err(Error::contract(format!(
            "no readable images under {}",
            dir.display()
        )));
    }
    let set = LabeledImages::new(ImageBatch::concat(&parts)?, labels, names)?;
    Ok(Ingested {
        set,
        files,
        skipped,
    })
}
