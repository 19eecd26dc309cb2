//! Tables, image grids and plots from a finished (or partial) run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::config::{fraction_tag, AblationCell};
use super::io::{self, AccessLog};
use super::pipeline::{
    attack_dir, baseline_dir, evaluation_dir, load_manifest, load_report, paths,
};
use crate::attack::KeyShareSplit;
use crate::error::{Error, Result};
use crate::metrics::{MeanStd, MetricsReport};
use crate::tensor::ImageBatch;

/// One table row: a probe kind (baseline or attack cell), aggregated over the seeds found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub fraction: Option<f64>,
    pub gan_loss: Option<bool>,
    pub aug_id_loss: Option<bool>,
    pub seeds: Vec<u64>,
    pub mse: MeanStd,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub perceptual: MeanStd,
    pub tpr_at_far: MeanStd,
    pub rank1: MeanStd,
    pub rank5: MeanStd,
    pub map: MeanStd,
}

/// Seeds with at least one evaluation directory under `root/evaluate`.
pub fn seeds_present(root: &Path) -> Vec<u64> {
    let mut seeds: Vec<u64> = std::fs::read_dir(root.join("evaluate"))
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix('s')?.split('_').next()?.parse().ok()
        })
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
}

fn row(
    label: String,
    fraction: Option<f64>,
    cell: Option<AblationCell>,
    reports: &[(u64, MetricsReport)],
) -> SummaryRow {
    let col = |f: fn(&MetricsReport) -> f64| {
        MeanStd::of(&reports.iter().map(|(_, r)| f(r)).collect::<Vec<_>>())
    };
    SummaryRow {
        label,
        fraction,
        gan_loss: cell.map(|c| c.gan_loss),
        aug_id_loss: cell.map(|c| c.aug_id_loss),
        seeds: reports.iter().map(|(s, _)| *s).collect(),
        mse: col(|r| r.aggregate.mse.mean),
        psnr: col(|r| r.aggregate.psnr.mean),
        ssim: col(|r| r.aggregate.ssim.mean),
        perceptual: col(|r| r.aggregate.perceptual.mean),
        tpr_at_far: col(|r| r.accuracy.tpr_at_far),
        rank1: col(|r| r.accuracy.rank1),
        rank5: col(|r| r.accuracy.rank5),
        map: col(|r| r.accuracy.map),
    }
}

/// Baseline rows then one row per configured attack run; runs with no report on disk are
/// listed in the second return value instead of failing.
pub fn summarize(root: &Path) -> Result<(Vec<SummaryRow>, Vec<String>)> {
    let manifest = load_manifest(root)?;
    let cfg = &manifest.config;
    let seeds = seeds_present(root);
    let mut rows = Vec::new();
    let mut absent = Vec::new();
    for kind in ["original", "protected", "random", "key_recovery"] {
        let reports: Vec<(u64, MetricsReport)> = seeds
            .iter()
            .filter_map(|&s| {
                load_report(root, &format!("{}/{kind}", baseline_dir(s)))
                    .ok()
                    .map(|r| (s, r))
            })
            .collect();
        if reports.is_empty() {
            absent.push(kind.to_string());
        } else {
            rows.push(row(kind.to_string(), None, None, &reports));
        }
    }
    for (fraction, cell) in cfg.attack_runs() {
        let label = format!("attack {} {}", fraction_tag(fraction), cell.tag());
        let reports: Vec<(u64, MetricsReport)> = seeds
            .iter()
            .filter_map(|&s| {
                load_report(root, &evaluation_dir(s, fraction, cell))
                    .ok()
                    .map(|r| (s, r))
            })
            .collect();
        if reports.is_empty() {
            absent.push(label);
        } else {
            rows.push(row(label, Some(fraction), Some(cell), &reports));
        }
    }
    Ok((rows, absent))
}

fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "label",
        "fraction",
        "gan_loss",
        "aug_id_loss",
        "seeds",
        "mse",
        "psnr",
        "psnr_std",
        "ssim",
        "perceptual",
        "perceptual_std",
        "tpr_at_far",
        "tpr_std",
        "rank1",
        "rank5",
        "map",
    ])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        w.write_record([
            r.label.clone(),
            opt(r.fraction.map(|f| f.to_string())),
            opt(r.gan_loss.map(|b| b.to_string())),
            opt(r.aug_id_loss.map(|b| b.to_string())),
            r.seeds.len().to_string(),
            format!("{:.6}", r.mse.mean),
            format!("{:.4}", r.psnr.mean),
            format!("{:.4}", r.psnr.std),
            format!("{:.4}", r.ssim.mean),
            format!("{:.4}", r.perceptual.mean),
            format!("{:.4}", r.perceptual.std),
            format!("{:.4}", r.tpr_at_far.mean),
            format!("{:.4}", r.tpr_at_far.std),
            format!("{:.4}", r.rank1.mean),
            format!("{:.4}", r.rank5.mean),
            format!("{:.4}", r.map.mean),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows of the figure: original, encrypted, key recovery, then one per attack fraction
/// (full attack). Columns are the first `columns` held-out images of `seed`.
pub fn image_grid(root: &Path, seed: u64, columns: usize) -> Result<RgbImage> {
    let manifest = load_manifest(root)?;
    let cfg = &manifest.config;
    let log = AccessLog::default();
    let size = cfg.image_size;
    let split: Option<KeyShareSplit> = cfg.fractions.first().and_then(|&f| {
        io::read_json(
            &root
                .join(attack_dir(seed, f, AblationCell::FULL))
                .join("split.json"),
            &log,
        )
        .ok()
    });
    let eval_idx: Vec<usize> = split
        .as_ref()
        .map(|s| s.eval.iter().copied().take(columns).collect())
        .unwrap_or_default();
    let take = |p: PathBuf, rows: &[usize]| -> Option<ImageBatch> {
        io::read_images(&p, &log).ok().map(|b| b.select(rows))
    };
    let first: Vec<usize> = (0..eval_idx.len()).collect();
    let mut grid_rows: Vec<Option<ImageBatch>> = vec![
        take(
            root.join(paths::dataset("gallery")).join("images.npy"),
            &eval_idx,
        ),
        take(root.join(paths::ENCRYPTED), &eval_idx),
        take(
            root.join("evaluate/encryption/key_recovered.npy"),
            &eval_idx,
        ),
    ];
    for &f in &cfg.fractions {
        grid_rows.push(take(
            root.join(attack_dir(seed, f, AblationCell::FULL))
                .join("recon_eval.npy"),
            &first,
        ));
    }
    let cols = columns.max(1);
    let pad = 2usize;
    let cell = size + pad;
    let mut img: RgbImage = ImageBuffer::from_pixel(
        (cols * cell + pad) as u32,
        (grid_rows.len() * cell + pad) as u32,
        Rgb([255, 255, 255]),
    );
    for (ri, row) in grid_rows.iter().enumerate() {
        for ci in 0..cols {
            let x0 = pad + ci * cell;
            let y0 = pad + ri * cell;
            let data = row
                .as_ref()
                .filter(|b| ci < b.len())
                .map(|b| b.image(ci).clamp_unit().to_vec());
            for y in 0..size {
                for x in 0..size {
                    let px = match &data {
                        Some(v) => {
                            let at = |c: usize| {
                                (v[c * size * size + y * size + x] * 255.0).round() as u8
                            };
                            Rgb([at(0), at(1), at(2)])
                        }
                        // Absent artifact.
                        None => Rgb([160, 160, 160]),
                    };
                    img.put_pixel((x0 + x) as u32, (y0 + y) as u32, px);
                }
            }
        }
    }
    Ok(img)
}

/// Line plot of mean PSNR and TPR@FAR against the key-share fraction.
pub fn plot_svg(points: &[(f64, f64, f64)]) -> String {
    let (w, h, m) = (480.0, 300.0, 50.0);
    let xs: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let (xmin, xmax) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let span = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| m + (x.log10() - xmin) / span * (w - 2.0 * m);
    let pmax = points.iter().map(|p| p.1).fold(1.0f64, f64::max) * 1.1;
    let py = |v: f64, top: f64| h - m - v / top * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#,
        h - m
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">key-share fraction</text>"#,
        w / 2.0,
        h - 12.0
    );
    for &(f, _, _) in points {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{f}</text>"#,
            px(f),
            h - m + 16.0
        );
    }
    let series = [
        ("PSNR (dB)", 1usize, pmax, "#1f77b4"),
        ("TPR@FAR", 2, 1.0, "#d62728"),
    ];
    for (i, (name, idx, top, color)) in series.iter().enumerate() {
        let pts: Vec<String> = points
            .iter()
            .map(|p| {
                let v = if *idx == 1 { p.1 } else { p.2 };
                format!("{:.1},{:.1}", px(p.0), py(v, *top))
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name} (max {top:.1})</text>"#,
            m + 8.0,
            m - 20.0 + 14.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `report/` under the run directory and return the files written.
pub fn emit_report(root: &Path) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(root)?;
    let out = root.join("report");
    io::ensure_dir(&out)?;
    let (rows, absent) = summarize(root)?;
    let mut written = Vec::new();

    let p = out.join("summary.csv");
    write_summary_csv(&p, &rows)?;
    written.push(p);
    let p = out.join("summary.json");
    io::write_json(&p, &serde_json::json!({ "rows": rows, "absent": absent }))?;
    written.push(p);

    let p = out.join("per_image.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["seed", "label", "index", "metric", "value"])?;
    for seed in seeds_present(root) {
        for (fraction, cell) in manifest.config.attack_runs() {
            if let Ok(r) = load_report(root, &evaluation_dir(seed, fraction, cell)) {
                for img in &r.per_image {
                    for (name, v) in [
                        ("mse", img.mse),
                        ("psnr", img.psnr),
                        ("ssim", img.ssim),
                        ("perceptual", img.perceptual),
                    ] {
                        w.write_record([
                            seed.to_string(),
                            r.provenance.label.clone(),
                            img.index.to_string(),
                            name.into(),
                            v.to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    written.push(p);

    let seed = seeds_present(root)
        .first()
        .copied()
        .unwrap_or(manifest.config.seeds.attack);
    let p = out.join("grid.png");
    image_grid(root, seed, 8)?
        .save(&p)
        .map_err(|e| Error::Image {
            path: p.clone(),
            message: e.to_string(),
        })?;
    written.push(p);

    let mut points = Vec::new();
    let by_fraction: BTreeMap<String, &SummaryRow> = rows
        .iter()
        .filter(|r| r.gan_loss == Some(true) && r.aug_id_loss == Some(true))
        .map(|r| (fraction_tag(r.fraction.unwrap_or(0.0)), r))
        .collect();
    for &f in &manifest.config.fractions {
        if let Some(r) = by_fraction.get(&fraction_tag(f)) {
            points.push((f, r.psnr.mean, r.tpr_at_far.mean));
        }
    }
    let p = out.join("plot.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["fraction", "psnr", "tpr_at_far"])?;
    for (f, ps, t) in &points {
        w.write_record([f.to_string(), ps.to_string(), t.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    written.push(p);
    let p = out.join("plot.svg");
    std::fs::write(&p, plot_svg(&points)).map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(written)
}
