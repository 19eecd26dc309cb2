//! Independent oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::PathBuf;

use avih::augment::AugmentationPolicy;
use avih::error::Result;
use avih::harness::RunConfig;
use avih::losses::{self, GanConvention, IdentityDistance, LossWeights, PatchSpec};
use avih::metrics;
use avih::models::ServiceModel;
use avih::rng;
use avih::ImageBatch;
use rand::Rng;
use tch::{Device, Kind, Tensor};

/// `f(x) = normalize(tanh(W · vec(x)))`, smooth and nonlinear, in double precision.
pub struct TanhService {
    weight: Tensor,
}

impl TanhService {
    pub fn new(inputs: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "tanh-service");
        let scale = 2.0 / (inputs as f64).sqrt();
        let w: Vec<f64> = (0..inputs * dim)
            .map(|_| r.gen_range(-1.0..1.0) * scale)
            .collect();
        Self {
            weight: Tensor::from_slice(&w).reshape([dim as i64, inputs as i64]),
        }
    }
}

impl ServiceModel for TanhService {
    fn id(&self) -> &str {
        "tanh-service"
    }

    fn embedding_dim(&self) -> usize {
        self.weight.size()[0] as usize
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let e = x.flatten(1, -1).matmul(&self.weight.tr()).tanh();
        let n = e.norm_scalaropt_dim(2.0, [1i64].as_slice(), true);
        Ok(e / n)
    }
}

pub fn rand_double(shape: &[i64], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "fd-input");
    let n: i64 = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..0.95)).collect();
    Tensor::from_slice(&v).reshape(shape)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

/// Relative error bound: 1e-4, loosened to 1e-2 where the analytic gradient is below 1e-6.
/// Differences under 1e-9 are treated as round-off of two near-zero values.
pub fn grad_ok(g: f64, fd: f64) -> (bool, f64) {
    let diff = (g - fd).abs();
    let rel = diff / g.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
    let tol = if g.abs() < 1e-6 { 1e-2 } else { 1e-4 };
    (
        rel <= tol || diff <= 1e-9,
        if diff <= 1e-9 { 0.0 } else { rel },
    )
}

/// Compare autograd against central differences (step 1e-3) at every coordinate of `x`.
pub fn check_gradient(name: &str, x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> GradCheck {
    let h = 1e-3;
    let xv = x.detach().copy().set_requires_grad(true);
    let loss = f(&xv);
    loss.backward();
    let grad: Vec<f64> = Vec::try_from(xv.grad().flatten(0, -1)).unwrap();
    let base: Vec<f64> = Vec::try_from(x.flatten(0, -1)).unwrap();
    let shape = x.size();
    let eval =
        |v: &[f64]| tch::no_grad(|| f(&Tensor::from_slice(v).reshape(&shape)).double_value(&[]));
    let mut max_rel = 0.0f64;
    let mut failures = 0;
    for j in 0..base.len() {
        let mut p = base.clone();
        p[j] += h;
        let mut m = base.clone();
        m[j] -= h;
        let fd = (eval(&p) - eval(&m)) / (2.0 * h);
        let (ok, rel) = grad_ok(grad[j], fd);
        max_rel = max_rel.max(rel);
        if !ok {
            failures += 1;
        }
    }
    GradCheck {
        name: name.to_string(),
        coordinates: base.len(),
        max_rel_err: max_rel,
        failures,
    }
}

/// Every differentiable loss of the crate on 1×3×8×8 double inputs.
pub fn loss_gradient_suite() -> Vec<GradCheck> {
    let shape = [1i64, 3, 8, 8];
    let x = rand_double(&shape, 1);
    let other = rand_double(&shape, 2);
    let fs = TanhService::new(192, 6, 3);
    let patch = PatchSpec::new(4, 4, 2);
    let key = |t: &Tensor| (t * 0.7).sin() * 0.5 + 0.25;
    let policy = AugmentationPolicy::default();
    let mut out = vec![
        check_gradient("task_loss", &x, |t| {
            losses::task_loss(&fs, &other, t).unwrap()
        }),
        check_gradient("difference_loss", &x, |t| {
            losses::difference_loss(&other, t).unwrap()
        }),
        check_gradient("recovery_loss", &x, |t| {
            losses::recovery_loss(&other, t).unwrap()
        }),
        check_gradient("variance_consistency_loss", &x, |t| {
            losses::variance_consistency_loss(t, &patch).unwrap()
        }),
        check_gradient("variance_consistency_loss 1x1 stride 1", &x, |t| {
            losses::variance_consistency_loss(t, &PatchSpec::new(1, 1, 1)).unwrap()
        }),
        check_gradient("avih_objective", &x, |t| {
            losses::avih_objective(&fs, &key(t), &other, t, &LossWeights::default(), &patch)
                .unwrap()
        }),
        check_gradient("identity_loss", &x, |t| {
            losses::identity_loss(&fs, t, &other).unwrap()
        }),
        check_gradient("identity_loss cosine", &x, |t| {
            let targets = fs.forward(&other).unwrap();
            losses::identity_loss_with_targets(&fs, t, &targets, IdentityDistance::Cosine).unwrap()
        }),
        check_gradient("augmented_identity_loss", &x, |t| {
            let mut r = rng::stream(11, "fd-augment");
            losses::augmented_identity_loss(&fs, t, &other, &policy, &mut r).unwrap()
        }),
    ];
    for conv in [GanConvention::Standard, GanConvention::Printed] {
        out.push(check_gradient(
            &format!("generator_gan_term {conv:?}"),
            &x,
            |t| losses::generator_gan_term(&(t * 4.0 - 2.0).sigmoid(), conv).unwrap(),
        ));
        out.push(check_gradient(
            &format!("attacker_generator_loss {conv:?}"),
            &x,
            |t| {
                let id = losses::identity_loss(&fs, t, &other).unwrap();
                losses::attacker_generator_loss(&(t * 4.0 - 2.0).sigmoid(), &id, 30.0, conv)
                    .unwrap()
            },
        ));
        out.push(check_gradient(
            &format!("discriminator_loss {conv:?}"),
            &x,
            |t| {
                let fake = (t * 4.0 - 2.0).sigmoid();
                let real = (t.flip([3]) * -3.0 + 1.5).sigmoid();
                losses::discriminator_loss(&fake, &real, conv).unwrap()
            },
        ));
    }
    out
}

/// Naive VC loss: enumerate every patch, sum its pixels per channel, population variance.
pub fn vc_naive(img: &[f64], c: usize, hh: usize, ww: usize, spec: &PatchSpec) -> f64 {
    let mut total = 0.0;
    for ch in 0..c {
        let mut sums = Vec::new();
        let mut y = 0;
        while y + spec.height <= hh {
            let mut x = 0;
            while x + spec.width <= ww {
                let mut s = 0.0;
                for dy in 0..spec.height {
                    for dx in 0..spec.width {
                        s += img[ch * hh * ww + (y + dy) * ww + x + dx];
                    }
                }
                sums.push(s);
                x += spec.stride;
            }
            y += spec.stride;
        }
        let n = sums.len() as f64;
        let mean = sums.iter().sum::<f64>() / n;
        total += sums.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    }
    total
}

#[derive(Debug, Clone)]
pub struct VcSweep {
    pub configurations: usize,
    pub max_abs_err: f64,
    /// Constant images whose loss was not exactly zero.
    pub nonzero_constants: usize,
}

/// All (h, w, s) in {1..4}³ on 6×6 images against the naive enumeration, plus constant images.
pub fn vc_sweep() -> VcSweep {
    let (c, hh, ww) = (3usize, 6usize, 6usize);
    let mut max_err = 0.0f64;
    let mut configs = 0;
    let mut nonzero = 0;
    let constants = [0.0, 0.1, 0.3, 1.0 / 3.0, 0.5, 0.7, 0.99, 1.0];
    for h in 1..=4 {
        for w in 1..=4 {
            for s in 1..=4 {
                let spec = PatchSpec::new(h, w, s);
                if spec.validate_for(hh, ww).is_err() {
                    continue;
                }
                configs += 1;
                for seed in 0..3u64 {
                    let x = rand_double(&[2, 3, 6, 6], 100 + seed);
                    let got: Vec<f64> =
                        Vec::try_from(losses::variance_consistency_per_image(&x, &spec).unwrap())
                            .unwrap();
                    let v: Vec<f64> = Vec::try_from(x.flatten(0, -1)).unwrap();
                    for (i, g) in got.iter().enumerate() {
                        let want =
                            vc_naive(&v[i * c * hh * ww..(i + 1) * c * hh * ww], c, hh, ww, &spec);
                        max_err = max_err.max((g - want).abs());
                    }
                }
                for &k in &constants {
                    for kind in [Kind::Double, Kind::Float] {
                        let x = Tensor::full([1, 3, 6, 6], k, (kind, Device::Cpu));
                        if losses::variance_consistency_loss(&x, &spec)
                            .unwrap()
                            .double_value(&[])
                            != 0.0
                        {
                            nonzero += 1;
                        }
                    }
                }
            }
        }
    }
    VcSweep {
        configurations: configs,
        max_abs_err: max_err,
        nonzero_constants: nonzero,
    }
}

/// Exhaustive scan: the best TPR over every threshold (accept `>= t` or `> t` for every observed
/// score `t`, and reject-all) whose empirical FAR stays within `far`.
pub fn tpr_scan_oracle(genuine: &[f64], impostor: &[f64], far: f64) -> f64 {
    let frac = |v: &[f64], acc: &dyn Fn(f64) -> bool| {
        v.iter().filter(|&&s| acc(s)).count() as f64 / v.len() as f64
    };
    let mut best = 0.0f64;
    for &t in genuine.iter().chain(impostor) {
        let rules: [&dyn Fn(f64) -> bool; 2] = [&|s| s >= t, &|s| s > t];
        for rule in rules {
            if frac(impostor, rule) <= far {
                best = best.max(frac(genuine, rule));
            }
        }
    }
    best
}

fn random_scores(r: &mut rng::Rng, n: usize, shift: f64, quantize: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = r.gen_range(-1.0..1.0) + shift;
            if quantize {
                (v * 5.0).round() / 5.0
            } else {
                v
            }
        })
        .collect()
}

/// Number of random instances where `tpr_at_far` differs from the scan oracle.
pub fn tpr_oracle_mismatches(instances: usize) -> usize {
    let mut r = rng::stream(21, "tpr-oracle");
    let mut bad = 0;
    for i in 0..instances {
        let ng = r.gen_range(1..40);
        let ni = r.gen_range(1..200);
        let far = [0.01, 0.05, 0.1, 0.3, 0.5][i % 5];
        let q = i % 3 == 0;
        let genuine = random_scores(&mut r, ng, 0.5, q);
        let impostor = random_scores(&mut r, ni, 0.0, q);
        let got = metrics::tpr_at_far(&genuine, &impostor, far).unwrap().tpr;
        if (got - tpr_scan_oracle(&genuine, &impostor, far)).abs() > 1e-12 {
            bad += 1;
        }
    }
    bad
}

/// Brute-force CMC/mAP: the rank of a gallery entry is one plus the number of entries that
/// beat it (higher cosine, or equal cosine and lower index).
pub fn cmc_oracle(
    query: &[Vec<f64>],
    gallery: &[Vec<f64>],
    qid: &[usize],
    gid: &[usize],
) -> Option<(f64, f64, f64)> {
    let (mut r1, mut r5, mut map, mut n) = (0.0, 0.0, 0.0, 0.0);
    for (qi, q) in query.iter().enumerate() {
        let scores: Vec<f64> = gallery.iter().map(|g| metrics::cosine(q, g)).collect();
        let rank = |gi: usize| {
            1 + (0..gallery.len())
                .filter(|&o| scores[o] > scores[gi] || (scores[o] == scores[gi] && o < gi))
                .count()
        };
        let matches: Vec<usize> = (0..gallery.len()).filter(|&g| gid[g] == qid[qi]).collect();
        if matches.is_empty() {
            continue;
        }
        n += 1.0;
        let ranks: Vec<usize> = matches.iter().map(|&g| rank(g)).collect();
        let best = *ranks.iter().min().unwrap();
        r1 += f64::from(best <= 1);
        r5 += f64::from(best <= 5);
        let ap: f64 = ranks
            .iter()
            .map(|&rk| ranks.iter().filter(|&&o| o <= rk).count() as f64 / rk as f64)
            .sum::<f64>()
            / matches.len() as f64;
        map += ap;
    }
    (n > 0.0).then(|| (r1 / n, r5 / n, map / n))
}

/// Number of random instances where `cmc_and_map` differs from the ranking oracle.
pub fn cmc_oracle_mismatches(instances: usize) -> usize {
    let mut r = rng::stream(22, "cmc-oracle");
    let mut bad = 0;
    for i in 0..instances {
        let nq = r.gen_range(1..12);
        let ng = r.gen_range(5..25);
        let d = r.gen_range(2..6);
        let ids = r.gen_range(2..6);
        let q = i % 4 == 0;
        let mut vecs = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| random_scores(&mut r, d, 0.0, q)).collect()
        };
        let query = vecs(nq);
        let gallery = vecs(ng);
        let qid: Vec<usize> = (0..nq).map(|_| r.gen_range(0..ids)).collect();
        let gid: Vec<usize> = (0..ng).map(|k| k % ids).collect();
        let got = metrics::cmc_and_map(&query, &gallery, &qid, &gid)
            .ok()
            .map(|c| (c.rank1, c.rank5, c.map));
        let want = cmc_oracle(&query, &gallery, &qid, &gid);
        let same = match (got, want) {
            (Some(a), Some(b)) => {
                (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12 && (a.2 - b.2).abs() < 1e-12
            }
            (None, None) => true,
            _ => false,
        };
        if !same {
            bad += 1;
        }
    }
    bad
}

/// Largest deviation of SSIM from `(2ab + C1) / (a² + b² + C1)` on constant image pairs.
pub fn ssim_constant_max_err() -> f64 {
    let c1 = (metrics::SSIM_K1 * 1.0f64).powi(2);
    let levels = [0.0f32, 0.05, 0.25, 0.5, 0.8, 1.0];
    let mut max_err = 0.0f64;
    for &a in &levels {
        for &b in &levels {
            let x = ImageBatch::from_vec(vec![a; 3 * 16 * 16], [1, 3, 16, 16]).unwrap();
            let y = ImageBatch::from_vec(vec![b; 3 * 16 * 16], [1, 3, 16, 16]).unwrap();
            let (a, b) = (f64::from(a), f64::from(b));
            let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
            max_err = max_err.max((metrics::ssim(&x, &y).unwrap()[0] - want).abs());
        }
    }
    max_err
}

/// Small but complete configuration for the reproducibility check.
pub fn tiny_config(out: PathBuf) -> RunConfig {
    let overrides: Vec<(String, String)> = [
        ("image_size", "16"),
        ("gallery.identities", "6"),
        ("gallery.images_per_identity", "2"),
        ("auxiliary.identities", "4"),
        ("service_data.identities", "6"),
        ("service_data.images_per_identity", "4"),
        ("key_private.identities", "4"),
        ("key_private.images_per_identity", "2"),
        ("random_baseline.identities", "6"),
        ("service_training.max_epochs", "2"),
        ("service_training.min_epochs", "1"),
        ("key_training.rounds", "1"),
        ("key_training.steps_per_round", "5"),
        ("encryption.steps", "10"),
        ("attack.steps", "5"),
        ("attack.batch_size", "4"),
        ("fractions", "[0.5]"),
        ("ablation", "null"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let mut cfg = RunConfig::default()
        .with_overrides(&overrides)
        .expect("tiny config");
    cfg.output_dir = out;
    cfg
}
