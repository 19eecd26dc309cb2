//! Differentiable loss terms for encryption and for the reconstruction attack.
//!
//! Pairwise losses reduce each image to a Euclidean norm over its flattened pixels (or
//! embedding) and average those norms over the batch. Every function returns a 0-d tensor
//! that carries gradients to its image arguments.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::augment::{augment_batch, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::models::ServiceModel;
use crate::rng::Rng;
use crate::tensor::{ensure_rank4, ensure_same_shape};

/// Overlapping patch grid for the variance-consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl PatchSpec {
    pub fn new(height: usize, width: usize, stride: usize) -> Self {
        Self {
            height,
            width,
            stride,
        }
    }

    /// Square patches with 50 % overlap: stride `max(1, size / 2)`.
    pub fn square(size: usize) -> Self {
        Self {
            height: size,
            width: size,
            stride: (size / 2).max(1),
        }
    }

    /// Number of full patches on the stride grid of an `h×w` image (0 when none fit).
    pub fn patch_count(&self, h: usize, w: usize) -> usize {
        if self.height == 0
            || self.width == 0
            || self.stride == 0
            || self.height > h
            || self.width > w
        {
            return 0;
        }
        ((h - self.height) / self.stride + 1) * ((w - self.width) / self.stride + 1)
    }

    pub fn validate_for(&self, h: usize, w: usize) -> Result<usize> {
        if self.height == 0 || self.width == 0 || self.stride == 0 {
            return Err(Error::contract(format!(
                "patch spec {self:?} must have positive sizes and stride"
            )));
        }
        if self.height > h || self.width > w {
            return Err(Error::contract(format!(
                "patch {}×{} larger than image {h}×{w}",
                self.height, self.width
            )));
        }
        let n = self.patch_count(h, w);
        if n < 2 {
            return Err(Error::contract(format!(
                "patch grid of {self:?} on {h}×{w} has {n} patch(es); need at least 2"
            )));
        }
        Ok(n)
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self::square(4)
    }
}

/// Weights of the encryption objective and of the attacker's identity term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the (subtracted) difference loss.
    pub difference: f64,
    pub variance_consistency: f64,
    pub recovery: f64,
    /// Weight of the (augmented) identity loss in the attacker objective.
    pub attack_identity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            difference: 0.03,
            variance_consistency: 3.0,
            recovery: 0.5,
            attack_identity: 30.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.difference,
            self.variance_consistency,
            self.recovery,
            self.attack_identity,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::contract(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-image Euclidean distance between flattened rows, shape `[B]`.
pub fn per_image_l2(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_shape(a, b)?;
    let d = (a - b).flatten(1, -1);
    Ok(d.norm_scalaropt_dim(2.0, [1i64].as_slice(), false))
}

fn batch_mean(per_image: Tensor) -> Tensor {
    per_image.mean(per_image.kind())
}

pub fn task_loss_per_image(fs: &dyn ServiceModel, x: &Tensor, x_prime: &Tensor) -> Result<Tensor> {
    ensure_same_shape(x, x_prime)?;
    per_image_l2(&fs.forward(x)?, &fs.forward(x_prime)?)
}

/// Mean over the batch of `‖f_s(x_i) − f_s(x'_i)‖₂`.
pub fn task_loss(fs: &dyn ServiceModel, x: &Tensor, x_prime: &Tensor) -> Result<Tensor> {
    Ok(batch_mean(task_loss_per_image(fs, x, x_prime)?))
}

/// Mean over the batch of `‖x_i − x'_i‖₂`.
pub fn difference_loss(x: &Tensor, x_prime: &Tensor) -> Result<Tensor> {
    Ok(batch_mean(per_image_l2(x, x_prime)?))
}

/// Mean over the batch of `‖x_i − f_k(x'_i)‖₂`; `recovered` is computed by the caller.
pub fn recovery_loss(x: &Tensor, recovered: &Tensor) -> Result<Tensor> {
    Ok(batch_mean(per_image_l2(x, recovered)?))
}

/// Per-image variance-consistency loss, shape `[B]`.
pub fn variance_consistency_per_image(x_prime: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
    let (_, c, h, w) = ensure_rank4(x_prime)?;
    if c != 3 {
        return Err(Error::contract(format!(
            "variance-consistency loss needs 3 channels, got {c}"
        )));
    }
    spec.validate_for(h as usize, w as usize)?;
    let sums = x_prime.avg_pool2d(
        [spec.height as i64, spec.width as i64],
        [spec.stride as i64, spec.stride as i64],
        [0, 0],
        false,
        true,
        Some(1),
    );
    let sums = sums.flatten(2, -1);
    // Variance is shift invariant; centring on the first patch makes equal sums give exactly 0.
    let centered = &sums - sums.narrow(2, 0, 1);
    let per_channel = centered.var_correction([2i64].as_slice(), 0, false);
    Ok(per_channel.sum_dim_intlist([1i64].as_slice(), false, None::<Kind>))
}

/// Sum over r/g/b of the population variance of per-patch pixel sums, averaged over the batch.
pub fn variance_consistency_loss(x_prime: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
    Ok(batch_mean(variance_consistency_per_image(x_prime, spec)?))
}

/// Per-image components of the encryption objective, each of shape `[B]`.
pub struct AvihComponents {
    pub task: Tensor,
    pub difference: Tensor,
    pub variance_consistency: Tensor,
    pub recovery: Tensor,
}

impl AvihComponents {
    pub fn compute(
        fs: &dyn ServiceModel,
        fk_output: &Tensor,
        x: &Tensor,
        x_prime: &Tensor,
        spec: &PatchSpec,
    ) -> Result<Self> {
        ensure_same_shape(x, fk_output)?;
        Ok(Self {
            task: task_loss_per_image(fs, x, x_prime)?,
            difference: per_image_l2(x, x_prime)?,
            variance_consistency: variance_consistency_per_image(x_prime, spec)?,
            recovery: per_image_l2(x, fk_output)?,
        })
    }

    /// `L_t − λ_d·L_d + λ_v·L_v + λ_r·L_r` per image, shape `[B]`.
    pub fn objective(&self, weights: &LossWeights) -> Tensor {
        &self.task - &self.difference * weights.difference
            + &self.variance_consistency * weights.variance_consistency
            + &self.recovery * weights.recovery
    }
}

/// Encryption objective; the difference term enters with a minus sign so it is maximized.
pub fn avih_objective(
    fs: &dyn ServiceModel,
    fk_output: &Tensor,
    x: &Tensor,
    x_prime: &Tensor,
    weights: &LossWeights,
    spec: &PatchSpec,
) -> Result<Tensor> {
    weights.validate()?;
    Ok(batch_mean(
        AvihComponents::compute(fs, fk_output, x, x_prime, spec)?.objective(weights),
    ))
}

/// Distance between embeddings inside the identity loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityDistance {
    /// Euclidean norm of the embedding difference.
    #[default]
    L2,
    /// `1 − cos` between embeddings.
    Cosine,
}

fn embedding_distance(a: &Tensor, b: &Tensor, distance: IdentityDistance) -> Result<Tensor> {
    match distance {
        IdentityDistance::L2 => per_image_l2(a, b),
        IdentityDistance::Cosine => {
            ensure_same_shape(a, b)?;
            Ok(Tensor::cosine_similarity(a, b, 1, 1e-8).neg() + 1.0)
        }
    }
}

/// Identity loss with an explicit distance and precomputed `f_s(x')` targets.
pub fn identity_loss_with_targets(
    fs: &dyn ServiceModel,
    ak_output: &Tensor,
    targets: &Tensor,
    distance: IdentityDistance,
) -> Result<Tensor> {
    Ok(batch_mean(embedding_distance(
        &fs.forward(ak_output)?,
        targets,
        distance,
    )?))
}

fn targets_for(fs: &dyn ServiceModel, x_prime: &Tensor) -> Result<Tensor> {
    tch::no_grad(|| fs.forward(x_prime))
}

/// Mean over the batch of `‖f_s(a_k(x'_i)) − f_s(x'_i)‖₂`.
pub fn identity_loss(
    fs: &dyn ServiceModel,
    ak_output: &Tensor,
    x_prime: &Tensor,
) -> Result<Tensor> {
    ensure_same_shape(ak_output, x_prime)?;
    identity_loss_with_targets(
        fs,
        ak_output,
        &targets_for(fs, x_prime)?,
        IdentityDistance::L2,
    )
}

/// Identity loss with an independently sampled flip/pad/crop applied to each reconstruction
/// before embedding. The encrypted side is never augmented.
pub fn augmented_identity_loss(
    fs: &dyn ServiceModel,
    ak_output: &Tensor,
    x_prime: &Tensor,
    policy: &AugmentationPolicy,
    rng: &mut Rng,
) -> Result<Tensor> {
    ensure_same_shape(ak_output, x_prime)?;
    augmented_identity_loss_with_targets(
        fs,
        ak_output,
        &targets_for(fs, x_prime)?,
        policy,
        rng,
        IdentityDistance::L2,
    )
}

pub fn augmented_identity_loss_with_targets(
    fs: &dyn ServiceModel,
    ak_output: &Tensor,
    targets: &Tensor,
    policy: &AugmentationPolicy,
    rng: &mut Rng,
    distance: IdentityDistance,
) -> Result<Tensor> {
    policy.validate()?;
    let augmented = augment_batch(ak_output, policy, rng)?;
    if augmented.size() != ak_output.size() {
        return Err(Error::ShapeMismatch {
            expected: ak_output.size(),
            actual: augmented.size(),
        });
    }
    identity_loss_with_targets(fs, &augmented, targets, distance)
}

/// Label convention of the adversarial game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanConvention {
    /// Discriminator outputs 1 for auxiliary (real) images and 0 for reconstructions; the
    /// generator minimizes `−mean log D(fake)`.
    #[default]
    Standard,
    /// Signs exactly as printed: generator term `mean log D(fake)`, discriminator loss
    /// `−mean log D(fake) − mean log(1 − D(real))`.
    Printed,
}

fn check_probabilities(name: &str, p: &Tensor) -> Result<()> {
    if p.numel() == 0 {
        return Err(Error::contract(format!("{name} is empty")));
    }
    let lo = p.detach().min().double_value(&[]);
    let hi = p.detach().max().double_value(&[]);
    if !(lo > 0.0 && hi < 1.0) {
        return Err(Error::contract(format!(
            "{name} must lie in (0, 1), got range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Adversarial term of the generator loss alone.
pub fn generator_gan_term(disc_output: &Tensor, convention: GanConvention) -> Result<Tensor> {
    check_probabilities("discriminator output", disc_output)?;
    let m = disc_output.log().mean(disc_output.kind());
    Ok(match convention {
        GanConvention::Printed => m,
        GanConvention::Standard => m.neg(),
    })
}

/// GAN term over all patch positions and batch rows plus `identity_weight · L_I`.
pub fn attacker_generator_loss(
    disc_output: &Tensor,
    aug_id_loss: &Tensor,
    identity_weight: f64,
    convention: GanConvention,
) -> Result<Tensor> {
    if !(identity_weight.is_finite() && identity_weight >= 0.0) {
        return Err(Error::contract(format!(
            "identity weight must be nonnegative, got {identity_weight}"
        )));
    }
    Ok(generator_gan_term(disc_output, convention)? + aug_id_loss * identity_weight)
}

/// Discriminator loss on probability maps of reconstructions (`fake`) and auxiliary images (`real`).
pub fn discriminator_loss(
    disc_on_fake: &Tensor,
    disc_on_real: &Tensor,
    convention: GanConvention,
) -> Result<Tensor> {
    check_probabilities("discriminator output on reconstructions", disc_on_fake)?;
    check_probabilities("discriminator output on auxiliary images", disc_on_real)?;
    let k = disc_on_fake.kind();
    Ok(match convention {
        GanConvention::Printed => {
            disc_on_fake.log().mean(k).neg() - (disc_on_real.neg() + 1.0).log().mean(k)
        }
        GanConvention::Standard => {
            disc_on_real.log().mean(k).neg() - (disc_on_fake.neg() + 1.0).log().mean(k)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::toy::{ChannelMeanService, LinearService, MeanPoolService};
    use crate::rng::stream;
    use crate::tensor::{scalar, to_f64_vec};
    use tch::Device;

    fn rand64(shape: &[i64], seed: i64) -> Tensor {
        tch::manual_seed(seed);
        Tensor::rand(shape, (Kind::Double, Device::Cpu))
    }

    #[test]
    fn pairwise_losses_vanish_on_equal_inputs() {
        let x = rand64(&[2, 3, 6, 6], 0);
        let fs = LinearService::new([3, 6, 6], 5, 1, Kind::Double);
        assert_eq!(scalar(&task_loss(&fs, &x, &x).unwrap()), 0.0);
        assert_eq!(scalar(&difference_loss(&x, &x).unwrap()), 0.0);
        assert_eq!(scalar(&recovery_loss(&x, &x).unwrap()), 0.0);
        assert_eq!(scalar(&identity_loss(&fs, &x, &x).unwrap()), 0.0);
        let y = rand64(&[2, 3, 6, 7], 1);
        assert!(matches!(
            difference_loss(&x, &y),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(task_loss(&fs, &x, &y).is_err());
    }

    #[test]
    fn analytic_small_cases() {
        let zeros = Tensor::zeros([1, 3, 4, 4], (Kind::Double, Device::Cpu));
        let ones = Tensor::ones([1, 3, 4, 4], (Kind::Double, Device::Cpu));
        assert!((scalar(&task_loss(&MeanPoolService, &zeros, &ones).unwrap()) - 1.0).abs() < 1e-12);

        let a = Tensor::from_slice(&[0.2f64]).reshape([1, 1, 1, 1]);
        let b = Tensor::from_slice(&[0.7f64]).reshape([1, 1, 1, 1]);
        assert!((scalar(&difference_loss(&a, &b).unwrap()) - 0.5).abs() < 1e-12);

        let x = rand64(&[1, 3, 2, 2], 3);
        let r = &x + 0.1;
        assert!((scalar(&recovery_loss(&x, &r).unwrap()) - 0.1 * 12f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn task_loss_matches_hand_rolled_linear_algebra() {
        let fs = LinearService::new([3, 4, 4], 6, 9, Kind::Double);
        let x = rand64(&[2, 3, 4, 4], 10);
        let xp = rand64(&[2, 3, 4, 4], 11);
        let w = fs.weights();
        let (vx, vp) = (to_f64_vec(&x), to_f64_vec(&xp));
        let n = 48;
        let mut expected = 0.0;
        for i in 0..2 {
            let mut sq = 0.0;
            for d in 0..6 {
                let mut e = 0.0;
                for j in 0..n {
                    e += w[d * n + j] * (vx[i * n + j] - vp[i * n + j]);
                }
                sq += e * e;
            }
            expected += sq.sqrt() / 2.0;
        }
        assert!((scalar(&task_loss(&fs, &x, &xp).unwrap()) - expected).abs() < 1e-10);
    }

    #[test]
    fn difference_loss_matches_elementwise_oracle() {
        let x = rand64(&[3, 3, 5, 5], 20);
        let y = rand64(&[3, 3, 5, 5], 21);
        let (vx, vy) = (to_f64_vec(&x), to_f64_vec(&y));
        let per = 75;
        let expected: f64 = (0..3)
            .map(|i| {
                (0..per)
                    .map(|j| (vx[i * per + j] - vy[i * per + j]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / 3.0;
        assert!((scalar(&difference_loss(&x, &y).unwrap()) - expected).abs() < 1e-12);
        assert!((scalar(&recovery_loss(&x, &y).unwrap()) - expected).abs() < 1e-12);
    }

    #[test]
    fn vc_hand_enumerated_patches() {
        // Channel r = {0,0,1,1}, g constant, b = {0,1,0,1}; 1×1 patches, stride 1, N = 4.
        let v = [
            0.0, 0.0, 1.0, 1.0, 0.3, 0.3, 0.3, 0.3, 0.0, 1.0, 0.0, 1.0f64,
        ];
        let x = Tensor::from_slice(&v).reshape([1, 3, 2, 2]);
        let got = scalar(&variance_consistency_loss(&x, &PatchSpec::new(1, 1, 1)).unwrap());
        assert!((got - 0.5).abs() < 1e-12, "{got}");
    }

    #[test]
    fn vc_constant_image_is_exactly_zero() {
        let x = Tensor::full([2, 3, 8, 8], 0.37, (Kind::Float, Device::Cpu));
        for spec in [
            PatchSpec::square(4),
            PatchSpec::new(2, 3, 1),
            PatchSpec::new(1, 1, 2),
        ] {
            assert_eq!(scalar(&variance_consistency_loss(&x, &spec).unwrap()), 0.0);
        }
    }

    #[test]
    fn vc_degenerate_grid_and_channel_errors() {
        let x = Tensor::rand([1, 3, 4, 4], (Kind::Float, Device::Cpu));
        assert!(variance_consistency_loss(&x, &PatchSpec::new(4, 4, 1)).is_err());
        assert!(variance_consistency_loss(&x, &PatchSpec::new(5, 1, 1)).is_err());
        let g = Tensor::rand([1, 1, 4, 4], (Kind::Float, Device::Cpu));
        assert!(variance_consistency_loss(&g, &PatchSpec::square(2)).is_err());
        assert_eq!(PatchSpec::square(4).stride, 2);
        assert_eq!(PatchSpec::square(1).stride, 1);
    }

    #[test]
    fn objective_sign_and_weighted_sum() {
        let fs = LinearService::new([3, 8, 8], 4, 2, Kind::Double);
        let x = rand64(&[2, 3, 8, 8], 30);
        let xp = rand64(&[2, 3, 8, 8], 31);
        let fk = rand64(&[2, 3, 8, 8], 32);
        let spec = PatchSpec::square(4);

        let zero = LossWeights {
            difference: 0.0,
            variance_consistency: 0.0,
            recovery: 0.0,
            attack_identity: 0.0,
        };
        assert_eq!(
            scalar(&avih_objective(&fs, &x, &x, &x, &zero, &spec).unwrap()),
            0.0
        );

        let only_d = LossWeights {
            difference: 1.0,
            ..zero
        };
        let o = scalar(&avih_objective(&fs, &x, &x, &xp, &only_d, &spec).unwrap());
        let lt = scalar(&task_loss(&fs, &x, &xp).unwrap());
        assert!((o - (lt - scalar(&difference_loss(&x, &xp).unwrap()))).abs() < 1e-12);
        let o = scalar(&avih_objective(&MeanPoolService, &x, &x, &xp, &only_d, &spec).unwrap())
            - scalar(&task_loss(&MeanPoolService, &x, &xp).unwrap());
        assert!(o < 0.0);

        let w = LossWeights::default();
        let expected = lt - 0.03 * scalar(&difference_loss(&x, &xp).unwrap())
            + 3.0 * scalar(&variance_consistency_loss(&xp, &spec).unwrap())
            + 0.5 * scalar(&recovery_loss(&x, &fk).unwrap());
        assert!(
            (scalar(&avih_objective(&fs, &fk, &x, &xp, &w, &spec).unwrap()) - expected).abs()
                < 1e-10
        );
    }

    #[test]
    fn identity_loss_is_batch_permutation_invariant() {
        let fs = LinearService::new([3, 4, 4], 3, 4, Kind::Double);
        let a = rand64(&[4, 3, 4, 4], 40);
        let xp = rand64(&[4, 3, 4, 4], 41);
        let perm = Tensor::from_slice(&[2i64, 0, 3, 1]);
        let l1 = scalar(&identity_loss(&fs, &a, &xp).unwrap());
        let l2 = scalar(
            &identity_loss(&fs, &a.index_select(0, &perm), &xp.index_select(0, &perm)).unwrap(),
        );
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn augmented_identity_degenerate_policies() {
        let fs = LinearService::new([3, 6, 6], 3, 5, Kind::Double);
        let a = rand64(&[3, 3, 6, 6], 50);
        let xp = rand64(&[3, 3, 6, 6], 51);
        let plain = scalar(&identity_loss(&fs, &a, &xp).unwrap());
        let aug = scalar(
            &augmented_identity_loss(
                &fs,
                &a,
                &xp,
                &AugmentationPolicy::identity(),
                &mut stream(1, "a"),
            )
            .unwrap(),
        );
        assert!((plain - aug).abs() < 1e-12);

        let r = stream(9, "det");
        let v1 = scalar(
            &augmented_identity_loss(&fs, &a, &xp, &AugmentationPolicy::default(), &mut r.clone())
                .unwrap(),
        );
        let v2 = scalar(
            &augmented_identity_loss(&fs, &a, &xp, &AugmentationPolicy::default(), &mut r.clone())
                .unwrap(),
        );
        assert_eq!(v1.to_bits(), v2.to_bits());

        // Mirror-symmetric reconstructions under a flip-invariant service model.
        let sym = &a + a.flip([3]);
        let cm = ChannelMeanService::new(4, 3);
        let plain = scalar(&identity_loss(&cm, &sym, &xp).unwrap());
        let flipped = scalar(
            &augmented_identity_loss(
                &cm,
                &sym,
                &xp,
                &AugmentationPolicy::flip_only(),
                &mut stream(2, "f"),
            )
            .unwrap(),
        );
        assert!((plain - flipped).abs() < 1e-12);

        let uncropped = AugmentationPolicy {
            crop_to_original: false,
            ..Default::default()
        };
        assert!(augmented_identity_loss(&fs, &a, &xp, &uncropped, &mut stream(0, "u")).is_err());
    }

    #[test]
    fn gan_losses_analytic_values() {
        let half = Tensor::full([2, 1, 3, 3], 0.5, (Kind::Double, Device::Cpu));
        let zero = Tensor::zeros([], (Kind::Double, Device::Cpu));
        let g =
            scalar(&attacker_generator_loss(&half, &zero, 0.0, GanConvention::Printed).unwrap());
        assert!((g - 0.5f64.ln()).abs() < 1e-12);
        let g =
            scalar(&attacker_generator_loss(&half, &zero, 0.0, GanConvention::Standard).unwrap());
        assert!((g + 0.5f64.ln()).abs() < 1e-12);

        let d = scalar(&discriminator_loss(&half, &half, GanConvention::Printed).unwrap());
        assert!((d + 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((d - 1.3863).abs() < 1e-4);

        let near_one = Tensor::full([1, 1, 2, 2], 1.0 - 1e-9, (Kind::Double, Device::Cpu));
        let near_zero = Tensor::full([1, 1, 2, 2], 1e-9, (Kind::Double, Device::Cpu));
        let d = scalar(&discriminator_loss(&near_one, &near_zero, GanConvention::Printed).unwrap());
        assert!(d > 0.0 && d < 1e-8);
        let d =
            scalar(&discriminator_loss(&near_zero, &near_one, GanConvention::Standard).unwrap());
        assert!(d > 0.0 && d < 1e-8);

        let id = Tensor::from_slice(&[0.25f64]).reshape([]);
        let tiny = Tensor::full([1, 1, 2, 2], 1.0 - 1e-15, (Kind::Double, Device::Cpu));
        let g = scalar(&attacker_generator_loss(&tiny, &id, 30.0, GanConvention::Printed).unwrap());
        assert!((g - 30.0 * 0.25).abs() < 1e-12);

        let bad = Tensor::full([1, 1, 2, 2], 1.0, (Kind::Double, Device::Cpu));
        assert!(discriminator_loss(&bad, &half, GanConvention::Standard).is_err());
        assert!(attacker_generator_loss(&bad, &zero, 1.0, GanConvention::Printed).is_err());
    }

    #[test]
    fn gan_losses_match_mean_of_logs_oracle() {
        let f = rand64(&[2, 1, 3, 3], 60) * 0.98 + 0.01;
        let r = rand64(&[2, 1, 3, 3], 61) * 0.98 + 0.01;
        let (vf, vr) = (to_f64_vec(&f), to_f64_vec(&r));
        let n = vf.len() as f64;
        let mean_log_f = vf.iter().map(|p| p.ln()).sum::<f64>() / n;
        let mean_log1m_r = vr.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / n;
        let l = Tensor::from_slice(&[0.4f64]).reshape([]);
        let g = scalar(&attacker_generator_loss(&f, &l, 2.0, GanConvention::Printed).unwrap());
        assert!((g - (mean_log_f + 0.8)).abs() < 1e-12);
        let d = scalar(&discriminator_loss(&f, &r, GanConvention::Printed).unwrap());
        assert!((d - (-mean_log_f - mean_log1m_r)).abs() < 1e-12);
    }
}
