//! Training losses.
//!
//! Every function works on `candle` tensors of any float dtype and is
//! differentiable, so the same code serves training (f32) and gradient
//! checks (f64). Probability maps are `[B, K, H, W]` or `[K, H, W]` with the
//! class axis first after the batch axis; class 1 is the lesion class.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error, Result};

/// Weights of the translation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gan: f64,
    /// Image self-reconstruction.
    pub image: f64,
    /// Content-code reconstruction.
    pub content: f64,
    /// Style-code reconstruction.
    pub style: f64,
    pub cycle: f64,
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gan: 1.0,
            image: 10.0,
            content: 1.0,
            style: 1.0,
            cycle: 10.0,
            semantic: 10.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            gan: 0.0,
            image: 0.0,
            content: 0.0,
            style: 0.0,
            cycle: 0.0,
            semantic: 0.0,
        }
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("gan", self.gan),
            ("image", self.image),
            ("content", self.content),
            ("style", self.style),
            ("cycle", self.cycle),
            ("semantic", self.semantic),
        ]
    }

    /// Collects every negative or non-finite weight, keyed under `prefix`.
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        self.named()
            .iter()
            .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
            .map(|(k, v)| ConfigIssue {
                key: format!("{prefix}.{k}"),
                message: format!("must be a finite nonnegative number, got {v}"),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues("loss_weights");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

/// Generator side of the adversarial game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// Minimize `log(1 - D(fake))`.
    #[default]
    Saturating,
    /// Minimize `-log D(fake)`.
    NonSaturating,
}

/// Discriminator loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    #[default]
    Log,
    LeastSquares,
}

fn check_scores(scores: &Tensor) -> Result<()> {
    let flat = scores.to_dtype(DType::F64)?.flatten_all()?;
    let lo = flat.min(0)?.to_scalar::<f64>()?;
    let hi = flat.max(0)?.to_scalar::<f64>()?;
    if !(lo > 0.0 && hi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "discriminator scores must lie in (0, 1), got range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// `E[log D(real)] + E[log(1 - D(fake))]`, the value the discriminator maximizes.
pub fn gan_objective(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    check_scores(real)?;
    check_scores(fake)?;
    let a = real.log()?.mean_all()?;
    let b = fake.affine(-1.0, 1.0)?.log()?.mean_all()?;
    Ok((a + b)?)
}

/// Discriminator loss to minimize: the negated adversarial objective.
pub fn gan_loss_d(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    Ok(gan_objective(real, fake)?.neg()?)
}

pub fn gan_loss_g(fake: &Tensor, form: GeneratorLoss) -> Result<Tensor> {
    check_scores(fake)?;
    Ok(match form {
        GeneratorLoss::Saturating => fake.affine(-1.0, 1.0)?.log()?.mean_all()?,
        GeneratorLoss::NonSaturating => fake.log()?.mean_all()?.neg()?,
    })
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?;
    Ok((x.relu()? + (tail + 1.0)?.log()?)?)
}

/// [`gan_loss_d`] evaluated from pre-sigmoid logits.
pub fn gan_loss_d_logits(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    // -log sigmoid(r) = softplus(-r); -log(1 - sigmoid(f)) = softplus(f)
    let a = softplus(&real_logits.neg()?)?.mean_all()?;
    let b = softplus(fake_logits)?.mean_all()?;
    Ok((a + b)?)
}

/// [`gan_loss_g`] evaluated from pre-sigmoid logits.
pub fn gan_loss_g_logits(fake_logits: &Tensor, form: GeneratorLoss) -> Result<Tensor> {
    Ok(match form {
        GeneratorLoss::Saturating => softplus(fake_logits)?.mean_all()?.neg()?,
        GeneratorLoss::NonSaturating => softplus(&fake_logits.neg()?)?.mean_all()?,
    })
}

/// Least-squares discriminator loss on scores: `E[(D(real) - 1)^2] + E[D(fake)^2]`.
pub fn lsgan_loss_d(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    Ok((real.affine(1.0, -1.0)?.sqr()?.mean_all()? + fake.sqr()?.mean_all()?)?)
}

pub fn lsgan_loss_g(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.affine(1.0, -1.0)?.sqr()?.mean_all()?)
}

/// Mean absolute difference.
pub fn recon_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "L1 operands differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

pub const DICE_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceOptions {
    pub smoothing: f64,
    /// Drop pixels whose label column is all zero from the denominator.
    pub ignore_unlabeled: bool,
}

impl Default for DiceOptions {
    fn default() -> Self {
        Self {
            smoothing: DICE_SMOOTHING,
            ignore_unlabeled: false,
        }
    }
}

fn class_axis(t: &Tensor) -> Result<usize> {
    match t.rank() {
        3 => Ok(0),
        4 => Ok(1),
        r => Err(Error::Shape(format!(
            "probability maps must be [K,H,W] or [B,K,H,W], got rank {r}"
        ))),
    }
}

/// Negative soft dice on class 1: `-(2 sum P*Y + eps) / (sum (P + Y) + eps)`,
/// with all sums running over every pixel of the batch.
pub fn soft_dice_loss(p: &Tensor, y: &Tensor, opts: DiceOptions) -> Result<Tensor> {
    if p.dims() != y.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and labels {:?} differ in shape",
            p.dims(),
            y.dims()
        )));
    }
    let axis = class_axis(p)?;
    if p.dims()[axis] < 2 {
        return Err(Error::Shape("need at least two classes".into()));
    }
    let p1 = p.narrow(axis, 1, 1)?;
    let y1 = y.narrow(axis, 1, 1)?;
    let inter = (&p1 * &y1)?.sum_all()?;
    let p_mass = if opts.ignore_unlabeled {
        let labeled = y.sum_keepdim(axis)?;
        (&p1 * labeled)?.sum_all()?
    } else {
        p1.sum_all()?
    };
    let denom = ((p_mass + y1.sum_all()?)? + opts.smoothing)?;
    let num = ((inter * 2.0)? + opts.smoothing)?;
    Ok((num / denom)?.neg()?)
}

/// Semantic cycle-consistency: soft dice of the frozen source segmenter's
/// prediction on cycle-reconstructed source images against the source labels.
pub fn semantic_cycle_loss(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    soft_dice_loss(p, y, DiceOptions::default())
}

/// Segmentation loss for ground-truth or pseudo masks.
pub fn dice_seg_loss(p: &Tensor, y: &Tensor, opts: DiceOptions) -> Result<Tensor> {
    soft_dice_loss(p, y, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyReduction {
    /// Mean over pixels (and batch); lies in `[0, 1]`.
    #[default]
    Mean,
    /// Sum over the pixels of each image, averaged over the batch; lies in `[0, H*W]`.
    Sum,
}

const LOG_FLOOR: f64 = 1e-30;

/// Normalized Shannon entropy `-(1 / log K) sum_k P_k log P_k`, with `0 log 0 = 0`.
pub fn entropy_loss(p: &Tensor, reduction: EntropyReduction) -> Result<Tensor> {
    let axis = class_axis(p)?;
    let k = p.dims()[axis];
    if k < 2 {
        return Err(Error::Shape("entropy needs at least two classes".into()));
    }
    let plogp = (p * p.clamp(LOG_FLOOR, 1.0)?.log()?)?;
    let per_pixel = (plogp.sum(axis)? * (-1.0 / (k as f64).ln()))?;
    Ok(match reduction {
        EntropyReduction::Mean => per_pixel.mean_all()?,
        EntropyReduction::Sum => {
            if p.rank() == 4 {
                per_pixel.sum((1, 2))?.mean_all()?
            } else {
                per_pixel.sum_all()?
            }
        }
    })
}

/// The eleven scalar terms of the translation objective.
#[derive(Debug, Clone)]
pub struct TranslationTerms {
    pub gan_source: Tensor,
    pub gan_target: Tensor,
    pub recon_source: Tensor,
    pub recon_target: Tensor,
    pub content_source: Tensor,
    pub content_target: Tensor,
    pub style_source: Tensor,
    pub style_target: Tensor,
    pub cycle_source: Tensor,
    pub cycle_target: Tensor,
    pub semantic: Tensor,
}

impl TranslationTerms {
    pub const NAMES: [&'static str; 11] = [
        "gan_source",
        "gan_target",
        "recon_source",
        "recon_target",
        "content_source",
        "content_target",
        "style_source",
        "style_target",
        "cycle_source",
        "cycle_target",
        "semantic",
    ];

    pub fn named(&self) -> [(&'static str, &Tensor); 11] {
        [
            (Self::NAMES[0], &self.gan_source),
            (Self::NAMES[1], &self.gan_target),
            (Self::NAMES[2], &self.recon_source),
            (Self::NAMES[3], &self.recon_target),
            (Self::NAMES[4], &self.content_source),
            (Self::NAMES[5], &self.content_target),
            (Self::NAMES[6], &self.style_source),
            (Self::NAMES[7], &self.style_target),
            (Self::NAMES[8], &self.cycle_source),
            (Self::NAMES[9], &self.cycle_target),
            (Self::NAMES[10], &self.semantic),
        ]
    }

    /// Scalar values in [`Self::NAMES`] order.
    pub fn values(&self) -> Result<Vec<f64>> {
        self.named()
            .iter()
            .map(|(_, t)| Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?))
            .collect()
    }
}

/// Weighted sum of all translation terms, as seen by the generators.
///
/// The adversarial terms here are the generator losses; the discriminators
/// optimize the opposite side of the game in a separate step.
pub fn translation_total(t: &TranslationTerms, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    let pair = |a: &Tensor, b: &Tensor, weight: f64| -> Result<Tensor> { Ok(((a + b)? * weight)?) };
    let total = (pair(&t.gan_source, &t.gan_target, w.gan)?
        + pair(&t.recon_source, &t.recon_target, w.image)?)?;
    let total = (total + pair(&t.content_source, &t.content_target, w.content)?)?;
    let total = (total + pair(&t.style_source, &t.style_target, w.style)?)?;
    let total = (total + pair(&t.cycle_source, &t.cycle_target, w.cycle)?)?;
    Ok((total + (&t.semantic * w.semantic)?)?)
}

/// `L_seg + L_ent`; the entropy term is absent when no unlabeled target batch
/// contributes.
pub fn segmentation_total(seg: &Tensor, ent: Option<&Tensor>) -> Result<Tensor> {
    Ok(match ent {
        Some(e) => (seg + e)?,
        None => seg.clone(),
    })
}
