//! Pseudo-labels for target images.
//!
//! A target image is translated into the source domain, the frozen source
//! segmenter scores the translation, and each pixel whose winning class
//! probability exceeds the threshold receives that class as a one-hot label.
//! Every other pixel gets an all-zero column.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Tensor3};
use crate::error::{Error, Result};
use crate::nn::device;
use crate::segmentation::Segmenter;
use crate::translation::{Direction, TranslationModel};

pub const DEFAULT_THRESHOLD_GRID: [f64; 4] = [0.6, 0.7, 0.8, 0.9];

/// Provenance recorded with a pseudo-labelled sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoInfo {
    pub threshold: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    /// `[C, H, W]`; each pixel column is one-hot or all zero.
    pub mask: Tensor3,
    pub threshold: f64,
    /// Fraction of pixels carrying a label.
    pub coverage: f64,
}

impl PseudoMask {
    pub fn info(&self) -> PseudoInfo {
        PseudoInfo {
            threshold: self.threshold,
            coverage: self.coverage,
        }
    }
}

/// Style code used for the target-to-source translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StylePolicy {
    /// The prior mean.
    #[default]
    Zero,
    /// One prior draw per image.
    Random,
    /// Soft predictions averaged over `draws` prior draws.
    Average { draws: usize },
}

/// How the pseudo-label threshold is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Fixed {
        value: f64,
    },
    /// Smallest grid value whose class-balanced accuracy on labelled pixels
    /// reaches `min_accuracy` on validation data; the most accurate value if
    /// none does.
    Validate {
        grid: Vec<f64>,
        min_accuracy: f64,
    },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Validate {
            grid: DEFAULT_THRESHOLD_GRID.to_vec(),
            min_accuracy: 0.95,
        }
    }
}

pub fn check_threshold(threshold: f64, num_classes: usize) -> Result<()> {
    let lo = 1.0 / num_classes as f64;
    if !(threshold > lo && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} must lie in the open interval (1/{num_classes}, 1)"
        )));
    }
    Ok(())
}

/// Pixel `c` is labelled iff `c` is the unique argmax and `P[c] > threshold`.
pub fn pseudo_label(p: &Tensor3, threshold: f64) -> Result<PseudoMask> {
    let [k, h, w] = p.shape();
    check_threshold(threshold, k)?;
    let hw = h * w;
    let v = p.data();
    let mut mask = Tensor3::zeros([k, h, w]);
    let mut labelled = 0usize;
    for px in 0..hw {
        let mut best = 0;
        let mut tied = false;
        for c in 1..k {
            let (a, b) = (v[c * hw + px], v[best * hw + px]);
            if a > b {
                best = c;
                tied = false;
            } else if a == b {
                tied = true;
            }
        }
        if !tied && f64::from(v[best * hw + px]) > threshold {
            mask.data_mut()[best * hw + px] = 1.0;
            labelled += 1;
        }
    }
    Ok(PseudoMask {
        mask,
        threshold,
        coverage: labelled as f64 / hw as f64,
    })
}

/// Splits a `[B, K, H, W]` tensor into per-sample maps.
pub fn split_batch(t: &Tensor) -> Result<Vec<Tensor3>> {
    let b = t.dims4()?.0;
    (0..b).map(|i| Tensor3::from_tensor(&t.get(i)?)).collect()
}

/// Source segmenter probabilities on target images translated to the source
/// domain. `images` is `[B, C_T, H, W]`.
pub fn predict_through_source(
    images: &Tensor,
    tm: &TranslationModel,
    seg_s: &Segmenter,
    policy: StylePolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let b = images.dims4()?.0;
    let d = tm.config().style_dim;
    let run = |style: &Tensor| -> Result<Tensor> {
        let x = tm
            .translate(images, Direction::TargetToSource, style)?
            .detach();
        Ok(seg_s.predict_soft(&x)?.detach())
    };
    match policy {
        StylePolicy::Zero => run(&Tensor::zeros((b, d), tm.dtype(), &device())?),
        StylePolicy::Random => run(&tm.sample_style_prior(rng, b)?),
        StylePolicy::Average { draws } => {
            if draws == 0 {
                return Err(Error::config(
                    "pseudo.style_policy.draws",
                    "must be positive",
                ));
            }
            let mut acc = run(&tm.sample_style_prior(rng, b)?)?;
            for _ in 1..draws {
                acc = (acc + run(&tm.sample_style_prior(rng, b)?)?)?;
            }
            Ok((acc / draws as f64)?)
        }
    }
}

const BATCH: usize = 16;

/// Soft predictions for every sample of a target-domain dataset.
pub fn soft_predictions(
    targets: &Dataset,
    tm: &TranslationModel,
    seg_s: &Segmenter,
    policy: StylePolicy,
    seed: u64,
) -> Result<Vec<Tensor3>> {
    let tspec = tm.spec(crate::translation::Domain::Target);
    if targets.spec.channels != tspec.channels {
        return Err(Error::Shape(format!(
            "dataset has {} channels, translation target domain has {}",
            targets.spec.channels, tspec.channels
        )));
    }
    if seg_s.config().in_channels != tm.spec(crate::translation::Domain::Source).channels {
        return Err(Error::Shape(
            "source segmenter does not accept source-domain images".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(targets.len());
    let idx: Vec<usize> = (0..targets.len()).collect();
    for chunk in idx.chunks(BATCH) {
        let x = targets.image_batch(chunk, tm.dtype(), &device())?;
        out.extend(split_batch(&predict_through_source(
            &x, tm, seg_s, policy, &mut rng,
        )?)?);
    }
    Ok(out)
}

/// Pairs each real target image with its pseudo-mask.
pub fn generate_pseudolabels(
    targets: &Dataset,
    tm: &TranslationModel,
    seg_s: &Segmenter,
    threshold: f64,
    policy: StylePolicy,
    seed: u64,
) -> Result<Dataset> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument(
            "no target samples to pseudo-label".into(),
        ));
    }
    check_threshold(threshold, targets.spec.num_classes)?;
    let preds = soft_predictions(targets, tm, seg_s, policy, seed)?;
    let samples = targets
        .samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            let pm = pseudo_label(p, threshold)?;
            Ok(Sample {
                mask: Some(pm.mask.clone()),
                pseudo: Some(pm.info()),
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(targets.spec.clone(), samples)
}

/// Class-balanced accuracy of pseudo-labels on labelled pixels, or `None`
/// when no pixel is labelled.
pub fn labelled_accuracy(masks: &[PseudoMask], truths: &[Tensor3]) -> Option<f64> {
    let k = masks.first()?.mask.shape()[0];
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (m, t) in masks.iter().zip(truths) {
        let hw = t.shape()[1] * t.shape()[2];
        for px in 0..hw {
            let label = (0..k).find(|&c| m.mask.data()[c * hw + px] == 1.0);
            let truth = (0..k).find(|&c| t.data()[c * hw + px] == 1.0);
            if let (Some(l), Some(y)) = (label, truth) {
                total[y] += 1;
                correct[y] += usize::from(l == y);
            }
        }
    }
    let per_class: Vec<f64> = (0..k)
        .filter(|&c| total[c] > 0)
        .map(|c| correct[c] as f64 / total[c] as f64)
        .collect();
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Applies a [`ThresholdPolicy`] to validation predictions with known labels.
pub fn select_threshold(
    policy: &ThresholdPolicy,
    preds: &[Tensor3],
    truths: &[Tensor3],
) -> Result<f64> {
    match policy {
        ThresholdPolicy::Fixed { value } => Ok(*value),
        ThresholdPolicy::Validate { grid, min_accuracy } => {
            if grid.is_empty() {
                return Err(Error::config("pseudo.threshold.grid", "must not be empty"));
            }
            if preds.len() != truths.len() || preds.is_empty() {
                return Err(Error::InvalidArgument(
                    "threshold selection needs one truth mask per prediction".into(),
                ));
            }
            let mut sorted = grid.clone();
            sorted.sort_by(f64::total_cmp);
            let mut best = (f64::NEG_INFINITY, sorted[0]);
            for &t in &sorted {
                let masks = preds
                    .iter()
                    .map(|p| pseudo_label(p, t))
                    .collect::<Result<Vec<_>>>()?;
                let acc = labelled_accuracy(&masks, truths).unwrap_or(0.0);
                log::debug!("threshold {t}: labelled accuracy {acc:.4}");
                if acc >= *min_accuracy {
                    return Ok(t);
                }
                if acc > best.0 {
                    best = (acc, t);
                }
            }
            Ok(best.1)
        }
    }
}
