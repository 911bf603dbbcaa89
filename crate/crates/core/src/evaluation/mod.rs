//! Segmentation metrics and model evaluation.
//!
//! Recall, precision and DSC are computed on the lesion class with pixels
//! pooled over all slices of a patient; AP ranks the pixels of a patient by
//! lesion probability. Fold-level numbers average the per-patient values.

mod plot;
mod report;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use plot::{emit_plots, SweepRecord};
pub use report::{
    aggregate, emit_report, read_metrics_csv, MetricSummary, MetricsRecord, MetricsReport,
};

use crate::data::{Dataset, Tensor3};
use crate::error::{Error, Result};
use crate::nn::device;
use crate::objectives::{entropy_loss, semantic_cycle_loss, EntropyReduction};
use crate::pseudo::split_batch;
use crate::segmentation::Segmenter;
use crate::translation::{Domain, TranslationModel};

/// Lesion-class confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl Counts {
    /// Counts class 1 of two `[K, H, W]` one-hot masks.
    pub fn from_masks(pred: &Tensor3, truth: &Tensor3) -> Result<Self> {
        if pred.shape() != truth.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} and truth {:?} differ in shape",
                pred.shape(),
                truth.shape()
            )));
        }
        let mut c = Counts::default();
        for (&p, &t) in pred.plane(1).iter().zip(truth.plane(1)) {
            match (p == 1.0, t == 1.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    /// `(recall, precision, dsc)`. An empty truth with an empty prediction
    /// scores 1 on all three; any other zero denominator scores 0.
    pub fn metrics(self) -> PixelMetrics {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if self.tp + self.fp + self.fn_ == 0 {
            return PixelMetrics {
                recall: 1.0,
                precision: 1.0,
                dsc: 1.0,
            };
        }
        let ratio = |n: f64, d: f64| if d > 0.0 { n / d } else { 0.0 };
        PixelMetrics {
            recall: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
            dsc: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub recall: f64,
    pub precision: f64,
    pub dsc: f64,
}

/// Pooled recall, precision and DSC over paired one-hot masks.
pub fn pixel_metrics(pred: &[Tensor3], truth: &[Tensor3]) -> Result<PixelMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truth masks",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = Counts::default();
    for (p, t) in pred.iter().zip(truth) {
        c = c + Counts::from_masks(p, t)?;
    }
    Ok(c.metrics())
}

/// Mean over positive pixels of the precision at that pixel's rank. Equal
/// scores form one group and share the precision measured after the whole
/// group. `None` without positives.
pub fn average_precision(scores: &[f32], truth: &[bool]) -> Result<Option<f64>> {
    if scores.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut seen, mut hits, mut sum) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        let mut group_hits = 0;
        while j < order.len() && scores[order[j]] == s {
            group_hits += usize::from(truth[order[j]]);
            j += 1;
        }
        seen += j - i;
        hits += group_hits;
        sum += group_hits as f64 * hits as f64 / seen as f64;
        i = j;
    }
    Ok(Some(sum / positives as f64))
}

/// Per-pixel argmax of a `[K, H, W]` probability map; ties go to the lower class.
pub fn hard_mask(p: &Tensor3) -> Tensor3 {
    let [k, h, w] = p.shape();
    let hw = h * w;
    let v = p.data();
    let labels: Vec<usize> = (0..hw)
        .map(|px| {
            (1..k).fold(0, |best, c| {
                if v[c * hw + px] > v[best * hw + px] {
                    c
                } else {
                    best
                }
            })
        })
        .collect();
    Tensor3::one_hot(k, h, w, &labels)
}

/// Metrics of one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub patient_id: String,
    pub counts: Counts,
    pub metrics: PixelMetrics,
    pub ap: Option<f64>,
}

const BATCH: usize = 16;

/// Soft predictions of `seg` on every sample of `ds`.
pub fn predict_dataset(seg: &Segmenter, ds: &Dataset) -> Result<Vec<Tensor3>> {
    predict_dataset_with(ds, seg.dtype(), |x| seg.predict_soft(x))
}

/// Applies a batched `[B, C, H, W] -> [B, K, H, W]` predictor to every sample.
pub fn predict_dataset_with(
    ds: &Dataset,
    dtype: DType,
    predict: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Vec<Tensor3>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(BATCH) {
        let x = ds.image_batch(chunk, dtype, &device())?;
        out.extend(split_batch(&predict(&x)?.detach())?);
    }
    Ok(out)
}

/// Per-patient metrics from soft predictions aligned with `ds.samples`.
pub fn patient_metrics(ds: &Dataset, soft: &[Tensor3]) -> Result<Vec<PatientMetrics>> {
    if soft.len() != ds.len() {
        return Err(Error::Shape("one prediction per sample required".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        groups.entry(s.patient_id.as_str()).or_default().push(i);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (pid, idx) in groups {
        let mut counts = Counts::default();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in idx {
            let s = &ds.samples[i];
            let truth = s.mask.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("evaluation sample `{}` has no mask", s.name))
            })?;
            let p = &soft[i];
            counts = counts + Counts::from_masks(&hard_mask(p), truth)?;
            scores.extend_from_slice(p.plane(1));
            labels.extend(truth.plane(1).iter().map(|&v| v == 1.0));
        }
        out.push(PatientMetrics {
            patient_id: pid.to_string(),
            counts,
            metrics: counts.metrics(),
            ap: average_precision(&scores, &labels)?,
        });
    }
    Ok(out)
}

/// Averages per-patient metrics into one fold record.
pub fn fold_record(fold: usize, seed: u64, patients: &[PatientMetrics]) -> Result<MetricsRecord> {
    if patients.is_empty() {
        return Err(Error::InvalidArgument("no patients to evaluate".into()));
    }
    let n = patients.len() as f64;
    let mean = |f: fn(&PatientMetrics) -> f64| patients.iter().map(f).sum::<f64>() / n;
    let aps: Vec<f64> = patients.iter().filter_map(|p| p.ap).collect();
    let skipped = patients.len() - aps.len();
    if skipped > 0 {
        log::info!("AP undefined for {skipped} patient(s) without lesion pixels; excluded");
    }
    let ap = if aps.is_empty() {
        log::warn!("no patient in fold {fold} has lesion pixels; AP reported as 0");
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(MetricsRecord {
        fold,
        seed,
        recall: mean(|p| p.metrics.recall),
        precision: mean(|p| p.metrics.precision),
        dsc: mean(|p| p.metrics.dsc),
        ap,
    })
}

/// Evaluates `seg` on a labelled dataset.
pub fn evaluate_segmenter(
    seg: &Segmenter,
    ds: &Dataset,
    fold: usize,
    seed: u64,
) -> Result<MetricsRecord> {
    let soft = predict_dataset(seg, ds)?;
    fold_record(fold, seed, &patient_metrics(ds, &soft)?)
}

/// Mean normalized prediction entropy of `seg` over `ds`.
pub fn mean_entropy(seg: &Segmenter, ds: &Dataset) -> Result<f64> {
    let soft = predict_dataset(seg, ds)?;
    let mut total = 0.0;
    for p in &soft {
        let t = p.to_tensor(DType::F64, &device())?;
        total += entropy_loss(&t, EntropyReduction::Mean)?.to_scalar::<f64>()?;
    }
    Ok(total / soft.len().max(1) as f64)
}

/// Mean soft dice of the source segmenter on cycle-reconstructed source
/// images against their masks. Target styles come from a prior seeded by `seed`.
pub fn lesion_preservation_score(
    tm: &TranslationModel,
    seg_s: &Segmenter,
    source_labeled: &Dataset,
    seed: u64,
) -> Result<f64> {
    if source_labeled.is_empty() {
        return Err(Error::InvalidArgument("empty source set".into()));
    }
    if source_labeled.spec.channels != tm.spec(Domain::Source).channels {
        return Err(Error::Shape("dataset is not in the source domain".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..source_labeled.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(BATCH) {
        let x = source_labeled.image_batch(chunk, tm.dtype(), &device())?;
        let y = source_labeled.mask_batch(chunk, DType::F64, &device())?;
        let s_t = tm.sample_style_prior(&mut rng, chunk.len())?;
        let rec = tm.cycle(&x, &s_t)?.detach();
        let p = seg_s.predict_soft(&rec)?.detach().to_dtype(DType::F64)?;
        for i in 0..chunk.len() {
            let li = semantic_cycle_loss(&p.get(i)?, &y.get(i)?)?.to_scalar::<f64>()?;
            total -= li;
        }
    }
    Ok(total / source_labeled.len() as f64)
}
