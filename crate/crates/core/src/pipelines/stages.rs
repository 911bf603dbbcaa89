use std::collections::BTreeSet;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, BatchSampler, LossLog, SegStageConfig, TranslationStageConfig};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{fold_record, patient_metrics, predict_dataset_with};
use crate::nn::device;
use crate::objectives::{
    dice_seg_loss, entropy_loss, gan_loss_d_logits, gan_loss_g_logits, lsgan_loss_d, lsgan_loss_g,
    recon_l1, segmentation_total, semantic_cycle_loss, translation_total, AdversarialKind,
    TranslationTerms,
};
use crate::pseudo::split_batch;
use crate::segmentation::Segmenter;
use crate::translation::{Direction, Domain, TranslationModel};

const DTYPE: DType = DType::F32;

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn finite(term: &str, iteration: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!(
            "loss term `{term}` became {v} at iteration {iteration}"
        )))
    }
}

/// Labelled images used to select the best checkpoint.
#[derive(Debug, Clone)]
pub enum ValidationSet {
    /// Images in the segmenter's own input domain.
    Direct(Dataset),
    /// Images fed through the segmenter's channel adapter.
    Adapted(Dataset),
}

impl ValidationSet {
    fn dataset(&self) -> &Dataset {
        match self {
            ValidationSet::Direct(d) | ValidationSet::Adapted(d) => d,
        }
    }

    /// Mean per-patient DSC of `seg`.
    pub fn dsc(&self, seg: &Segmenter) -> Result<f64> {
        let ds = self.dataset();
        let soft = match self {
            ValidationSet::Direct(_) => {
                predict_dataset_with(ds, seg.dtype(), |x| seg.predict_soft(x))?
            }
            ValidationSet::Adapted(_) => {
                predict_dataset_with(ds, seg.dtype(), |x| seg.predict_soft_adapted(x))?
            }
        };
        Ok(fold_record(0, 0, &patient_metrics(ds, &soft)?)?.dsc)
    }
}

/// A trained segmenter with its training trace.
#[derive(Debug, Clone)]
pub struct SegmenterOutcome {
    pub segmenter: Segmenter,
    pub log: LossLog,
    /// DSC of the returned model on the validation set.
    pub validation_dsc: Option<f64>,
    pub best_iteration: usize,
    /// Names of every sample that entered a gradient step.
    pub trained_on: BTreeSet<String>,
}

/// Supervision and regularization sources of one segmenter run. Every
/// present stream contributes one batch per iteration.
#[derive(Debug, Clone, Copy, Default)]
pub struct TargetStreams<'a> {
    /// Source images translated to the target domain with a fresh style per
    /// draw, paired with the source masks.
    pub synthetic: Option<(&'a Dataset, &'a TranslationModel)>,
    /// Images with annotated masks in the segmenter's domain.
    pub labeled: Option<&'a Dataset>,
    /// Images with pseudo-masks.
    pub pseudo: Option<&'a Dataset>,
    /// Images regularized by prediction entropy.
    pub entropy: Option<&'a Dataset>,
    /// Labelled images from another domain, fed through the channel adapter.
    pub adapted: Option<&'a Dataset>,
}

fn select_best(
    seg: &Segmenter,
    validation: Option<&ValidationSet>,
    best: &mut Option<(f64, usize, Segmenter)>,
    iteration: usize,
) -> Result<()> {
    let Some(v) = validation else { return Ok(()) };
    let dsc = v.dsc(seg)?;
    log::debug!("iteration {iteration}: validation DSC {dsc:.4}");
    if best.as_ref().is_none_or(|(b, _, _)| dsc > *b) {
        *best = Some((dsc, iteration, seg.deep_copy(seg.dtype())?));
    }
    Ok(())
}

/// Trains `seg` on the given streams, keeping the best validation checkpoint.
pub fn train_segmenter_streams(
    mut seg: Segmenter,
    streams: TargetStreams<'_>,
    cfg: &SegStageConfig,
    seed: u64,
    validation: Option<&ValidationSet>,
) -> Result<SegmenterOutcome> {
    let named: [(&str, Option<&Dataset>); 5] = [
        ("synthetic", streams.synthetic.map(|(d, _)| d)),
        ("labeled", streams.labeled),
        ("pseudo", streams.pseudo),
        ("entropy", streams.entropy),
        ("adapted", streams.adapted),
    ];
    if named.iter().all(|(_, d)| d.is_none()) {
        return Err(Error::InvalidArgument(
            "segmenter training needs at least one data stream".into(),
        ));
    }
    for (name, d) in named {
        if let Some(d) = d {
            if d.is_empty() {
                return Err(Error::InvalidArgument(format!("`{name}` stream is empty")));
            }
            if name != "entropy" && !d.is_fully_labeled() {
                return Err(Error::InvalidArgument(format!(
                    "`{name}` stream has samples without masks"
                )));
            }
        }
    }
    let tm = streams.synthetic.map(|(_, tm)| tm.frozen()).transpose()?;
    let mut samplers: Vec<BatchSampler> = named
        .iter()
        .enumerate()
        .map(|(i, (_, d))| {
            BatchSampler::new(
                d.map_or(0, Dataset::len),
                derive_seed(seed, &[10, i as u64]),
            )
        })
        .collect();
    let mut style_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[11]));
    let mut opt = cfg.train.optimizer.build(seg.params().vars())?;
    let b = cfg.train.batch_size;
    let dev = device();
    let mut log = LossLog::default();
    let mut trained_on = BTreeSet::new();
    let mut best = None;

    for it in 0..cfg.train.iterations {
        let mut seg_terms: Vec<Tensor> = Vec::new();
        let mut ent = None;
        for (i, (name, d)) in named.iter().enumerate() {
            let Some(d) = d else { continue };
            if *name == "entropy" && it < cfg.entropy_warmup {
                continue;
            }
            let idx = samplers[i].next_batch(b);
            trained_on.extend(idx.iter().map(|&j| d.samples[j].name.clone()));
            let x = d.image_batch(&idx, DTYPE, &dev)?;
            let (loss, term) = match *name {
                "synthetic" => {
                    let tm = tm.as_ref().expect("synthetic stream has a model");
                    let s = tm.sample_style_prior(&mut style_rng, idx.len())?;
                    let fake = tm.translate(&x, Direction::SourceToTarget, &s)?.detach();
                    let y = d.mask_batch(&idx, DTYPE, &dev)?;
                    (
                        dice_seg_loss(&seg.predict_soft(&fake)?, &y, cfg.dice)?,
                        "dice_synthetic",
                    )
                }
                "adapted" => {
                    let y = d.mask_batch(&idx, DTYPE, &dev)?;
                    (
                        dice_seg_loss(&seg.predict_soft_adapted(&x)?, &y, cfg.dice)?,
                        "dice_adapted",
                    )
                }
                "entropy" => {
                    let e = entropy_loss(&seg.predict_soft(&x)?, cfg.entropy)?;
                    log.push(it as u64, "entropy", finite("entropy", it, scalar(&e)?)?);
                    ent = Some(e);
                    continue;
                }
                other => {
                    let y = d.mask_batch(&idx, DTYPE, &dev)?;
                    let term = if other == "labeled" {
                        "dice_labeled"
                    } else {
                        "dice_pseudo"
                    };
                    (dice_seg_loss(&seg.predict_soft(&x)?, &y, cfg.dice)?, term)
                }
            };
            log.push(it as u64, term, finite(term, it, scalar(&loss)?)?);
            seg_terms.push(loss);
        }
        let seg_loss = match seg_terms.split_first() {
            Some((first, rest)) => rest.iter().try_fold(first.clone(), |acc, t| acc + t)?,
            None => Tensor::zeros((), DTYPE, &dev)?,
        };
        let total = segmentation_total(&seg_loss, ent.as_ref())?;
        log.push(it as u64, "total", finite("total", it, scalar(&total)?)?);
        opt.step(&total.backward()?)?;
        if cfg.train.eval_every > 0 && (it + 1) % cfg.train.eval_every == 0 {
            select_best(&seg, validation, &mut best, it + 1)?;
        }
    }
    if cfg.train.iterations == 0
        || cfg.train.eval_every == 0
        || !cfg.train.iterations.is_multiple_of(cfg.train.eval_every)
    {
        select_best(&seg, validation, &mut best, cfg.train.iterations)?;
    }
    let (validation_dsc, best_iteration) = match best {
        Some((dsc, iteration, model)) => {
            seg = model;
            (Some(dsc), iteration)
        }
        None => (None, cfg.train.iterations),
    };
    Ok(SegmenterOutcome {
        segmenter: seg,
        log,
        validation_dsc,
        best_iteration,
        trained_on,
    })
}

/// Trains the source segmenter on labelled source images.
pub fn train_source_segmenter(
    source_labeled: &Dataset,
    cfg: &SegStageConfig,
    seed: u64,
    validation: Option<&Dataset>,
) -> Result<SegmenterOutcome> {
    if let Some(s) = source_labeled.samples.iter().find(|s| s.mask.is_none()) {
        return Err(Error::InvalidArgument(format!(
            "source sample `{}` has no mask; the source segmenter needs labelled data",
            s.name
        )));
    }
    let net = cfg.net.for_domain(&source_labeled.spec);
    let seg = Segmenter::new(net, derive_seed(seed, &[1]), DTYPE)?;
    let val = validation.map(|v| ValidationSet::Direct(v.clone()));
    train_segmenter_streams(
        seg,
        TargetStreams {
            labeled: Some(source_labeled),
            ..Default::default()
        },
        cfg,
        seed,
        val.as_ref(),
    )
}

/// Which extra target terms the target segmenter uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TargetOptions {
    pub use_entmin: bool,
    pub use_pslab: bool,
}

/// Trains the target segmenter on translated source images, plus
/// pseudo-labelled and entropy-regularized target images per `options`.
/// Pseudo-labels must already be attached to `target_unlabeled`.
pub fn train_target_segmenter(
    source_labeled: &Dataset,
    target_unlabeled: &Dataset,
    tm: &TranslationModel,
    options: TargetOptions,
    cfg: &SegStageConfig,
    seed: u64,
    validation: Option<&ValidationSet>,
) -> Result<SegmenterOutcome> {
    if options.use_pslab
        && target_unlabeled
            .samples
            .iter()
            .any(|s| s.pseudo.is_none() || s.mask.is_none())
    {
        return Err(Error::MissingStage(
            "pseudo-labels missing for the target images; run the pseudo-label stage first".into(),
        ));
    }
    let net = cfg.net.for_domain(&target_unlabeled.spec);
    let seg = Segmenter::new(net, derive_seed(seed, &[3]), DTYPE)?;
    train_segmenter_streams(
        seg,
        TargetStreams {
            synthetic: Some((source_labeled, tm)),
            pseudo: options.use_pslab.then_some(target_unlabeled),
            entropy: options.use_entmin.then_some(target_unlabeled),
            ..Default::default()
        },
        cfg,
        seed,
        validation,
    )
}

/// A trained translation model with its training trace.
#[derive(Debug, Clone)]
pub struct TranslationOutcome {
    pub model: TranslationModel,
    pub log: LossLog,
    pub trained_on: BTreeSet<String>,
}

/// Alternating discriminator and generator updates on the translation
/// objective. `seg_s` is only read.
pub fn train_translation(
    source_labeled: &Dataset,
    target_unlabeled: &Dataset,
    seg_s: &Segmenter,
    cfg: &TranslationStageConfig,
    seed: u64,
) -> Result<TranslationOutcome> {
    if source_labeled.is_empty() || target_unlabeled.is_empty() {
        return Err(Error::InvalidArgument(
            "translation needs source and target images".into(),
        ));
    }
    if !source_labeled.is_fully_labeled() {
        return Err(Error::InvalidArgument(
            "source images need masks for the semantic loss".into(),
        ));
    }
    if seg_s.config().in_channels != source_labeled.spec.channels {
        return Err(Error::Shape(
            "source segmenter does not accept source-domain images".into(),
        ));
    }
    let model = TranslationModel::new(
        &source_labeled.spec,
        &target_unlabeled.spec,
        cfg.net,
        derive_seed(seed, &[2]),
        DTYPE,
    )?;
    let seg = seg_s.frozen()?;
    let mut g_opt = cfg.train.optimizer.build(model.generator_params().vars())?;
    let mut d_opt = cfg
        .train
        .optimizer
        .build(model.discriminator_params().vars())?;
    let mut src_sampler = BatchSampler::new(source_labeled.len(), derive_seed(seed, &[20]));
    let mut tgt_sampler = BatchSampler::new(target_unlabeled.len(), derive_seed(seed, &[21]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[22]));
    let w = cfg.weights;
    let b = cfg.train.batch_size;
    let dev = device();
    let mut log = LossLog::default();
    let mut trained_on = BTreeSet::new();

    for it in 0..cfg.train.iterations {
        let si = src_sampler.next_batch(b);
        let ti = tgt_sampler.next_batch(b);
        trained_on.extend(si.iter().map(|&j| source_labeled.samples[j].name.clone()));
        trained_on.extend(ti.iter().map(|&j| target_unlabeled.samples[j].name.clone()));
        let xs = source_labeled.image_batch(&si, DTYPE, &dev)?;
        let ys = source_labeled.mask_batch(&si, DTYPE, &dev)?;
        let xt = target_unlabeled.image_batch(&ti, DTYPE, &dev)?;
        let prior_s = model.sample_style_prior(&mut rng, si.len())?;
        let prior_t = model.sample_style_prior(&mut rng, ti.len())?;
        let pass = model.forward_pass(&xs, &xt, &prior_s, &prior_t)?;

        let d_loss = {
            let fake_t = pass.source_to_target.detach();
            let fake_s = pass.target_to_source.detach();
            let d = |real: &Tensor, fake: &Tensor, dom: Domain| -> Result<Tensor> {
                let r = model.discriminate_logits(real, dom)?;
                let f = model.discriminate_logits(fake, dom)?;
                match cfg.adversarial {
                    AdversarialKind::Log => gan_loss_d_logits(&r, &f),
                    AdversarialKind::LeastSquares => lsgan_loss_d(&r, &f),
                }
            };
            ((d(&xs, &fake_s, Domain::Source)? + d(&xt, &fake_t, Domain::Target)?)? * w.gan)?
        };
        let d_value = finite("discriminator", it, scalar(&d_loss)?)?;
        d_opt.step(&d_loss.backward()?)?;

        let g_adv = |fake: &Tensor, dom: Domain| -> Result<Tensor> {
            let f = model.discriminate_logits(fake, dom)?;
            match cfg.adversarial {
                AdversarialKind::Log => gan_loss_g_logits(&f, cfg.generator_loss),
                AdversarialKind::LeastSquares => lsgan_loss_g(&f),
            }
        };
        let p_cycle = seg.predict_soft(&pass.cycle_source)?;
        let terms = TranslationTerms {
            gan_source: g_adv(&pass.target_to_source, Domain::Source)?,
            gan_target: g_adv(&pass.source_to_target, Domain::Target)?,
            recon_source: recon_l1(&pass.recon_source, &xs)?,
            recon_target: recon_l1(&pass.recon_target, &xt)?,
            content_source: recon_l1(&pass.content_source_rec, &pass.content_source)?,
            content_target: recon_l1(&pass.content_target_rec, &pass.content_target)?,
            style_source: recon_l1(&pass.style_source_rec, &prior_s)?,
            style_target: recon_l1(&pass.style_target_rec, &prior_t)?,
            cycle_source: recon_l1(&pass.cycle_source, &xs)?,
            cycle_target: recon_l1(&pass.cycle_target, &xt)?,
            semantic: semantic_cycle_loss(&p_cycle, &ys)?,
        };
        for (name, v) in TranslationTerms::NAMES.iter().zip(terms.values()?) {
            log.push(it as u64, name, finite(name, it, v)?);
        }
        let g_loss = translation_total(&terms, &w)?;
        log.push(
            it as u64,
            "generator_total",
            finite("generator_total", it, scalar(&g_loss)?)?,
        );
        log.push(it as u64, "discriminator", d_value);
        g_opt.step(&g_loss.backward()?)?;
        if (it + 1) % 100 == 0 {
            log::debug!(
                "translation iteration {}: generator {:.4}",
                it + 1,
                scalar(&g_loss)?
            );
        }
    }
    Ok(TranslationOutcome {
        model,
        log,
        trained_on,
    })
}

/// Translates every image of `ds` with prior styles seeded by `seed`,
/// keeping masks and names. The result belongs to the other domain.
pub fn translate_dataset(
    ds: &Dataset,
    tm: &TranslationModel,
    direction: Direction,
    seed: u64,
) -> Result<Dataset> {
    let spec = tm.spec(direction.to_domain()).clone();
    if ds.spec.channels != tm.spec(direction.from_domain()).channels {
        return Err(Error::Shape(format!(
            "dataset domain `{}` does not match the translation input domain",
            ds.spec.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut samples = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(16) {
        let x = ds.image_batch(chunk, tm.dtype(), &device())?;
        let s = tm.sample_style_prior(&mut rng, chunk.len())?;
        let y = tm.translate(&x, direction, &s)?.detach();
        for (&i, image) in chunk.iter().zip(split_batch(&y)?) {
            let src = &ds.samples[i];
            samples.push(Sample {
                domain: spec.name.clone(),
                image,
                ..src.clone()
            });
        }
    }
    Dataset::new(spec, samples)
}
