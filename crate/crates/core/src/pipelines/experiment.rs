use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stages::{
    train_segmenter_streams, train_source_segmenter, train_translation, translate_dataset,
    SegmenterOutcome, TargetStreams, TranslationOutcome, ValidationSet,
};
use super::{derive_seed, parallel_map, split_patients, PipelineConfig};
use crate::data::{make_folds, Dataset, FoldPlan, SyntheticTask};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate, evaluate_segmenter, mean_entropy, MetricsRecord, MetricsReport, SweepRecord,
};
use crate::pseudo::{generate_pseudolabels, select_threshold, soft_predictions, ThresholdPolicy};
use crate::segmentation::Segmenter;
use crate::translation::Direction;

/// The eight rows of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Baseline {
    /// (i) Target labels only.
    #[serde(rename = "i")]
    TargetOnly,
    /// (ii) Target labels plus translated source images.
    #[serde(rename = "ii")]
    TargetPlusSynthetic,
    /// (iii) Source labels plus target entropy minimization, no translation.
    #[serde(rename = "iii")]
    SourceEntMin,
    /// (iv) Translated source images, translation trained without the semantic loss.
    #[serde(rename = "iv")]
    Synthetic,
    /// (v) Translated source images with the semantic loss.
    #[serde(rename = "v")]
    SyntheticSemantic,
    /// (vi) v plus entropy minimization.
    #[serde(rename = "vi")]
    SemanticEntMin,
    /// (vii) v plus pseudo-labels.
    #[serde(rename = "vii")]
    SemanticPseudo,
    /// (viii) v plus entropy minimization and pseudo-labels.
    #[serde(rename = "viii")]
    Full,
}

impl Baseline {
    pub const ALL: [Baseline; 8] = [
        Baseline::TargetOnly,
        Baseline::TargetPlusSynthetic,
        Baseline::SourceEntMin,
        Baseline::Synthetic,
        Baseline::SyntheticSemantic,
        Baseline::SemanticEntMin,
        Baseline::SemanticPseudo,
        Baseline::Full,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Baseline::TargetOnly => "i",
            Baseline::TargetPlusSynthetic => "ii",
            Baseline::SourceEntMin => "iii",
            Baseline::Synthetic => "iv",
            Baseline::SyntheticSemantic => "v",
            Baseline::SemanticEntMin => "vi",
            Baseline::SemanticPseudo => "vii",
            Baseline::Full => "viii",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Baseline::TargetOnly => "target labels only (oracle)",
            Baseline::TargetPlusSynthetic => "target labels + synthetic target",
            Baseline::SourceEntMin => "source labels + target entropy, no translation",
            Baseline::Synthetic => "synthetic target, no semantic loss",
            Baseline::SyntheticSemantic => "synthetic target with semantic loss",
            Baseline::SemanticEntMin => "synthetic + entropy minimization",
            Baseline::SemanticPseudo => "synthetic + pseudo-labels",
            Baseline::Full => "synthetic + entropy minimization + pseudo-labels",
        }
    }

    fn recipe(self) -> Recipe {
        let r = Recipe {
            fraction: 0.0,
            translation: Some(true),
            entmin: false,
            pslab: false,
            source_direct: false,
        };
        match self {
            Baseline::TargetOnly => Recipe {
                fraction: 1.0,
                translation: None,
                ..r
            },
            Baseline::TargetPlusSynthetic => Recipe { fraction: 1.0, ..r },
            Baseline::SourceEntMin => Recipe {
                translation: None,
                entmin: true,
                source_direct: true,
                ..r
            },
            Baseline::Synthetic => Recipe {
                translation: Some(false),
                ..r
            },
            Baseline::SyntheticSemantic => r,
            Baseline::SemanticEntMin => Recipe { entmin: true, ..r },
            Baseline::SemanticPseudo => Recipe { pslab: true, ..r },
            Baseline::Full => Recipe {
                entmin: true,
                pslab: true,
                ..r
            },
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.id() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::config(
                    "baseline",
                    format!("unknown baseline `{s}`; expected one of i..viii"),
                )
            })
    }
}

/// Which data a target segmenter run uses.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Recipe {
    /// Fraction of the training-fold target patients whose labels are revealed.
    fraction: f64,
    /// Translation model to use, by whether it was trained with the semantic loss.
    translation: Option<bool>,
    entmin: bool,
    pslab: bool,
    /// Train on source images directly (same channel count or adapter).
    source_direct: bool,
}

/// What to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub baseline: Baseline,
    pub seeds: Vec<u64>,
    /// Subset of folds to run; all folds when absent.
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
    /// Let baseline (iii) learn a 1x1 channel projection when the domains
    /// have different channel counts.
    #[serde(default)]
    pub allow_adapter: bool,
}

impl ExperimentPlan {
    pub fn new(baseline: Baseline, seeds: Vec<u64>) -> Self {
        Self {
            baseline,
            seeds,
            folds: None,
            allow_adapter: false,
        }
    }
}

/// Models shared by every fold and baseline of one seed.
#[derive(Debug, Clone)]
pub struct SharedStages {
    pub seed: u64,
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub source: SegmenterOutcome,
    /// Keyed by whether the semantic loss was used.
    pub translations: BTreeMap<bool, TranslationStage>,
}

#[derive(Debug, Clone)]
pub struct TranslationStage {
    pub outcome: TranslationOutcome,
    /// Source validation images translated to the target domain.
    pub validation: Dataset,
    pub threshold: f64,
}

/// Result of training and evaluating one target segmenter.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub label: String,
    pub fold: usize,
    pub seed: u64,
    pub fraction: f64,
    pub record: MetricsRecord,
    /// Mean normalized prediction entropy on the test patients.
    pub test_entropy: f64,
    pub segmenter: SegmenterOutcome,
    pub threshold: Option<f64>,
    /// Mean pseudo-label coverage over the pseudo-labelled images.
    pub pseudo_coverage: Option<f64>,
}

/// Method of a supervision-sweep line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepMethod {
    /// Revealed labels plus synthetic target, pseudo-labels and entropy on the rest.
    Ours,
    /// Revealed labels only.
    TargetOnly,
}

impl SweepMethod {
    pub fn name(self) -> &'static str {
        match self {
            SweepMethod::Ours => "ours",
            SweepMethod::TargetOnly => "target-only",
        }
    }

    fn recipe(self, fraction: f64) -> Recipe {
        let base = match self {
            SweepMethod::Ours => Baseline::Full.recipe(),
            SweepMethod::TargetOnly => Baseline::TargetOnly.recipe(),
        };
        Recipe { fraction, ..base }
    }
}

/// Data, configuration and cached shared stages of an experiment.
#[derive(Debug)]
pub struct Workbench {
    pub source: Dataset,
    /// Unlabelled target images used to train the translation model.
    pub target_unlabeled: Dataset,
    /// Labelled target patients split into cross-validation folds.
    pub target_heldout: Dataset,
    pub config: PipelineConfig,
    pub folds: FoldPlan,
    pub jobs: usize,
    shared: Mutex<BTreeMap<u64, Arc<SharedStages>>>,
}

impl Workbench {
    pub fn new(task: SyntheticTask, config: PipelineConfig) -> Result<Self> {
        let issues = config.issues();
        if !issues.is_empty() {
            return Err(Error::Config(issues));
        }
        task.source_labeled
            .spec
            .check_aligned(&task.target_unlabeled.spec)?;
        if task.target_unlabeled.spec != task.target_heldout.spec {
            return Err(Error::Shape(
                "unlabelled and held-out target sets use different specs".into(),
            ));
        }
        if !task.target_heldout.is_fully_labeled() {
            return Err(Error::InvalidArgument(
                "held-out target patients need masks".into(),
            ));
        }
        let folds = make_folds(
            &task.target_heldout.patients(),
            config.num_folds,
            config.fold_seed,
        )?;
        Ok(Self {
            source: task.source_labeled,
            target_unlabeled: task.target_unlabeled.without_masks(),
            target_heldout: task.target_heldout,
            config,
            folds,
            jobs: 1,
            shared: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn with_jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs.max(1);
        self
    }

    fn cached(&self, seed: u64) -> Option<Arc<SharedStages>> {
        self.shared
            .lock()
            .expect("cache poisoned")
            .get(&seed)
            .cloned()
    }

    /// Shared stages of `seed` with at least the requested translation models.
    pub fn shared(&self, seed: u64, semantic: &[bool]) -> Result<Arc<SharedStages>> {
        if let Some(s) = self.cached(seed) {
            if semantic.iter().all(|k| s.translations.contains_key(k)) {
                return Ok(s);
            }
        }
        let mut stages = match self.cached(seed) {
            Some(s) => (*s).clone(),
            None => self.train_source_stage(seed)?,
        };
        for &sem in semantic {
            if !stages.translations.contains_key(&sem) {
                let t = self.train_translation_stage(&stages, sem)?;
                stages.translations.insert(sem, t);
            }
        }
        let stages = Arc::new(stages);
        let mut cache = self.shared.lock().expect("cache poisoned");
        // another worker may have added models meanwhile; keep the union
        if let Some(existing) = cache.get(&seed) {
            let mut merged = (**existing).clone();
            for (k, v) in &stages.translations {
                merged.translations.entry(*k).or_insert_with(|| v.clone());
            }
            let merged = Arc::new(merged);
            cache.insert(seed, merged.clone());
            return Ok(merged);
        }
        cache.insert(seed, stages.clone());
        Ok(stages)
    }

    /// Trains every shared stage the given seeds need, `jobs` seeds at a time.
    pub fn prepare(&self, seeds: &[u64], semantic: &[bool]) -> Result<()> {
        for r in parallel_map(seeds, self.jobs, |&s| self.shared(s, semantic)) {
            r?;
        }
        Ok(())
    }

    fn train_source_stage(&self, seed: u64) -> Result<SharedStages> {
        source_stage(&self.source, &self.config, seed)
    }

    fn train_translation_stage(
        &self,
        stages: &SharedStages,
        semantic: bool,
    ) -> Result<TranslationStage> {
        translation_stage(&self.config, stages, &self.target_unlabeled, semantic)
    }

    pub fn test_set(&self, fold: usize) -> Dataset {
        self.target_heldout
            .filter_patients(|p| self.folds.fold_of(p) == Some(fold))
    }

    /// Training-fold target patients split into `(revealed, remainder)`.
    pub fn reveal(&self, fold: usize, seed: u64, fraction: f64) -> (Dataset, Dataset) {
        let pool = self
            .target_heldout
            .filter_patients(|p| self.folds.fold_of(p) != Some(fold));
        let mut patients = pool.patients();
        patients.sort();
        patients.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[60, fold as u64],
        )));
        let k = ((fraction * patients.len() as f64).round() as usize).min(patients.len());
        let revealed: Vec<String> = patients[..k].to_vec();
        (
            pool.filter_patients(|p| revealed.iter().any(|r| r == p)),
            pool.filter_patients(|p| !revealed.iter().any(|r| r == p))
                .without_masks(),
        )
    }

    fn run_recipe(
        &self,
        label: &str,
        recipe: Recipe,
        fold: usize,
        seed: u64,
        allow_adapter: bool,
    ) -> Result<RunOutcome> {
        if fold >= self.folds.num_folds {
            return Err(Error::InvalidArgument(format!(
                "fold {fold} does not exist; the plan has {} folds",
                self.folds.num_folds
            )));
        }
        let semantic: Vec<bool> = recipe.translation.into_iter().collect();
        let shared = self.shared(seed, &semantic)?;
        let test = self.test_set(fold);
        let (revealed, remainder) = self.reveal(fold, seed, recipe.fraction);
        let tspec = &self.target_heldout.spec;
        let sspec = &self.source.spec;
        let cfg = &self.config.target;
        let run_seed = derive_seed(seed, &[70, fold as u64]);

        let mut net = cfg.net.for_domain(tspec);
        let mut streams = TargetStreams::default();
        let mut validation = None;
        let mut threshold = None;
        let mut pseudo_ds = None;
        let mut labeled_train = None;

        if let Some(sem) = recipe.translation {
            let t = &shared.translations[&sem];
            streams.synthetic = Some((&shared.source_train, &t.outcome.model));
            validation = Some(ValidationSet::Direct(t.validation.clone()));
            if recipe.pslab && !remainder.is_empty() {
                threshold = Some(t.threshold);
                pseudo_ds = Some(generate_pseudolabels(
                    &remainder,
                    &t.outcome.model,
                    &shared.source.segmenter,
                    t.threshold,
                    self.config.pseudo.style,
                    derive_seed(run_seed, &[1]),
                )?);
            }
        }
        if recipe.source_direct {
            if sspec.channels == tspec.channels {
                streams.labeled = Some(&shared.source_train);
                validation = Some(ValidationSet::Direct(shared.source_val.clone()));
            } else if allow_adapter {
                net.adapter_channels = Some(sspec.channels);
                streams.adapted = Some(&shared.source_train);
                validation = Some(ValidationSet::Adapted(shared.source_val.clone()));
            } else {
                return Err(Error::config(
                    "plan.allow_adapter",
                    format!(
                        "baseline iii trains on source images without translation, which needs equal channel \
                         counts (source {}, target {}); enable the channel adapter to run it",
                        sspec.channels, tspec.channels
                    ),
                ));
            }
        }
        if !revealed.is_empty() {
            if validation.is_none() {
                let (train, val) = split_patients(
                    &revealed,
                    cfg.train.validation_fraction,
                    derive_seed(run_seed, &[2]),
                );
                if !val.is_empty() {
                    validation = Some(ValidationSet::Direct(val));
                }
                labeled_train = Some(train);
            } else {
                labeled_train = Some(revealed.clone());
            }
        }
        streams.labeled = streams.labeled.or(labeled_train.as_ref());
        streams.pseudo = pseudo_ds.as_ref();
        if recipe.entmin && !remainder.is_empty() {
            streams.entropy = Some(&remainder);
        }

        let seg = Segmenter::new(net, derive_seed(run_seed, &[3]), candle_core::DType::F32)?;
        log::info!("{label}: fold {fold} seed {seed} training the target segmenter");
        let outcome = train_segmenter_streams(seg, streams, cfg, run_seed, validation.as_ref())?;
        let record = evaluate_segmenter(&outcome.segmenter, &test, fold, seed)?;
        let test_entropy = mean_entropy(&outcome.segmenter, &test)?;
        let pseudo_coverage = pseudo_ds.as_ref().map(|d| {
            d.samples
                .iter()
                .filter_map(|s| s.pseudo.map(|p| p.coverage))
                .sum::<f64>()
                / d.len() as f64
        });
        Ok(RunOutcome {
            label: label.to_string(),
            fold,
            seed,
            fraction: recipe.fraction,
            record,
            test_entropy,
            segmenter: outcome,
            threshold,
            pseudo_coverage,
        })
    }

    /// Trains and evaluates one baseline on one fold.
    pub fn run(
        &self,
        baseline: Baseline,
        fold: usize,
        seed: u64,
        allow_adapter: bool,
    ) -> Result<RunOutcome> {
        self.run_recipe(baseline.id(), baseline.recipe(), fold, seed, allow_adapter)
    }

    /// Trains and evaluates one sweep method at `fraction` on one fold.
    pub fn run_sweep_point(
        &self,
        method: SweepMethod,
        fraction: f64,
        fold: usize,
        seed: u64,
    ) -> Result<RunOutcome> {
        self.run_recipe(method.name(), method.recipe(fraction), fold, seed, false)
    }

    fn plan_folds(&self, folds: &Option<Vec<usize>>) -> Vec<usize> {
        folds
            .clone()
            .unwrap_or_else(|| (0..self.folds.num_folds).collect())
    }
}

/// Training and validation patients of the source domain for `seed`.
pub fn source_split(source: &Dataset, config: &PipelineConfig, seed: u64) -> (Dataset, Dataset) {
    split_patients(
        source,
        config.source.train.validation_fraction,
        derive_seed(seed, &[40]),
    )
}

/// Splits the source patients and trains the source segmenter of `seed`.
pub fn source_stage(source: &Dataset, config: &PipelineConfig, seed: u64) -> Result<SharedStages> {
    let cfg = &config.source;
    let (train, val) = source_split(source, config, seed);
    let val_opt = (!val.is_empty()).then_some(&val);
    log::info!(
        "seed {seed}: training the source segmenter on {} slices",
        train.len()
    );
    let outcome = train_source_segmenter(&train, cfg, derive_seed(seed, &[41]), val_opt)?;
    Ok(SharedStages {
        seed,
        source_train: train,
        source_val: val,
        source: outcome,
        translations: BTreeMap::new(),
    })
}

/// Trains the translation model of `stages.seed`, with or without the semantic loss.
pub fn translation_stage(
    config: &PipelineConfig,
    stages: &SharedStages,
    target_unlabeled: &Dataset,
    semantic: bool,
) -> Result<TranslationStage> {
    let mut cfg = config.translation;
    if !semantic {
        cfg.weights.semantic = 0.0;
    }
    log::info!(
        "seed {}: training the translation model (semantic weight {})",
        stages.seed,
        cfg.weights.semantic
    );
    // both variants start from the same initialization and see the same batches
    let outcome = train_translation(
        &stages.source_train,
        target_unlabeled,
        &stages.source.segmenter,
        &cfg,
        derive_seed(stages.seed, &[50]),
    )?;
    calibrate(config, stages, outcome, semantic)
}

/// Translates the source validation patients to the target domain and picks
/// the pseudo-label threshold on them.
pub fn calibrate(
    config: &PipelineConfig,
    stages: &SharedStages,
    outcome: TranslationOutcome,
    semantic: bool,
) -> Result<TranslationStage> {
    let seed = stages.seed;
    let val_source = if stages.source_val.is_empty() {
        &stages.source_train
    } else {
        &stages.source_val
    };
    let validation = translate_dataset(
        val_source,
        &outcome.model,
        Direction::SourceToTarget,
        derive_seed(seed, &[51, u64::from(semantic)]),
    )?;
    let threshold = match &config.pseudo.threshold {
        ThresholdPolicy::Fixed { value } => *value,
        policy => {
            let preds = soft_predictions(
                &validation,
                &outcome.model,
                &stages.source.segmenter,
                config.pseudo.style,
                derive_seed(seed, &[52]),
            )?;
            let truths: Vec<_> = validation
                .samples
                .iter()
                .filter_map(|s| s.mask.clone())
                .collect();
            select_threshold(policy, &preds, &truths)?
        }
    };
    log::info!("seed {seed}: pseudo-label threshold {threshold}");
    Ok(TranslationStage {
        outcome,
        validation,
        threshold,
    })
}

/// Runs every fold and seed of `plan`.
pub fn run_experiment(
    wb: &Workbench,
    plan: &ExperimentPlan,
) -> Result<(MetricsReport, Vec<RunOutcome>)> {
    if plan.seeds.is_empty() {
        return Err(Error::config("plan.seeds", "must list at least one seed"));
    }
    let semantic: Vec<bool> = plan.baseline.recipe().translation.into_iter().collect();
    wb.prepare(&plan.seeds, &semantic)?;
    let jobs: Vec<(usize, u64)> = wb
        .plan_folds(&plan.folds)
        .into_iter()
        .flat_map(|f| plan.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let runs = parallel_map(&jobs, wb.jobs, |&(fold, seed)| {
        wb.run(plan.baseline, fold, seed, plan.allow_adapter)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let records: Vec<MetricsRecord> = runs.iter().map(|r| r.record.clone()).collect();
    Ok((aggregate(&records)?, runs))
}

/// Runs both sweep methods at each fraction. Fractions that reveal no
/// patient at `f > 0` are skipped with a warning; target-only is skipped at 0.
pub fn sweep_supervision(
    wb: &Workbench,
    fractions: &[f64],
    seeds: &[u64],
    folds: Option<Vec<usize>>,
) -> Result<(Vec<SweepRecord>, Vec<RunOutcome>)> {
    if fractions.windows(2).any(|w| w[0] > w[1])
        || fractions.iter().any(|f| !(0.0..=1.0).contains(f))
    {
        return Err(Error::config(
            "sweep.fractions",
            "must be sorted and within [0, 1]",
        ));
    }
    if seeds.is_empty() {
        return Err(Error::config("plan.seeds", "must list at least one seed"));
    }
    wb.prepare(seeds, &[true])?;
    let folds = wb.plan_folds(&folds);
    let mut jobs = Vec::new();
    for &f in fractions {
        for &fold in &folds {
            let pool = wb.target_heldout.patients().len() - wb.folds.patients_in(fold).len();
            let k = (f * pool as f64).round() as usize;
            if f > 0.0 && k == 0 {
                log::warn!("fraction {f} reveals no patient in fold {fold}; point skipped");
                continue;
            }
            for &seed in seeds {
                jobs.push((SweepMethod::Ours, f, fold, seed));
                if k > 0 {
                    jobs.push((SweepMethod::TargetOnly, f, fold, seed));
                }
            }
        }
    }
    let runs = parallel_map(&jobs, wb.jobs, |&(m, f, fold, seed)| {
        wb.run_sweep_point(m, f, fold, seed)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let records = jobs
        .iter()
        .zip(&runs)
        .map(|(&(m, f, _, _), r)| SweepRecord {
            fraction: f,
            method: m.name().to_string(),
            fold: r.fold,
            seed: r.seed,
            recall: r.record.recall,
            precision: r.record.precision,
            dsc: r.record.dsc,
            ap: r.record.ap,
        })
        .collect();
    Ok((records, runs))
}
