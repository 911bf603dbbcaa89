//! Training stages and the experiment matrix.
//!
//! Three stages run in order: the source segmenter, the translation model
//! (with the source segmenter frozen), and the target segmenter (with both
//! frozen). [`Workbench`] shares the first two stages across folds and
//! baselines and runs the baseline matrix and the supervision sweep.

mod experiment;
mod rundir;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use experiment::{
    calibrate, run_experiment, source_split, source_stage, sweep_supervision, translation_stage,
    Baseline, ExperimentPlan, RunOutcome, SharedStages, SweepMethod, TranslationStage, Workbench,
};
pub use rundir::{write_run, RunPaths};
pub use stages::{
    train_segmenter_streams, train_source_segmenter, train_target_segmenter, train_translation,
    translate_dataset, SegmenterOutcome, TargetOptions, TargetStreams, TranslationOutcome,
    ValidationSet,
};

use crate::data::Dataset;
use crate::error::{ConfigIssue, Error, Result};
use crate::nn::OptimizerConfig;
use crate::objectives::{
    AdversarialKind, DiceOptions, EntropyReduction, GeneratorLoss, LossWeights,
};
use crate::pseudo::{StylePolicy, ThresholdPolicy};
use crate::segmentation::SegmenterConfig;
use crate::translation::NetConfig;

/// Optimization settings shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub iterations: usize,
    /// Fraction of patients held out for model selection.
    pub validation_fraction: f64,
    /// Validation period in iterations for best-checkpoint selection; 0
    /// validates only at the end.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push(ConfigIssue::new(
                format!("{prefix}.batch_size"),
                "must be positive",
            ));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr.is_finite() && lr > 0.0) {
            out.push(ConfigIssue::new(
                format!("{prefix}.optimizer.learning_rate"),
                format!("must be a positive number, got {lr}"),
            ));
        }
        let m = self.optimizer.momentum;
        if !(0.0..1.0).contains(&m) {
            out.push(ConfigIssue::new(
                format!("{prefix}.optimizer.momentum"),
                "must lie in [0, 1)",
            ));
        }
        for (k, b) in [
            ("beta1", self.optimizer.beta1),
            ("beta2", self.optimizer.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                out.push(ConfigIssue::new(
                    format!("{prefix}.optimizer.{k}"),
                    "must lie in [0, 1)",
                ));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            out.push(ConfigIssue::new(
                format!("{prefix}.validation_fraction"),
                "must lie in [0, 1)",
            ));
        }
        out
    }
}

/// Settings of a segmenter training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegStageConfig {
    pub train: TrainConfig,
    /// Architecture; channel and class counts are taken from the data.
    pub net: SegmenterConfig,
    pub dice: DiceOptions,
    pub entropy: EntropyReduction,
    /// Iterations trained before the entropy term joins the objective.
    #[serde(default)]
    pub entropy_warmup: usize,
}

impl SegStageConfig {
    pub fn desk() -> Self {
        Self {
            train: TrainConfig {
                optimizer: OptimizerConfig::sgd(0.01, 0.9),
                batch_size: 8,
                iterations: 500,
                validation_fraction: 0.2,
                eval_every: 50,
            },
            net: SegmenterConfig::desk(1),
            dice: DiceOptions::default(),
            entropy: EntropyReduction::Mean,
            entropy_warmup: 100,
        }
    }

    pub fn full() -> Self {
        Self {
            train: TrainConfig {
                optimizer: OptimizerConfig::sgd(0.01, 0.9),
                batch_size: 32,
                iterations: 20000,
                validation_fraction: 0.2,
                eval_every: 500,
            },
            net: SegmenterConfig::full(1),
            dice: DiceOptions::default(),
            entropy: EntropyReduction::Mean,
            entropy_warmup: 4000,
        }
    }

    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = self.train.issues(&format!("{prefix}.train"));
        if let Err(Error::Config(v)) = self.net.validate() {
            out.extend(v.into_iter().map(|i| {
                ConfigIssue::new(
                    format!("{prefix}.{}", i.key.replace("segmenter", "net")),
                    i.message,
                )
            }));
        }
        if !(self.dice.smoothing.is_finite() && self.dice.smoothing >= 0.0) {
            out.push(ConfigIssue::new(
                format!("{prefix}.dice.smoothing"),
                "must be nonnegative",
            ));
        }
        out
    }
}

/// Settings of the translation stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationStageConfig {
    pub train: TrainConfig,
    pub net: NetConfig,
    /// Configured through the top-level `loss_weights` table.
    #[serde(skip)]
    pub weights: LossWeights,
    #[serde(default)]
    pub generator_loss: GeneratorLoss,
    #[serde(default)]
    pub adversarial: AdversarialKind,
}

impl TranslationStageConfig {
    pub fn desk() -> Self {
        Self {
            train: TrainConfig {
                optimizer: OptimizerConfig::adam(1e-3),
                batch_size: 8,
                iterations: 2000,
                validation_fraction: 0.0,
                eval_every: 0,
            },
            net: NetConfig::desk(),
            weights: LossWeights::default(),
            generator_loss: GeneratorLoss::NonSaturating,
            adversarial: AdversarialKind::Log,
        }
    }

    pub fn full() -> Self {
        Self {
            train: TrainConfig {
                optimizer: OptimizerConfig::adam(1e-4),
                batch_size: 32,
                iterations: 50000,
                validation_fraction: 0.0,
                eval_every: 0,
            },
            net: NetConfig::full(),
            ..Self::desk()
        }
    }

    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = self.train.issues(&format!("{prefix}.train"));
        out.extend(self.weights.issues("loss_weights"));
        if let Err(Error::Config(v)) = self.net.validate() {
            out.extend(
                v.into_iter()
                    .map(|i| ConfigIssue::new(format!("{prefix}.{}", i.key), i.message)),
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoConfig {
    pub threshold: ThresholdPolicy,
    pub style: StylePolicy,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdPolicy::default(),
            style: StylePolicy::Zero,
        }
    }
}

impl PseudoConfig {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let bad = |t: f64| !(t > 0.5 && t < 1.0);
        match &self.threshold {
            ThresholdPolicy::Fixed { value } if bad(*value) => out.push(ConfigIssue::new(
                format!("{prefix}.threshold.value"),
                "must lie in (1/C, 1)",
            )),
            ThresholdPolicy::Validate { grid, min_accuracy } => {
                if grid.is_empty() || grid.iter().any(|&t| bad(t)) {
                    out.push(ConfigIssue::new(
                        format!("{prefix}.threshold.grid"),
                        "must be a nonempty list of values in (1/C, 1)",
                    ));
                }
                if !(0.0..=1.0).contains(min_accuracy) {
                    out.push(ConfigIssue::new(
                        format!("{prefix}.threshold.min_accuracy"),
                        "must lie in [0, 1]",
                    ));
                }
            }
            _ => {}
        }
        if let StylePolicy::Average { draws: 0 } = self.style {
            out.push(ConfigIssue::new(
                format!("{prefix}.style.draws"),
                "must be positive",
            ));
        }
        out
    }
}

/// Every stage setting of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub source: SegStageConfig,
    pub translation: TranslationStageConfig,
    pub target: SegStageConfig,
    pub pseudo: PseudoConfig,
    pub num_folds: usize,
    /// Seed of the patient-to-fold assignment.
    pub fold_seed: u64,
}

impl PipelineConfig {
    pub fn desk() -> Self {
        Self {
            source: SegStageConfig::desk(),
            translation: TranslationStageConfig::desk(),
            target: SegStageConfig::desk(),
            pseudo: PseudoConfig::default(),
            num_folds: 5,
            fold_seed: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            source: SegStageConfig::full(),
            translation: TranslationStageConfig::full(),
            target: SegStageConfig::full(),
            pseudo: PseudoConfig::default(),
            num_folds: 5,
            fold_seed: 0,
        }
    }

    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = self.source.issues("source");
        out.extend(self.translation.issues("translation"));
        out.extend(self.target.issues("target"));
        out.extend(self.pseudo.issues("pseudo"));
        if self.num_folds < 2 {
            out.push(ConfigIssue::new("num_folds", "must be at least 2"));
        }
        out
    }
}

/// Per-iteration loss values, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    pub term: String,
    pub value: f64,
}

impl LossLog {
    pub fn push(&mut self, iteration: u64, term: &str, value: f64) {
        self.rows.push(LossRow {
            iteration,
            term: term.to_string(),
            value,
        });
    }

    /// Distinct term names in first-appearance order.
    pub fn terms(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for r in &self.rows {
            if !seen.contains(&r.term) {
                seen.push(r.term.clone());
            }
        }
        seen
    }

    /// Values of `term` in iteration order.
    pub fn series(&self, term: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.term == term)
            .map(|r| r.value)
            .collect()
    }

    /// Writes `iteration,term,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Deterministic sub-seed for `parts` under `seed`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed ^ 0x6A09_E667_F3BC_C908, |acc, &p| {
        let mut z = acc
            ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15)
                .wrapping_mul(0xD6E8_FEB8_6659_FD93);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Patient-level split into `(train, validation)`. The validation side gets
/// `round(fraction * n)` patients, at least one when `fraction > 0` and
/// `n >= 2`.
pub fn split_patients(ds: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut patients = ds.patients();
    patients.sort();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = patients.len();
    let mut k = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let val: Vec<String> = patients[..k.min(n)].to_vec();
    (
        ds.filter_patients(|p| !val.iter().any(|v| v == p)),
        ds.filter_patients(|p| val.iter().any(|v| v == p)),
    )
}

/// Cycles through shuffled epochs of `0..n`.
#[derive(Debug, Clone)]
pub(crate) struct BatchSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn next_batch(&mut self, b: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b && self.n > 0 {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs `f` over `items` on up to `jobs` threads; results keep item order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Vec<Result<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<usize, Result<R>>> = Mutex::new(BTreeMap::new());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("worker panicked").insert(i, r);
            });
        }
    });
    results
        .into_inner()
        .expect("worker panicked")
        .into_values()
        .collect()
}
