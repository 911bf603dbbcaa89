//! Run configuration: a TOML document layered over a named preset.
//!
//! Every key is optional. Missing keys take the preset value, so an empty
//! document is the complete `desk` configuration. Validation reports every
//! problem it finds, each under its dotted key path.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::SyntheticTaskConfig;
use crate::error::{ConfigIssue, Error, Result};
use crate::objectives::LossWeights;
use crate::pipelines::{
    Baseline, ExperimentPlan, PipelineConfig, PseudoConfig, SegStageConfig, TranslationStageConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small networks and short schedules for CPU runs.
    #[default]
    Desk,
    /// Published batch sizes, learning rates and iteration counts.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::config(
                "preset",
                format!("unknown preset `{s}`; expected `desk` or `paper`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Generator settings, used when `data_dir` is absent.
    pub synthetic: SyntheticTaskConfig,
    /// Directory written by `gen-data`, holding `source/`, `target_unlabeled/`
    /// and `target_heldout/`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub baseline: Baseline,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<Vec<usize>>,
    pub num_folds: usize,
    pub fold_seed: u64,
    pub allow_adapter: bool,
    /// Fractions of labelled target patients for `sweep`.
    pub sweep_fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Single-threaded tensor kernels for bit-identical reruns.
    pub deterministic: bool,
    pub output_root: PathBuf,
    /// Parallel fold and seed workers of `experiment` and `sweep`.
    pub jobs: usize,
    pub task: TaskConfig,
    pub loss_weights: LossWeights,
    pub source: SegStageConfig,
    pub translation: TranslationStageConfig,
    pub target: SegStageConfig,
    pub pseudo: PseudoConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let pipeline = match preset {
            Preset::Desk => PipelineConfig::desk(),
            Preset::Paper => PipelineConfig::full(),
        };
        Self {
            preset,
            seed: 0,
            deterministic: true,
            output_root: PathBuf::from("runs"),
            jobs: 1,
            task: TaskConfig {
                synthetic: SyntheticTaskConfig::desk(),
                data_dir: None,
            },
            loss_weights: pipeline.translation.weights,
            source: pipeline.source,
            translation: pipeline.translation,
            target: pipeline.target,
            pseudo: pipeline.pseudo,
            experiment: ExperimentConfig {
                baseline: Baseline::Full,
                seeds: vec![0, 1, 2],
                folds: None,
                num_folds: pipeline.num_folds,
                fold_seed: pipeline.fold_seed,
                allow_adapter: false,
                sweep_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            },
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let mut translation = self.translation;
        translation.weights = self.loss_weights;
        PipelineConfig {
            source: self.source,
            translation,
            target: self.target,
            pseudo: self.pseudo.clone(),
            num_folds: self.experiment.num_folds,
            fold_seed: self.experiment.fold_seed,
        }
    }

    pub fn plan(&self) -> ExperimentPlan {
        ExperimentPlan {
            baseline: self.experiment.baseline,
            seeds: self.experiment.seeds.clone(),
            folds: self.experiment.folds.clone(),
            allow_adapter: self.experiment.allow_adapter,
        }
    }

    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = self.pipeline().issues();
        if let Err(e) = self.task.synthetic.validate() {
            out.push(ConfigIssue::new("task.synthetic", e.to_string()));
        } else {
            let (s, t) = (
                &self.task.synthetic.source_spec,
                &self.task.synthetic.target_spec,
            );
            if let Err(e) = self
                .translation
                .net
                .check_spec(s)
                .and_then(|_| self.translation.net.check_spec(t))
            {
                out.push(ConfigIssue::new("translation.net", e.to_string()));
            }
            for (key, stage) in [("source", &self.source), ("target", &self.target)] {
                if let Err(e) = stage.net.check_size(s.height, s.width) {
                    out.push(ConfigIssue::new(format!("{key}.net.depth"), e.to_string()));
                }
            }
        }
        if let Some(dir) = &self.task.data_dir {
            if !dir.is_dir() {
                out.push(ConfigIssue::new(
                    "task.data_dir",
                    format!("`{}` does not exist", dir.display()),
                ));
            }
        }
        if self.jobs == 0 {
            out.push(ConfigIssue::new("jobs", "must be positive"));
        }
        let e = &self.experiment;
        if e.seeds.is_empty() {
            out.push(ConfigIssue::new(
                "experiment.seeds",
                "must list at least one seed",
            ));
        }
        if let Some(folds) = &e.folds {
            if folds.is_empty() || folds.iter().any(|&f| f >= e.num_folds) {
                out.push(ConfigIssue::new(
                    "experiment.folds",
                    format!(
                        "must be a nonempty list of fold indices below {}",
                        e.num_folds
                    ),
                ));
            }
        }
        let f = &e.sweep_fractions;
        if f.is_empty()
            || f.iter().any(|x| !(0.0..=1.0).contains(x))
            || f.windows(2).any(|w| w[0] >= w[1])
        {
            out.push(ConfigIssue::new(
                "experiment.sweep_fractions",
                "must be a nonempty increasing list within [0, 1]",
            ));
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<config>", e.to_string()))
    }
}

/// Parses and validates `text`, taking defaults from its `preset` key.
pub fn validate_config(text: &str) -> Result<RunConfig> {
    validate_config_with(text, None)
}

/// Like [`validate_config`]; a given `preset` replaces the one named in `text`.
pub fn validate_config_with(text: &str, preset: Option<Preset>) -> Result<RunConfig> {
    let user: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
    let preset = match preset {
        Some(p) => p,
        None => match user.get("preset") {
            None => Preset::Desk,
            Some(Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::config("preset", "must be a string")),
        },
    };
    let defaults = RunConfig::preset(preset);
    let base = Value::try_from(&defaults).map_err(|e| Error::config("<config>", e.to_string()))?;
    let Value::Table(mut merged) = base else {
        unreachable!("a struct serializes to a table")
    };

    let mut issues = Vec::new();
    unknown_keys(&user, &merged, "", &mut issues);
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    merge(&mut merged, user);
    merged.insert(
        "preset".into(),
        Value::try_from(preset).expect("enum serializes"),
    );

    let cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(merged)).map_err(|e| {
        let key = e.path().to_string();
        Error::config(key, e.into_inner().message().to_string())
    })?;
    let issues = cfg.issues();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(issues))
    }
}

/// Keys that may be absent from a serialized default.
const OPTIONAL_KEYS: [&str; 4] = [
    "task.data_dir",
    "experiment.folds",
    "source.net.adapter_channels",
    "target.net.adapter_channels",
];

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn switches_variant(user: &Table, base: &Table) -> bool {
    matches!((user.get("kind"), base.get("kind")), (Some(a), Some(b)) if a != b)
}

fn unknown_keys(user: &Table, base: &Table, prefix: &str, out: &mut Vec<ConfigIssue>) {
    if switches_variant(user, base) {
        return;
    }
    for (k, v) in user {
        let path = join(prefix, k);
        match (v, base.get(k)) {
            (Value::Table(u), Some(Value::Table(b))) => unknown_keys(u, b, &path, out),
            (_, Some(_)) => {}
            (_, None) if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            (_, None) => out.push(ConfigIssue::new(path, "unknown key")),
        }
    }
}

fn merge(base: &mut Table, user: Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(u)) if !switches_variant(&u, b) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
