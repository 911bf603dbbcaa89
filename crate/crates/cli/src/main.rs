use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::{env, fs};

use clap::{Args, Parser, Subcommand};
use hetseg::config::{validate_config_with, Preset, RunConfig};
use hetseg::data::{
    generate_synthetic_task, load_dataset, load_task, save_dataset, save_task, SyntheticTask,
};
use hetseg::evaluation::{aggregate, emit_plots, emit_report, evaluate_segmenter};
use hetseg::nn::DEFAULT_DTYPE;
use hetseg::pipelines::{
    calibrate, derive_seed, run_experiment, source_split, source_stage, sweep_supervision,
    train_target_segmenter, translate_dataset, translation_stage, write_run, Baseline, LossLog,
    PipelineConfig, RunPaths, SegmenterOutcome, SharedStages, TargetOptions, TranslationOutcome,
    ValidationSet, Workbench,
};
use hetseg::pseudo::generate_pseudolabels;
use hetseg::{Direction, Error, Result, Segmenter, TranslationModel};

/// Domain adaptation for segmentation across imaging domains with different channel counts.
#[derive(Debug, Parser)]
#[command(name = "hetseg", version)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Preset the configuration is layered over (`desk` or `paper`).
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Run seed; overrides `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root; overrides `output_root` in the configuration.
    #[arg(long, global = true, env = "HETSEG_RUN_ROOT")]
    run_root: Option<PathBuf>,

    /// Parallel fold and seed workers for `experiment` and `sweep`.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Task directory written by `gen-data` [default: <run root>/data].
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic source and target datasets.
    GenData {
        /// Output directory [default: <run root>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the source segmenter.
    TrainSource(DataArg),
    /// Train the translation model (needs the source segmenter).
    TrainTranslation(DataArg),
    /// Pseudo-label the unlabelled target images (needs the translation model).
    PseudoLabel(DataArg),
    /// Train the target segmenter on synthetic, pseudo-labelled and unlabelled images.
    TrainTarget {
        #[command(flatten)]
        data: DataArg,
        /// Leave out the entropy term.
        #[arg(long)]
        no_entmin: bool,
        /// Leave out the pseudo-label term.
        #[arg(long)]
        no_pslab: bool,
    },
    /// Evaluate the target segmenter on the held-out target patients.
    Evaluate(DataArg),
    /// Cross-validate one baseline over folds and seeds.
    Experiment {
        #[command(flatten)]
        data: DataArg,
        /// Baseline id, i to viii.
        #[arg(long)]
        baseline: Option<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated fold indices.
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
        /// Let baseline iii learn a channel projection between domains.
        #[arg(long)]
        allow_adapter: bool,
    },
    /// Vary the fraction of labelled target patients.
    Sweep {
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated fractions in [0, 1].
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated fold indices.
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
    },
}

struct Ctx {
    cfg: RunConfig,
    pipeline: PipelineConfig,
    root: PathBuf,
}

impl Ctx {
    fn data_dir(&self, arg: &DataArg) -> PathBuf {
        arg.data
            .clone()
            .or_else(|| self.cfg.task.data_dir.clone())
            .unwrap_or_else(|| self.root.join("data"))
    }

    fn load_data(&self, arg: &DataArg) -> Result<SyntheticTask> {
        let dir = self.data_dir(arg);
        if !dir.join("source").is_dir() {
            return Err(Error::MissingStage(format!(
                "dataset missing at {}; run gen-data first",
                dir.display()
            )));
        }
        load_task(&dir)
    }

    /// Task data for `experiment` and `sweep`: loaded when present, generated otherwise.
    fn task(&self, arg: &DataArg) -> Result<SyntheticTask> {
        let dir = self.data_dir(arg);
        if dir.join("source").is_dir() {
            load_task(&dir)
        } else {
            log::info!(
                "no data at {}; generating the synthetic task",
                dir.display()
            );
            generate_synthetic_task(&self.cfg.task.synthetic)
        }
    }

    fn work(&self) -> RunPaths {
        RunPaths::new(&self.root, "pipeline", 0, self.cfg.seed)
    }

    fn echo_config(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&self.cfg)?,
        )?;
        fs::write(dir.join("config.toml"), self.cfg.to_toml()?)?;
        Ok(())
    }

    fn shared(&self, task: &SyntheticTask, work: &RunPaths) -> Result<SharedStages> {
        let path = work.checkpoint("segmenter_source");
        if !path.is_file() {
            return Err(Error::MissingStage(
                "source segmenter checkpoint missing; run train-source first".into(),
            ));
        }
        let (segmenter, iteration) = Segmenter::load(&path, DEFAULT_DTYPE)?;
        let (source_train, source_val) =
            source_split(&task.source_labeled, &self.pipeline, self.cfg.seed);
        Ok(SharedStages {
            seed: self.cfg.seed,
            source_train,
            source_val,
            source: SegmenterOutcome {
                segmenter,
                log: LossLog::default(),
                validation_dsc: None,
                best_iteration: iteration as usize,
                trained_on: Default::default(),
            },
            translations: Default::default(),
        })
    }

    fn translation(&self, work: &RunPaths) -> Result<TranslationModel> {
        let path = work.checkpoint("translation");
        if !path.is_file() {
            return Err(Error::MissingStage(
                "translation checkpoint missing; run train-translation first".into(),
            ));
        }
        Ok(TranslationModel::load(&path, DEFAULT_DTYPE)?.0)
    }
}

fn resolve(cli: &Cli) -> Result<Ctx> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::data(p, e.to_string()))?,
        None => String::new(),
    };
    let preset = cli
        .preset
        .as_deref()
        .map(str::parse::<Preset>)
        .transpose()?;
    let mut cfg = validate_config_with(&text, preset)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::config("jobs", "must be positive"));
        }
        cfg.jobs = j;
    }
    if let Some(r) = &cli.run_root {
        cfg.output_root = r.clone();
    }
    match &cli.command {
        Command::Experiment {
            baseline,
            seeds,
            folds,
            allow_adapter,
            ..
        } => {
            if let Some(b) = baseline {
                cfg.experiment.baseline = b.parse::<Baseline>()?;
            }
            if let Some(s) = seeds {
                cfg.experiment.seeds = s.clone();
            }
            if folds.is_some() {
                cfg.experiment.folds = folds.clone();
            }
            cfg.experiment.allow_adapter |= allow_adapter;
        }
        Command::Sweep {
            fractions,
            seeds,
            folds,
            ..
        } => {
            if let Some(f) = fractions {
                cfg.experiment.sweep_fractions = f.clone();
            }
            if let Some(s) = seeds {
                cfg.experiment.seeds = s.clone();
            }
            if folds.is_some() {
                cfg.experiment.folds = folds.clone();
            }
        }
        _ => {}
    }
    let issues = cfg.issues();
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    Ok(Ctx {
        pipeline: cfg.pipeline(),
        root: cfg.output_root.clone(),
        cfg,
    })
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = resolve(cli)?;
    if ctx.cfg.deterministic && env::var_os("RAYON_NUM_THREADS").is_none() {
        env::set_var("RAYON_NUM_THREADS", "1");
    }
    let seed = ctx.cfg.seed;
    let work = ctx.work();
    match &cli.command {
        Command::GenData { out } => {
            let dir = out
                .clone()
                .unwrap_or_else(|| ctx.data_dir(&DataArg { data: None }));
            let task = generate_synthetic_task(&ctx.cfg.task.synthetic)?;
            save_task(&task, &dir)?;
            println!(
                "wrote {} source, {} unlabelled target and {} held-out target slices to {}",
                task.source_labeled.len(),
                task.target_unlabeled.len(),
                task.target_heldout.len(),
                dir.display()
            );
        }
        Command::TrainSource(data) => {
            let task = ctx.load_data(data)?;
            ctx.echo_config(&work.dir)?;
            let stages = source_stage(&task.source_labeled, &ctx.pipeline, seed)?;
            let out = &stages.source;
            out.segmenter.save(
                &work.checkpoint("segmenter_source"),
                out.best_iteration as u64,
            )?;
            out.log.write_csv(&work.dir.join("loss_source.csv"))?;
            println!(
                "source segmenter: validation DSC {:.4} at iteration {}",
                out.validation_dsc.unwrap_or(f64::NAN),
                out.best_iteration
            );
        }
        Command::TrainTranslation(data) => {
            let task = ctx.load_data(data)?;
            let stages = ctx.shared(&task, &work)?;
            ctx.echo_config(&work.dir)?;
            let t = translation_stage(
                &ctx.pipeline,
                &stages,
                &task.target_unlabeled.without_masks(),
                true,
            )?;
            let iterations = ctx.pipeline.translation.train.iterations as u64;
            t.outcome
                .model
                .save(&work.checkpoint("translation"), iterations)?;
            t.outcome
                .log
                .write_csv(&work.dir.join("loss_translation.csv"))?;
            println!("translation model trained for {iterations} iterations");
        }
        Command::PseudoLabel(data) => {
            let tm = ctx.translation(&work)?;
            let task = ctx.load_data(data)?;
            let stages = ctx.shared(&task, &work)?;
            let outcome = TranslationOutcome {
                model: tm,
                log: LossLog::default(),
                trained_on: Default::default(),
            };
            let t = calibrate(&ctx.pipeline, &stages, outcome, true)?;
            let pseudo = generate_pseudolabels(
                &task.target_unlabeled.without_masks(),
                &t.outcome.model,
                &stages.source.segmenter,
                t.threshold,
                ctx.pipeline.pseudo.style,
                derive_seed(seed, &[53]),
            )?;
            save_dataset(&pseudo, &work.dir.join("pseudo"))?;
            let coverage = pseudo
                .samples
                .iter()
                .filter_map(|s| s.pseudo.map(|p| p.coverage))
                .sum::<f64>()
                / pseudo.len() as f64;
            fs::write(
                work.dir.join("pseudo.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "threshold": t.threshold,
                    "mean_coverage": coverage,
                }))?,
            )?;
            println!(
                "pseudo-labelled {} slices: threshold {}, mean coverage {coverage:.4}",
                pseudo.len(),
                t.threshold
            );
        }
        Command::TrainTarget {
            data,
            no_entmin,
            no_pslab,
        } => {
            let tm = ctx.translation(&work)?;
            let task = ctx.load_data(data)?;
            let stages = ctx.shared(&task, &work)?;
            let options = TargetOptions {
                use_entmin: !no_entmin,
                use_pslab: !no_pslab,
            };
            let pseudo_dir = work.dir.join("pseudo");
            let targets = if options.use_pslab {
                if !pseudo_dir.is_dir() {
                    return Err(Error::MissingStage(
                        "pseudo-labels missing; run pseudo-label first".into(),
                    ));
                }
                load_dataset(&pseudo_dir)?
            } else {
                task.target_unlabeled.without_masks()
            };
            let val_source = if stages.source_val.is_empty() {
                &stages.source_train
            } else {
                &stages.source_val
            };
            let validation = ValidationSet::Direct(translate_dataset(
                val_source,
                &tm,
                Direction::SourceToTarget,
                derive_seed(seed, &[51, 1]),
            )?);
            ctx.echo_config(&work.dir)?;
            let out = train_target_segmenter(
                &stages.source_train,
                &targets,
                &tm,
                options,
                &ctx.pipeline.target,
                derive_seed(seed, &[70, 0]),
                Some(&validation),
            )?;
            out.segmenter
                .save(&work.checkpoint("segmenter"), out.best_iteration as u64)?;
            out.log.write_csv(&work.loss())?;
            println!(
                "target segmenter: validation DSC {:.4} at iteration {}",
                out.validation_dsc.unwrap_or(f64::NAN),
                out.best_iteration
            );
        }
        Command::Evaluate(data) => {
            let path = work.checkpoint("segmenter");
            if !path.is_file() {
                return Err(Error::MissingStage(
                    "target segmenter checkpoint missing; run train-target first".into(),
                ));
            }
            let (seg, _) = Segmenter::load(&path, DEFAULT_DTYPE)?;
            let task = ctx.load_data(data)?;
            let record = evaluate_segmenter(&seg, &task.target_heldout, 0, seed)?;
            let report = aggregate(&[record])?;
            emit_report(&report, &work.dir)?;
            println!("{}", serde_json::to_string(&report.mean)?);
        }
        Command::Experiment { data, .. } => {
            let wb = Workbench::new(ctx.task(data)?, ctx.pipeline.clone())?.with_jobs(ctx.cfg.jobs);
            let plan = ctx.cfg.plan();
            let name = format!("baseline-{}", plan.baseline.id());
            let (report, runs) = run_experiment(&wb, &plan)?;
            for r in &runs {
                write_run(&ctx.root, &name, r, &ctx.cfg)?;
            }
            let dir = ctx.root.join(&name);
            emit_report(&report, &dir)?;
            ctx.echo_config(&dir)?;
            println!("{name}: {}", serde_json::to_string(&report.mean)?);
        }
        Command::Sweep { data, .. } => {
            let wb = Workbench::new(ctx.task(data)?, ctx.pipeline.clone())?.with_jobs(ctx.cfg.jobs);
            let e = &ctx.cfg.experiment;
            let (records, runs) =
                sweep_supervision(&wb, &e.sweep_fractions, &e.seeds, e.folds.clone())?;
            for r in &runs {
                write_run(
                    &ctx.root,
                    &format!("sweep-{}-{:.2}", r.label, r.fraction),
                    r,
                    &ctx.cfg,
                )?;
            }
            let dir = ctx.root.join("sweep");
            fs::create_dir_all(&dir)?;
            let mut w = csv::Writer::from_path(dir.join("sweep.csv")).map_err(Error::from)?;
            for r in &records {
                w.serialize(r).map_err(Error::from)?;
            }
            w.flush()?;
            emit_plots(&records, &dir)?;
            ctx.echo_config(&dir)?;
            println!("sweep: {} runs written to {}", runs.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", category.as_str());
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
