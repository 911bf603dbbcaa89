//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! Criteria 5 and 8 drive the `hetseg` binary on the desk preset; criteria
//! 6, 7, 9 and 10 share one in-process workbench over seeds 0, 1 and 2.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use hetseg::data::generate_synthetic_task;
use hetseg::evaluation::{evaluate_segmenter, lesion_preservation_score, MetricsReport};
use hetseg::nn::DEFAULT_DTYPE;
use hetseg::pipelines::{Baseline, PipelineConfig, RunOutcome, SweepMethod, Workbench};
use hetseg::{Segmenter, SyntheticTaskConfig};

const SEEDS: [u64; 3] = [0, 1, 2];
/// Translation iterations of the shared workbench; the stage CLI runs use the
/// full desk preset.
const FIXTURE_TRANSLATION_ITERS: usize = 1000;
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);
const STAGES: [&str; 6] = [
    "gen-data",
    "train-source",
    "train-translation",
    "pseudo-label",
    "train-target",
    "evaluate",
];

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_1() -> Outcome {
    use common::losses::*;
    gan_examples();
    l1_examples();
    dice_examples();
    entropy_examples();
    composite_examples();
    Ok("GAN, L1, dice, entropy and composite examples hold".into())
}

fn criterion_2() -> Outcome {
    use common::grads::*;
    adversarial_losses();
    reconstruction_loss();
    dice_losses();
    entropy_losses();
    translation_networks();
    segmenter_network();
    input_gradients_flow_through_translation();
    Ok("20 trials per loss and network family below 1e-4".into())
}

fn criterion_3() -> Outcome {
    common::oracles::pseudo_labels_match_per_pixel_oracle();
    Ok("100 instances x 4 thresholds match; coverage non-increasing".into())
}

fn criterion_4() -> Outcome {
    common::oracles::ap_matches_rank_walk();
    Ok("1000 instances within 1e-9".into())
}

// ---- criteria 5 and 8: the stage CLI on the desk preset

struct PipelineRun {
    elapsed: Duration,
    report: String,
    source_ckpt_before: Vec<u8>,
    source_ckpt_after: Vec<u8>,
    translation_ckpt_before: Vec<u8>,
    translation_ckpt_after: Vec<u8>,
}

fn run_pipeline(root: &Path) -> Result<PipelineRun, String> {
    let start = Instant::now();
    let work = root.join("pipeline/0/0");
    let ckpt = |name: &str| std::fs::read(work.join("checkpoints").join(name)).unwrap_or_default();
    let mut snapshots = BTreeMap::new();
    for stage in STAGES {
        let out = Command::new(env!("CARGO_BIN_EXE_hetseg"))
            .arg(stage)
            .env("HETSEG_RUN_ROOT", root)
            .env_remove("RUST_LOG")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "{stage} failed: {}",
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
        snapshots.insert(
            stage,
            (ckpt("segmenter_source.ckpt"), ckpt("translation.ckpt")),
        );
    }
    let report = std::fs::read_to_string(work.join("metrics.json")).map_err(|e| e.to_string())?;
    Ok(PipelineRun {
        elapsed: start.elapsed(),
        report,
        source_ckpt_before: snapshots["train-source"].0.clone(),
        source_ckpt_after: snapshots["evaluate"].0.clone(),
        translation_ckpt_before: snapshots["train-translation"].1.clone(),
        translation_ckpt_after: snapshots["evaluate"].1.clone(),
    })
}

fn pipeline_runs() -> &'static Result<[PipelineRun; 2], String> {
    static RUNS: OnceLock<Result<[PipelineRun; 2], String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        Ok([run_pipeline(a.path())?, run_pipeline(b.path())?])
    })
}

fn criterion_5() -> Outcome {
    let run = &pipeline_runs().as_ref().map_err(Clone::clone)?[0];
    let report: MetricsReport = serde_json::from_str(&run.report).map_err(|e| e.to_string())?;
    ensure(!report.records.is_empty(), "report has no records")?;
    let m = report.mean;
    for (name, v) in [
        ("recall", m.recall),
        ("precision", m.precision),
        ("dsc", m.dsc),
        ("ap", m.ap),
    ] {
        ensure(
            (0.0..=1.0).contains(&v),
            format!("{name} = {v} outside [0, 1]"),
        )?;
    }
    ensure(
        run.elapsed <= PIPELINE_BUDGET,
        format!("pipeline took {:.0} s", run.elapsed.as_secs_f64()),
    )?;
    Ok(format!(
        "six stages in {:.0} s; held-out DSC {:.3}, AP {:.3}",
        run.elapsed.as_secs_f64(),
        m.dsc,
        m.ap
    ))
}

fn criterion_8() -> Outcome {
    let [a, b] = pipeline_runs().as_ref().map_err(Clone::clone)?;
    ensure(!a.source_ckpt_before.is_empty(), "no source checkpoint")?;
    ensure(
        a.source_ckpt_before == a.source_ckpt_after,
        "source segmenter checkpoint changed after its stage",
    )?;
    ensure(
        a.translation_ckpt_before == a.translation_ckpt_after,
        "translation checkpoint changed after its stage",
    )?;
    ensure(
        a.report == b.report,
        "two deterministic runs gave different reports",
    )?;

    let fx = fixture().as_ref().map_err(Clone::clone)?;
    for (seed, (before, after)) in &fx.checksums_before_after() {
        ensure(
            before == after,
            format!("seed {seed}: frozen model checksums changed during target training"),
        )?;
    }
    Ok("checkpoints and in-memory checksums unchanged; reruns byte-identical".into())
}

// ---- criteria 6, 7, 9 and 10: the shared workbench

struct Fixture {
    wb: Workbench,
    /// `(seg_s, translation λ_sem=10, translation λ_sem=0)` checksums per seed.
    frozen_before: BTreeMap<u64, [u64; 3]>,
    runs: BTreeMap<(String, u64), RunOutcome>,
    untrained_dsc: f64,
}

impl Fixture {
    fn fold(seed: u64) -> usize {
        seed as usize
    }

    fn frozen_checksums(wb: &Workbench, seed: u64) -> hetseg::Result<[u64; 3]> {
        let s = wb.shared(seed, &[true, false])?;
        Ok([
            s.source.segmenter.checksum()?,
            s.translations[&true].outcome.model.checksum()?,
            s.translations[&false].outcome.model.checksum()?,
        ])
    }

    fn checksums_before_after(&self) -> BTreeMap<u64, ([u64; 3], [u64; 3])> {
        SEEDS
            .iter()
            .map(|&s| {
                let after = Self::frozen_checksums(&self.wb, s).expect("cached stages");
                (s, (self.frozen_before[&s], after))
            })
            .collect()
    }

    fn run(&self, label: &str, seed: u64) -> &RunOutcome {
        &self.runs[&(label.to_string(), seed)]
    }

    fn mean_dsc(&self, label: &str) -> f64 {
        mean(SEEDS.iter().map(|&s| self.run(label, s).record.dsc))
    }
}

fn build_fixture() -> hetseg::Result<Fixture> {
    let mut cfg = PipelineConfig::desk();
    cfg.translation.train.iterations = FIXTURE_TRANSLATION_ITERS;
    let task = generate_synthetic_task(&SyntheticTaskConfig::desk())?;
    let wb = Workbench::new(task, cfg)?;
    let mut frozen_before = BTreeMap::new();
    for &seed in &SEEDS {
        frozen_before.insert(seed, Fixture::frozen_checksums(&wb, seed)?);
    }
    let mut runs = BTreeMap::new();
    for &seed in &SEEDS {
        let fold = Fixture::fold(seed);
        for (key, b) in [
            ("viii", Baseline::Full),
            ("vii", Baseline::SemanticPseudo),
            ("iv", Baseline::Synthetic),
            ("ii", Baseline::TargetPlusSynthetic),
        ] {
            runs.insert((key.to_string(), seed), wb.run(b, fold, seed, false)?);
        }
        for (key, f) in [("sweep-0", 0.0), ("sweep-1", 1.0)] {
            runs.insert(
                (key.to_string(), seed),
                wb.run_sweep_point(SweepMethod::Ours, f, fold, seed)?,
            );
        }
    }
    let mut untrained = Vec::new();
    for &seed in &SEEDS {
        let net = wb.config.target.net.for_domain(&wb.target_heldout.spec);
        let seg = Segmenter::new(net, 1000 + seed, DEFAULT_DTYPE)?;
        let fold = Fixture::fold(seed);
        untrained.push(evaluate_segmenter(&seg, &wb.test_set(fold), fold, seed)?.dsc);
    }
    Ok(Fixture {
        wb,
        frozen_before,
        runs,
        untrained_dsc: mean(untrained),
    })
}

fn fixture() -> &'static Result<Fixture, String> {
    static FIXTURE: OnceLock<Result<Fixture, String>> = OnceLock::new();
    FIXTURE.get_or_init(|| build_fixture().map_err(|e| e.to_string()))
}

fn criterion_6() -> Outcome {
    let fx = fixture().as_ref().map_err(Clone::clone)?;
    let full = fx.mean_dsc("viii");
    let no_sem = fx.mean_dsc("iv");
    let margin = full - no_sem;
    ensure(
        full > fx.untrained_dsc,
        format!(
            "viii DSC {full:.3} does not beat untrained {:.3}",
            fx.untrained_dsc
        ),
    )?;
    ensure(margin >= -0.02, format!("viii - iv = {margin:+.3} < -0.02"))?;
    let warn = if margin < 0.02 {
        " (warning: margin below +0.02)"
    } else {
        ""
    };
    Ok(format!(
        "DSC viii {full:.3}, iv {no_sem:.3}, untrained {:.3}; margin {margin:+.3}{warn}",
        fx.untrained_dsc
    ))
}

fn criterion_7() -> Outcome {
    let fx = fixture().as_ref().map_err(Clone::clone)?;
    let mut with = Vec::new();
    let mut without = Vec::new();
    for &seed in &SEEDS {
        let s = fx
            .wb
            .shared(seed, &[true, false])
            .map_err(|e| e.to_string())?;
        let seg = &s.source.segmenter;
        let score = |sem: bool| {
            lesion_preservation_score(
                &s.translations[&sem].outcome.model,
                seg,
                &s.source_val,
                500 + seed,
            )
            .map_err(|e| e.to_string())
        };
        with.push(score(true)?);
        without.push(score(false)?);
    }
    let (a, b) = (mean(with), mean(without));
    ensure(
        a > b,
        format!("preservation with semantic loss {a:.3} <= without {b:.3}"),
    )?;
    Ok(format!(
        "preservation lambda_sem=10 {a:.3} > lambda_sem=0 {b:.3}"
    ))
}

fn criterion_9() -> Outcome {
    let fx = fixture().as_ref().map_err(Clone::clone)?;
    for &seed in &SEEDS {
        ensure(
            fx.run("sweep-0", seed).record == fx.run("viii", seed).record,
            format!("seed {seed}: f=0 differs from baseline viii"),
        )?;
        ensure(
            fx.run("sweep-1", seed).record == fx.run("ii", seed).record,
            format!("seed {seed}: f=1 differs from baseline ii"),
        )?;
        let revealed = fx.wb.reveal(Fixture::fold(seed), seed, 1.0).0;
        let trained = &fx.run("sweep-1", seed).segmenter.trained_on;
        ensure(
            revealed.samples.iter().all(|s| trained.contains(&s.name)),
            "f=1 did not train on every training-fold target label",
        )?;
    }
    let (lo, hi) = (fx.mean_dsc("sweep-0"), fx.mean_dsc("sweep-1"));
    ensure(
        hi >= lo,
        format!("DSC fell from {lo:.3} at f=0 to {hi:.3} at f=1"),
    )?;
    Ok(format!(
        "endpoints exact; DSC {lo:.3} at f=0 -> {hi:.3} at f=1"
    ))
}

fn criterion_10() -> Outcome {
    let fx = fixture().as_ref().map_err(Clone::clone)?;
    let with = mean(SEEDS.iter().map(|&s| fx.run("viii", s).test_entropy));
    let without = mean(SEEDS.iter().map(|&s| fx.run("vii", s).test_entropy));
    ensure(
        with < without,
        format!("entropy with entmin {with:.4} >= without {without:.4}"),
    )?;
    Ok(format!(
        "held-out entropy {with:.4} with entmin < {without:.4} without"
    ))
}

type Criterion = (u8, &'static str, fn() -> Outcome);

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 10] = [
        (1, "loss oracles", criterion_1),
        (2, "gradient checks", criterion_2),
        (3, "pseudo-label oracle", criterion_3),
        (4, "average-precision oracle", criterion_4),
        (5, "desk pipeline", criterion_5),
        (6, "adaptation efficacy", criterion_6),
        (7, "lesion preservation", criterion_7),
        (8, "stage isolation and determinism", criterion_8),
        (9, "sweep endpoints", criterion_9),
        (10, "entropy minimization", criterion_10),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
