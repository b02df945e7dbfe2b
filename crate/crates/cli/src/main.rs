//! `qfd`: train, distill, evaluate and compare quantized models.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad configuration,
//! 3 numerical failure (non-finite loss, failed gradcheck), 4 missing
//! checkpoint or dataset file.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qfd_core::distill::{teacher_warmup, DistillConfig, Regime, TeacherBundle};
use qfd_core::models::{build_model, checkpoint, Model};
use qfd_core::selfcheck;
use qfd_core::tensor::gradcheck::GradcheckConfig;
use qfd_core::train::{
    copy_weights, evaluate, run_comparison, train_one, ComparisonReport, RunOutput,
};
use serde_json::json;

use config::{ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "qfd",
    version,
    about = "Quantized feature distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed and model.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with cross-entropy only (full precision or quantized).
    Train(Common),
    /// Train a student under the configured distillation regime.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint; overrides distill.teacher_checkpoint.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Quantize a teacher's output feature and fine-tune it briefly.
    QuantizeTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Report eval-split top-1 of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the regime x bit-width grid from the compare section.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Use this full-precision teacher instead of training one.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Finite-difference checks of every primitive and small full models.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 80)]
        probes: usize,
    },
}

#[derive(Debug)]
struct GradcheckFailed(usize);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradcheck suite(s) exceeded tolerance", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<GradcheckFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<qfd_core::Error>() {
            return match e {
                qfd_core::Error::Config(_)
                | qfd_core::Error::QuantParams(_)
                | qfd_core::Error::Shape { .. } => 2,
                qfd_core::Error::Numerical(_) | qfd_core::Error::NonScalarLoss(_) => 3,
                qfd_core::Error::MissingArtifact(_) => 4,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => cmd_train(&common),
        Command::Distill { common, teacher } => cmd_distill(&common, teacher),
        Command::QuantizeTeacher { common, teacher } => cmd_quantize_teacher(&common, teacher),
        Command::Eval { common, checkpoint } => cmd_eval(&common, &checkpoint),
        Command::Compare { common, teacher } => cmd_compare(&common, teacher),
        Command::Gradcheck { out, seed, probes } => cmd_gradcheck(out.as_deref(), seed, probes),
    }
}

/// Loads the config, applies overrides, and writes `config.resolved.toml`
/// into the output directory.
fn prepare(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.model.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(
        cfg.out_dir.join("config.resolved.toml"),
        cfg.resolved_toml(),
    )?;
    Ok(cfg)
}

fn student(cfg: &ExperimentConfig) -> Result<Model<f32>> {
    let spec = cfg.model.spec();
    match &cfg.model.init_checkpoint {
        None => Ok(build_model(&spec, cfg.model.seed)?),
        Some(path) => {
            let (init, _) = checkpoint::load(path)?;
            let mut model = build_model(&spec, cfg.model.seed)?;
            copy_weights(&mut model, &init)
                .with_context(|| format!("initializing from {}", path.display()))?;
            Ok(model)
        }
    }
}

fn teacher_path(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| cfg.distill.teacher_checkpoint.clone())
}

fn report_run(run: &RunOutput, out: &Path) {
    println!(
        "best top1 {:.2} (epoch {}), last top1 {:.2}; outputs in {}",
        run.best_top1,
        run.best_epoch,
        run.last_top1,
        out.display()
    );
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = prepare(common)?;
    if cfg.distill.regime != Regime::Baseline {
        log::warn!(
            "`train` ignores distill.regime = {}; use `distill`",
            cfg.distill.regime
        );
    }
    let (train, eval) = cfg.dataset.load()?;
    let model = student(&cfg)?;
    let run = train_one(
        &DistillConfig::baseline(),
        model,
        None,
        &train,
        &eval,
        &cfg.train,
        Some(&cfg.out_dir),
    )?;
    report_run(&run, &cfg.out_dir);
    Ok(())
}

/// Loads a teacher and brings its feature quantizer to `bits`, running the
/// warmup when the checkpoint still has a full-precision feature.
fn load_teacher(
    cfg: &ExperimentConfig,
    path: &Path,
    distill: &DistillConfig,
    train: &qfd_core::data::Dataset,
    eval: &qfd_core::data::Dataset,
) -> Result<TeacherBundle> {
    let (teacher, _) = checkpoint::load(path)?;
    let bits = distill.effective_teacher_bits();
    let current = teacher.feature_quantizer().map(|q| q.params.bits);
    if current == bits.bits() {
        return Ok(TeacherBundle::new(teacher)?);
    }
    if let Some(have) = current {
        bail!(ConfigError(format!(
            "teacher {} has a {have}-bit feature but distill.teacher_feature_bits is {bits}",
            path.display()
        )));
    }
    log::info!("teacher feature is full precision; warming up at {bits} bits");
    let (bundle, report) = teacher_warmup(
        teacher,
        train,
        eval,
        bits,
        &cfg.train,
        distill.teacher_min_top1,
    )?;
    println!(
        "teacher warmup {}-bit: top1 {:.2} -> {:.2}",
        report.bits, report.top1_before, report.top1_after
    );
    Ok(bundle)
}

fn cmd_distill(common: &Common, teacher: Option<PathBuf>) -> Result<()> {
    let cfg = prepare(common)?;
    let distill = cfg.distill();
    let (train, eval) = cfg.dataset.load()?;
    let bundle = match (distill.regime.needs_teacher(), teacher_path(&cfg, teacher)) {
        (false, _) => None,
        (true, None) => bail!(ConfigError(format!(
            "regime {} needs --teacher or distill.teacher_checkpoint",
            distill.regime
        ))),
        (true, Some(path)) => Some(load_teacher(&cfg, &path, &distill, &train, &eval)?),
    };
    let model = student(&cfg)?;
    let run = train_one(
        &distill,
        model,
        bundle.as_ref(),
        &train,
        &eval,
        &cfg.train,
        Some(&cfg.out_dir),
    )?;
    report_run(&run, &cfg.out_dir);
    Ok(())
}

fn cmd_quantize_teacher(common: &Common, teacher: Option<PathBuf>) -> Result<()> {
    let cfg = prepare(common)?;
    let Some(path) = teacher_path(&cfg, teacher) else {
        bail!(ConfigError(
            "quantize-teacher needs --teacher or distill.teacher_checkpoint".into()
        ));
    };
    let (train, eval) = cfg.dataset.load()?;
    let (model, _) = checkpoint::load(&path)?;
    let bits = cfg.distill.teacher_feature_bits;
    let (bundle, report) = teacher_warmup(
        model,
        &train,
        &eval,
        bits,
        &cfg.train,
        cfg.distill.teacher_min_top1,
    )?;
    let saved = checkpoint::save(
        bundle.model(),
        &cfg.out_dir,
        "teacher",
        json!({ "warmup": report, "source": path }),
    )?;
    fs::write(
        cfg.out_dir.join("warmup.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    println!(
        "teacher {}-bit feature: top1 {:.2} before, {:.2} after {} epoch(s); saved {}",
        report.bits,
        report.top1_before,
        report.top1_after,
        report.epochs,
        saved.display()
    );
    Ok(())
}

fn cmd_eval(common: &Common, path: &Path) -> Result<()> {
    let cfg = prepare(common)?;
    let (_, eval) = cfg.dataset.load()?;
    let (model, _) = checkpoint::load(path)?;
    let result = evaluate(&model, &eval, cfg.train.eval_batch_size)?;
    fs::write(
        cfg.out_dir.join("eval.json"),
        serde_json::to_vec_pretty(&json!({
            "checkpoint": path,
            "samples": eval.len(),
            "top1": result.top1,
            "loss": result.loss,
        }))?,
    )?;
    println!(
        "top1 {:.2} loss {:.4} on {} samples",
        result.top1,
        result.loss,
        eval.len()
    );
    Ok(())
}

fn print_table(report: &ComparisonReport) {
    if let Some(t) = report.teacher_top1 {
        println!("teacher top1 {t:.2}");
    }
    for w in &report.warmups {
        println!(
            "warmup {}-bit: {:.2} -> {:.2}",
            w.bits, w.top1_before, w.top1_after
        );
    }
    println!(
        "{:<12} {:>6} {:>8} {:>6} {:>5} {:>10} {:>8} {:>10}",
        "regime", "bits", "t_bits", "lambda", "runs", "mean_top1", "std", "mean_best"
    );
    for r in &report.summary {
        println!(
            "{:<12} {:>6} {:>8} {:>6} {:>5} {:>10.2} {:>8.2} {:>10.2}",
            r.regime.as_str(),
            r.bits.to_string(),
            r.teacher_feature_bits
                .map(|b| b.to_string())
                .unwrap_or_else(|| "-".into()),
            r.lambda
                .map(|l| l.to_string())
                .unwrap_or_else(|| "-".into()),
            format!("{}/{}", r.runs - r.failed, r.runs),
            r.mean_top1,
            r.std_top1,
            r.mean_best_top1
        );
    }
}

fn cmd_compare(common: &Common, teacher: Option<PathBuf>) -> Result<()> {
    let cfg = prepare(common)?;
    let Some(suite) = &cfg.compare else {
        bail!(ConfigError("compare needs a [compare] section".into()));
    };
    let (train, eval) = cfg.dataset.load()?;
    let teacher = match teacher {
        Some(path) => Some(checkpoint::load(&path)?.0),
        None => None,
    };
    let report = run_comparison(
        suite,
        &cfg.model.spec(),
        &train,
        &eval,
        &cfg.train,
        teacher,
        Some(&cfg.out_dir),
    )?;
    print_table(&report);
    Ok(())
}

fn cmd_gradcheck(out: Option<&Path>, seed: u64, probes: usize) -> Result<()> {
    let cfg = GradcheckConfig {
        probes,
        seed,
        ..GradcheckConfig::default()
    };
    let mut reports = selfcheck::primitive_suites(&cfg)?;
    reports.extend(selfcheck::model_suites(&cfg)?);
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        println!(
            "{status:<4} {:<22} max_rel_err {:.3e} probes {} skipped {}",
            r.name, r.max_rel_err, r.probes, r.skipped
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("gradcheck.json"),
            serde_json::to_vec_pretty(&reports)?,
        )?;
    }
    if failed > 0 {
        bail!(GradcheckFailed(failed));
    }
    Ok(())
}
