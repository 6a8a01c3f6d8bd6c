//! The `anteversion` command line.
//!
//! Run layout under `<output_root>/<run_name>/`:
//! `config.resolved`, `foldplan.json`, `fold_<i>/{bundle.tar, history.jsonl,
//! predictions.csv}`, `train/` (single split) and `report/`.
//!
//! Failures print one line `error[<category>]: <message>` to stderr; usage
//! errors exit with 2, everything else with 1.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};
use crate::cv::{self, FoldPlan, FoldTrainer, NetworkTrainer, FOLDS};
use crate::dataset::{self, compute_stats, encode_gender, normalize_age, Gender, PatientRecord, SdConvention};
use crate::metrics::{self, ReportOptions};
use crate::model::ModelBundle;
use crate::phantom::{self, PhantomSpec};
use crate::plane;
use crate::preprocess::{self, ModelInput};
use crate::training;
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "anteversion", version, about = "Acetabular version regression pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom population (images + metadata.csv).
    Phantom(PhantomArgs),
    /// Validate a metadata table and print demographic statistics.
    IngestCheck(IngestArgs),
    /// Train on a single train/validation/test split of the fold plan.
    Train(TrainArgs),
    /// Five-fold cross-validation followed by the evaluation report.
    Cv(CvArgs),
    /// Recompute per-fold test predictions from saved bundles.
    Evaluate(RunDirArgs),
    /// Emit the evaluation report from per-fold predictions.
    Report(RunDirArgs),
    /// Predict both hip angles for one image.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Takes the `[phantom]` section of this run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "phantom_out")]
    out: PathBuf,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `data.metadata`.
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Overrides `data.image_root`.
    #[arg(long)]
    image_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Which experiment's roles to use (test fold, validation fold).
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(0..FOLDS as u64))]
    experiment: u64,
    #[arg(long)]
    force: bool,
    /// Print one line per epoch.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    force: bool,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct RunDirArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    age: f64,
    /// `M` or `F`.
    #[arg(long)]
    gender: String,
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let message = e.to_string().replace('\n', "; ");
            eprintln!("error[{}]: {message}", e.category());
            1
        }
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Phantom(a) => phantom_cmd(a),
        Command::IngestCheck(a) => ingest_check(a),
        Command::Train(a) => train_cmd(a),
        Command::Cv(a) => cv_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Predict(a) => predict_cmd(a),
    }
}

fn env_var(key: &str) -> Option<String> {
    std::env::var(key).ok()
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.apply_env(env_var)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Configuration stored in an existing run directory.
fn load_run_config(run_dir: &Path) -> Result<RunConfig, Error> {
    let path = run_dir.join("config.resolved");
    if !path.is_file() {
        return Err(Error::Input(format!("{} is not a run directory (no config.resolved)", run_dir.display())));
    }
    let cfg = RunConfig::load(&path)?;
    // the device check still applies; the output root is the given directory
    RunConfig::default().apply_env(env_var)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Creates (or, with `force`, recreates) the run directory and writes
/// `config.resolved`. An existing directory must hold the same configuration.
fn open_run_dir(cfg: &RunConfig, force: bool) -> Result<PathBuf, Error> {
    let dir = cfg.run_dir();
    if force && dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    let resolved = cfg.resolved_text();
    let path = dir.join("config.resolved");
    if path.is_file() {
        if fs::read_to_string(&path)? != resolved {
            return Err(ConfigError::Invalid(format!(
                "{} holds a different configuration; pass --force or choose another run_name",
                dir.display()
            ))
            .into());
        }
    } else {
        fs::create_dir_all(&dir)?;
        fs::write(&path, resolved)?;
    }
    Ok(dir)
}

fn ingest_records(cfg: &RunConfig) -> Result<Vec<PatientRecord>, Error> {
    Ok(dataset::ingest(&cfg.data.metadata, &cfg.data.image_root, &cfg.data.limits)?)
}

fn fold_plan(cfg: &RunConfig, records: &[PatientRecord]) -> Result<FoldPlan, Error> {
    Ok(cv::make_folds(records, cfg.fold_seed(), cfg.cv.stratify_by_gender)?)
}

fn report_options(cfg: &RunConfig) -> Result<ReportOptions, Error> {
    Ok(ReportOptions {
        age_bins: cfg.age_bins()?,
        histogram_bin_deg: cfg.report.histogram_bin_deg,
        plots: cfg.report.plots,
    })
}

fn up_to_date(what: &Path) {
    eprintln!("{} is complete; nothing to do (pass --force to redo)", what.display());
}

fn phantom_cmd(a: PhantomArgs) -> Result<(), Error> {
    let mut spec = match &a.config {
        Some(p) => RunConfig::load(p)?.phantom,
        None => PhantomSpec::default(),
    };
    if let Some(n) = a.population {
        spec.population = n;
    }
    if let Some(s) = a.side {
        spec.side = s;
    }
    if let Some(n) = a.noise {
        spec.noise_sd = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let spec_text = toml::to_string(&spec).expect("phantom spec is representable as TOML");
    let spec_path = a.out.join("phantom.toml");
    if a.out.join("metadata.csv").is_file() && !a.force {
        if fs::read_to_string(&spec_path).ok().as_deref() != Some(spec_text.as_str()) {
            return Err(ConfigError::Invalid(format!(
                "{} holds a phantom generated with different parameters; pass --force to regenerate",
                a.out.display()
            ))
            .into());
        }
        up_to_date(&a.out);
        return Ok(());
    }
    if a.force && a.out.join("images").is_dir() {
        fs::remove_dir_all(a.out.join("images"))?;
    }
    let records = phantom::generate(&spec, &a.out)?;
    fs::write(&spec_path, spec_text)?;
    let males = records.iter().filter(|r| r.gender == Gender::Male).count();
    println!(
        "wrote {} subjects ({} male, {} female) at side {} to {}",
        records.len(),
        males,
        records.len() - males,
        spec.side,
        a.out.display()
    );
    Ok(())
}

fn ingest_check(a: IngestArgs) -> Result<(), Error> {
    let mut cfg = load_config(a.config.as_deref(), None)?;
    if let Some(m) = a.metadata {
        cfg.data.metadata = m;
    }
    if let Some(r) = a.image_root {
        cfg.data.image_root = r;
    }
    let records = ingest_records(&cfg)?;
    let stats = compute_stats(&records, &cfg.age_bins()?, SdConvention::Sample)?;
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    let fmt = |s: Option<dataset::Summary>| match s {
        Some(s) => [format!("{:.2}", s.mean), format!("{:.2}", s.sd)],
        None => [String::new(), String::new()],
    };
    let csv_err = |e: csv::Error| Error::Input(format!("writing statistics: {e}"));
    w.write_record(["group", "count", "age_mean", "age_sd", "right_mean", "right_sd", "left_mean", "left_sd"])
        .map_err(csv_err)?;
    for g in &stats.groups {
        let mut row = vec![g.label.clone(), g.count.to_string()];
        for s in [g.age, g.right_angle, g.left_angle] {
            row.extend(fmt(s));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    eprintln!("{} records passed ingestion", records.len());
    Ok(())
}

fn trainer_for(cfg: &RunConfig, records: &[PatientRecord], verbose: bool) -> Result<NetworkTrainer, Error> {
    let mut trainer = NetworkTrainer::new(records, cfg.network_spec(), cfg.train_config(), cfg.age_bounds()?, cfg.digest())?;
    trainer.verbose = verbose;
    Ok(trainer)
}

fn train_cmd(a: TrainArgs) -> Result<(), Error> {
    let cfg = load_config(a.config.config.as_deref(), a.config.seed)?;
    let records = ingest_records(&cfg)?;
    let plan = fold_plan(&cfg, &records)?;
    let run_dir = open_run_dir(&cfg, a.force)?;
    let dir = run_dir.join("train");
    let out = dir.join("predictions.csv");
    if out.is_file() {
        up_to_date(&dir);
        return Ok(());
    }
    fs::create_dir_all(&dir)?;
    let split = plan.split(&records, a.experiment as usize);
    eprintln!(
        "training on folds {:?}, validating on fold {}, testing on fold {}",
        split.roles.train, split.roles.val, split.roles.test
    );
    let test: Vec<PatientRecord> = split.test.iter().map(|r| (*r).clone()).collect();
    let mut trainer = trainer_for(&cfg, &records, a.verbose)?;
    let preds = trainer.run_experiment(&split, &dir)?;
    let rows: Vec<_> = test.iter().zip(preds).map(|(r, p)| cv::PredictionRow::new(r, p, split.roles.test)).collect();
    cv::write_predictions(&out, &rows)?;
    let mae = rows.iter().map(|r| (r.pred_right - r.true_right).abs() + (r.pred_left - r.true_left).abs()).sum::<f64>()
        / (2 * rows.len()) as f64;
    println!("test MAE {mae:.3}° over {} patients; bundle at {}", rows.len(), dir.join("bundle.tar").display());
    Ok(())
}

fn cv_complete(run_dir: &Path) -> bool {
    (0..FOLDS).all(|e| cv::predictions_path(run_dir, e).is_file()) && run_dir.join("report/fold_table.csv").is_file()
}

fn cv_cmd(a: CvArgs) -> Result<(), Error> {
    let cfg = load_config(a.config.config.as_deref(), a.config.seed)?;
    let records = ingest_records(&cfg)?;
    let plan = fold_plan(&cfg, &records)?;
    let run_dir = open_run_dir(&cfg, a.force)?;
    if cv_complete(&run_dir) {
        up_to_date(&run_dir);
        return Ok(());
    }
    let folds = if (0..FOLDS).all(|e| cv::predictions_path(&run_dir, e).is_file()) {
        // only the report is missing; avoid decoding every image
        cv::run_cv(&records, &plan, &mut cv::TrainMeanPredictor, &run_dir)?
    } else {
        cv::run_cv(&records, &plan, &mut trainer_for(&cfg, &records, a.verbose)?, &run_dir)?
    };
    write_report(&cfg, &folds, &run_dir)
}

fn write_report(cfg: &RunConfig, folds: &[Vec<cv::PredictionRow>], run_dir: &Path) -> Result<(), Error> {
    let options = report_options(cfg)?;
    let report = metrics::build_report(folds, &options)?;
    let out = run_dir.join("report");
    metrics::emit_report(&report, &out, &options)?;
    if let Some(t) = &report.fold_table {
        let cells: Vec<String> = metrics::COLUMNS
            .iter()
            .zip(t.average)
            .map(|(c, v)| format!("{} {}", c.label(), v.map_or("-".into(), |v| format!("{v:.2}"))))
            .collect();
        println!("average MAE (deg): {}", cells.join(", "));
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn evaluate_cmd(a: RunDirArgs) -> Result<(), Error> {
    let cfg = load_run_config(&a.run_dir)?;
    let plan = FoldPlan::load(&a.run_dir.join("foldplan.json"))?;
    let records = ingest_records(&cfg)?;
    plan.check_covers(&records)?;
    let mut written = 0;
    for e in 0..FOLDS {
        let out = cv::predictions_path(&a.run_dir, e);
        if out.is_file() && !a.force {
            continue;
        }
        let bundle_path = cv::fold_dir(&a.run_dir, e).join("bundle.tar");
        if !bundle_path.is_file() {
            return Err(Error::Input(format!("fold {e}: missing {}", bundle_path.display())));
        }
        let bundle = ModelBundle::load(&bundle_path)?;
        let split = plan.split(&records, e);
        let test: Vec<PatientRecord> = split.test.iter().map(|r| (*r).clone()).collect();
        let samples = training::load_samples(&test, bundle.network.spec().input_side)?;
        let preds = cv::predict_samples(&bundle, &samples, cfg.training.batch_size)?;
        let rows: Vec<_> = test.iter().zip(preds).map(|(r, p)| cv::PredictionRow::new(r, p, e)).collect();
        cv::write_predictions(&out, &rows)?;
        written += 1;
    }
    if written == 0 {
        up_to_date(&a.run_dir);
    } else {
        println!("wrote predictions for {written} fold(s)");
    }
    Ok(())
}

fn report_cmd(a: RunDirArgs) -> Result<(), Error> {
    let cfg = load_run_config(&a.run_dir)?;
    if a.run_dir.join("report/fold_table.csv").is_file() && !a.force {
        up_to_date(&a.run_dir.join("report"));
        return Ok(());
    }
    let folds = metrics::load_fold_predictions(&a.run_dir)?;
    write_report(&cfg, &folds, &a.run_dir)
}

fn predict_cmd(a: PredictArgs) -> Result<(), Error> {
    RunConfig::default().apply_env(env_var)?;
    let gender = Gender::parse(&a.gender)
        .ok_or_else(|| Error::Input(format!("gender must be M or F, got `{}`", a.gender)))?;
    if !a.age.is_finite() {
        return Err(Error::Input(format!("age must be a finite number, got {}", a.age)));
    }
    let bundle = ModelBundle::load(&a.bundle)?;
    let raw = plane::load_grayscale(&a.image)?;
    let image = preprocess::prepare(&raw, bundle.network.spec().input_side)?;
    let input = ModelInput::new(&image, normalize_age(a.age, bundle.age_bounds), encode_gender(gender));
    let (right, left) = bundle.predict_degrees(&[input])?[0];
    println!("{right},{left}");
    Ok(())
}
