//! The `gazecal` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O or validation, 3 numerical
//! failure. Every command writes one [`RunManifest`].

mod config;
mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use thiserror::Error;

use crate::calibration::{
    self, audit, default_partitions, render_report, CalibrationError, CalibrationMode,
    ReportFormat, StudyManifest,
};
use crate::dataset::{
    self, DatasetError, DatasetFormat, EyeAppearance, PersonDataset, PersonId, PrepareConfig,
    SyntheticPersonSpec,
};
use crate::geometry::write_pgm;
use crate::net::{init_network, NetError, NetworkParams, Pooling};
use crate::seed::{self, stream, SEED_ENV};
use crate::train::{self, OptimizerKind, TrainConfig, TrainError, TrainOptions};

pub use config::Settings;
pub use manifest::RunManifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Invalid(_) | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::NonFinite(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Numerical(e.to_string()),
            TrainError::Net(n) => n.into(),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            e if e.is_divergence() => CliError::Numerical(e.to_string()),
            CalibrationError::Io { path, source } => CliError::Io { path, source },
            e => CliError::Invalid(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gazecal",
    version,
    about = "Gaze estimation with person-specific calibration"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Balance each person to a fixed per-eye sample count and partition it.
    Prepare(PrepareArgs),
    /// Write a synthetic store with known per-person gaze biases.
    Synth(SynthArgs),
    /// Train a network on a store and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a store.
    Eval(EvalArgs),
    /// Run the paired with/without-calibration study.
    Study(StudyArgs),
    /// Render a study manifest as CSV or JSON.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Base seed; defaults to the GAZECAL_SEED environment variable.
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    /// Write the first normalized crops of each person as PGM files.
    #[arg(long, value_name = "DIR")]
    pub dump_normalized: Option<PathBuf>,
    /// Crops per person written by --dump-normalized.
    #[arg(long, default_value_t = 16)]
    pub dump_count: usize,
}

/// Settings shared by the training commands, applied over the defaults in
/// this order: config file, `--set` assignments, dedicated flags.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set fc_width=32 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub pooling: Option<Pooling>,
}

impl ConfigArgs {
    fn is_explicit(&self) -> bool {
        self.config.is_some()
            || !self.overrides.is_empty()
            || self.epochs.is_some()
            || self.learning_rate.is_some()
            || self.steps_per_epoch.is_some()
            || self.optimizer.is_some()
            || self.pooling.is_some()
    }

    fn resolve(&self, seed: Option<u64>) -> Result<Settings, CliError> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path).map_err(CliError::Invalid)?;
        }
        for o in &self.overrides {
            s.apply_override(o).map_err(CliError::Invalid)?;
        }
        let tr = &mut s.train;
        if let Some(v) = self.epochs {
            tr.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            tr.learning_rate = v;
        }
        if let Some(v) = self.steps_per_epoch {
            tr.steps_per_epoch = v;
        }
        if let Some(v) = self.optimizer {
            tr.optimizer = v;
        }
        if let Some(v) = self.pooling {
            s.network.pooling = v;
        }
        if let Some(v) = seed {
            s.seed = v;
        }
        s.network.validate()?;
        s.train.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Input store of normalized samples.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output store.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = dataset::DEFAULT_PER_EYE)]
    pub per_eye: usize,
    #[arg(long, default_value_t = dataset::DEFAULT_PARTITIONS)]
    pub partitions: usize,
    #[command(flatten)]
    pub dump: DumpArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub persons: usize,
    /// Biases are drawn uniformly from [-scale, scale]².
    #[arg(long, default_value_t = 0.0, conflicts_with = "bias_magnitude")]
    pub bias_scale: f64,
    /// Biases of this length in uniformly random directions.
    #[arg(long)]
    pub bias_magnitude: Option<f64>,
    /// Give every person its own eye appearance instead of the fixed one.
    #[arg(long)]
    pub random_appearance: bool,
    /// Standard deviation of the Gaussian label noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Samples per person; must be even (left and right alternate).
    #[arg(long, default_value_t = 2 * dataset::DEFAULT_PER_EYE)]
    pub samples: usize,
    #[arg(long, default_value_t = dataset::DEFAULT_PARTITIONS)]
    pub partitions: usize,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub dump: DumpArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Where to write the trained network.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Training record CSV; defaults to `<checkpoint>.record.csv`.
    #[arg(long, value_name = "FILE")]
    pub record: Option<PathBuf>,
    /// Train on these persons only (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub persons: Vec<String>,
    /// Hold these persons out and log their error after every epoch.
    #[arg(long, value_delimiter = ',')]
    pub validate: Vec<String>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Evaluate on these persons only (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub persons: Vec<String>,
    /// Run manifest path; defaults to `<checkpoint>.eval.json`.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue the study recorded in `<out>/study.json`.
    #[arg(long)]
    pub resume: bool,
    /// Parallel experiments.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Train the uncalibrated model once per person.
    #[arg(long)]
    pub share_baseline: bool,
    /// Loss weight of the calibration samples.
    #[arg(long)]
    pub calib_weight: Option<f64>,
    #[arg(long)]
    pub mode: Option<CalibrationMode>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A study manifest (`study.json`).
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, default_value = "csv")]
    pub format: ReportFormat,
    /// Output file; defaults to `report.<format>` next to the manifest.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Study artifact names inside the `study --out` directory.
pub mod artifacts {
    pub const STUDY_MANIFEST: &str = "study.json";
    pub const DETAIL_CSV: &str = "detail.csv";
    pub const AGGREGATE_CSV: &str = "aggregate.csv";
    pub const PLOT_DATA_CSV: &str = "plot_data.csv";
    pub const RUN_MANIFEST: &str = "run_manifest.json";
    pub const SYNTH_SPEC: &str = "synth.json";
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn load_store(dir: &Path) -> Result<Vec<PersonDataset>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    Ok(dataset::load_dataset(dir, DatasetFormat::Gzd)?)
}

fn select<'a>(
    persons: &'a [PersonDataset],
    ids: &[String],
) -> Result<Vec<&'a PersonDataset>, CliError> {
    if ids.is_empty() {
        return Ok(persons.iter().collect());
    }
    ids.iter()
        .map(|id| {
            persons
                .iter()
                .find(|p| p.person_id.as_str() == id)
                .ok_or_else(|| CliError::Invalid(format!("person {id} is not in the store")))
        })
        .collect()
}

fn dump_normalized(dump: &DumpArgs, persons: &[PersonDataset]) -> Result<Vec<PathBuf>, CliError> {
    let Some(dir) = &dump.dump_normalized else {
        return Ok(Vec::new());
    };
    let mut written = Vec::new();
    for p in persons {
        let pdir = dir.join(p.person_id.as_str());
        fs::create_dir_all(&pdir).map_err(io_err(&pdir))?;
        for (i, s) in p.samples.iter().take(dump.dump_count).enumerate() {
            let path = pdir.join(format!("{i:05}_{}.pgm", s.eye_side));
            write_pgm(&path, &s.eye_image.to_gray()).map_err(io_err(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn cmd_prepare(args: &PrepareArgs, run: &mut RunManifest) -> Result<(), CliError> {
    let seed = args.seed.seed.unwrap_or(0);
    let cfg = PrepareConfig {
        per_eye: args.per_eye,
        partitions: args.partitions,
    };
    cfg.validate()?;
    run.set_config(&cfg);
    run.seeds.insert("base".into(), seed);
    let raw = load_store(&args.data)?;
    if raw.is_empty() {
        return Err(CliError::Invalid(format!(
            "{} holds no .gzd person files",
            args.data.display()
        )));
    }
    run.input_hash = Some(dataset::dataset_hash(&args.data)?);
    let mut prepared = Vec::with_capacity(raw.len());
    for person in &raw {
        let p = dataset::prepare_person_with(person, seed, &cfg)?;
        let parts = dataset::partition_person_into(&p, seed, &cfg)?;
        run.artifacts.push(dataset::save_person(&args.out, &p)?);
        run.artifacts
            .push(dataset::save_partitions(&args.out, &parts)?);
        log::info!(
            "{}: {} -> {} samples",
            person.person_id,
            person.len(),
            p.len()
        );
        prepared.push(p);
    }
    run.dataset_hash = Some(dataset::dataset_hash(&args.out)?);
    run.artifacts
        .extend(dump_normalized(&args.dump, &prepared)?);
    Ok(())
}

/// How synthetic persons differ from each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PersonVariation {
    /// Biases uniform in `[-bias_scale, bias_scale]²`.
    pub bias_scale: f64,
    /// Bias of this length in a uniformly random direction; replaces the
    /// box draw when set.
    pub bias_magnitude: Option<f64>,
    /// Per-person random eye appearance instead of the fixed render.
    pub random_appearance: bool,
}

impl PersonVariation {
    fn validate(&self) -> Result<(), CliError> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.bias_scale) || !self.bias_magnitude.is_none_or(ok) {
            return Err(CliError::Invalid(
                "bias scale and magnitude must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// The generator spec written next to a synthetic store.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub variation: PersonVariation,
    pub persons: Vec<SyntheticPersonSpec>,
}

/// Specs for `count` synthetic persons drawn according to `variation`.
pub fn synthetic_specs(
    count: usize,
    variation: &PersonVariation,
    noise: f64,
    samples: usize,
    seed: u64,
) -> Vec<SyntheticPersonSpec> {
    (0..count)
        .map(|i| {
            let mut rng = seed::rng(seed, &[stream::SYNTH_PERSON, i as u64]);
            let bias = match variation.bias_magnitude {
                Some(m) => {
                    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    [m * theta.cos(), m * theta.sin()]
                }
                None if variation.bias_scale > 0.0 => {
                    let s = variation.bias_scale;
                    [rng.random_range(-s..=s), rng.random_range(-s..=s)]
                }
                None => [0.0, 0.0],
            };
            let mut spec = SyntheticPersonSpec::new(PersonId::numbered(i), bias, noise, samples);
            if variation.random_appearance {
                spec.appearance = EyeAppearance::random(&mut rng);
            }
            spec
        })
        .collect()
}

fn cmd_synth(args: &SynthArgs, run: &mut RunManifest) -> Result<(), CliError> {
    if args.persons == 0 {
        return Err(CliError::Invalid("--persons must be at least 1".into()));
    }
    let variation = PersonVariation {
        bias_scale: args.bias_scale,
        bias_magnitude: args.bias_magnitude,
        random_appearance: args.random_appearance,
    };
    variation.validate()?;
    if !args.samples.is_multiple_of(2) {
        return Err(CliError::Invalid("--samples must be even".into()));
    }
    let seed = args.seed.seed.unwrap_or(0);
    let cfg = PrepareConfig {
        per_eye: args.samples / 2,
        partitions: args.partitions,
    };
    cfg.validate()?;
    let specs = synthetic_specs(args.persons, &variation, args.noise, args.samples, seed);
    let manifest = SynthManifest {
        seed,
        variation,
        persons: specs,
    };
    run.set_config(&manifest);
    run.seeds.insert("base".into(), seed);
    let mut persons = Vec::with_capacity(args.persons);
    for spec in &manifest.persons {
        let p = dataset::generate_synthetic_person(spec, seed)?;
        let parts = dataset::partition_person_into(&p, seed, &cfg)?;
        run.artifacts.push(dataset::save_person(&args.out, &p)?);
        run.artifacts
            .push(dataset::save_partitions(&args.out, &parts)?);
        persons.push(p);
    }
    let spec_path = args.out.join(artifacts::SYNTH_SPEC);
    write_file(
        &spec_path,
        serde_json::to_vec_pretty(&manifest).expect("spec serializes"),
    )?;
    run.artifacts.push(spec_path);
    run.dataset_hash = Some(dataset::dataset_hash(&args.out)?);
    run.artifacts.extend(dump_normalized(&args.dump, &persons)?);
    Ok(())
}

fn cmd_train(args: &TrainArgs, run: &mut RunManifest) -> Result<(), CliError> {
    let settings = args.config.resolve(args.seed.seed)?;
    run.set_config(&settings);
    let persons = load_store(&args.data)?;
    run.dataset_hash = Some(dataset::dataset_hash(&args.data)?);
    let held_out = select(&persons, &args.validate)?;
    let chosen: Vec<&PersonDataset> = select(&persons, &args.persons)?
        .into_iter()
        .filter(|p| !args.validate.iter().any(|v| v == p.person_id.as_str()))
        .collect();
    let data: Vec<_> = chosen.iter().flat_map(|p| p.samples.iter()).collect();
    let validation: Vec<_> = if args.validate.is_empty() {
        Vec::new()
    } else {
        held_out.iter().flat_map(|p| p.samples.iter()).collect()
    };
    let init_seed = seed::derive(settings.seed, &[stream::INIT]);
    let tc = TrainConfig {
        seed: seed::derive(settings.seed, &[stream::SHUFFLE]),
        ..settings.train.clone()
    };
    run.seeds.insert("base".into(), settings.seed);
    run.seeds.insert("init".into(), init_seed);
    run.seeds.insert("shuffle".into(), tc.seed);
    let params = init_network(&settings.network, init_seed)?;
    let options = TrainOptions {
        weights: None,
        validation: (!validation.is_empty()).then_some(validation.as_slice()),
    };
    log::info!(
        "training on {} samples from {} persons",
        data.len(),
        chosen.len()
    );
    let (params, record) = train::train_with(params, &data, &tc, options)?;
    params.save(&args.checkpoint)?;
    let record_path = args
        .record
        .clone()
        .unwrap_or_else(|| with_suffix(&args.checkpoint, ".record.csv"));
    record.save_csv(&record_path).map_err(|e| match e {
        TrainError::Io(source) => CliError::Io {
            path: record_path.clone(),
            source,
        },
        e => e.into(),
    })?;
    run.artifacts.push(args.checkpoint.clone());
    run.artifacts.push(record_path);
    if let Some(last) = record.loss.last() {
        run.metrics.insert("final_train_loss".into(), *last);
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, run: &mut RunManifest) -> Result<(), CliError> {
    let params = NetworkParams::load(&args.checkpoint)?;
    run.set_config(params.config());
    let persons = load_store(&args.data)?;
    run.dataset_hash = Some(dataset::dataset_hash(&args.data)?);
    let data: Vec<_> = select(&persons, &args.persons)?
        .into_iter()
        .flat_map(|p| p.samples.iter())
        .collect();
    let result = train::evaluate(&params, &data)?;
    println!("mean_error {}", result.mean);
    println!("std_error {}", result.std);
    println!("samples {}", data.len());
    run.metrics.insert("mean_error".into(), result.mean);
    run.metrics.insert("std_error".into(), result.std);
    run.metrics.insert("samples".into(), data.len() as f64);
    Ok(())
}

fn cmd_study(args: &StudyArgs, run: &mut RunManifest) -> Result<(), CliError> {
    use artifacts::*;
    let mut settings = args.config.resolve(args.seed.seed)?;
    if args.share_baseline {
        settings.share_baseline = true;
    }
    if let Some(w) = args.calib_weight {
        settings.calibration.calib_weight = w;
    }
    if let Some(m) = args.mode {
        settings.calibration.mode = m;
    }
    settings.calibration.validate()?;
    let explicit = args.config.is_explicit()
        || args.seed.seed.is_some()
        || args.share_baseline
        || args.calib_weight.is_some()
        || args.mode.is_some();

    let persons = load_store(&args.data)?;
    run.dataset_hash = Some(dataset::dataset_hash(&args.data)?);
    let manifest_path = args.out.join(STUDY_MANIFEST);
    let mut manifest = if manifest_path.exists() {
        if !args.resume {
            return Err(CliError::Invalid(format!(
                "{} exists; pass --resume to continue it",
                manifest_path.display()
            )));
        }
        let m = StudyManifest::load(&manifest_path)?;
        if explicit && m.config != settings.study_config() {
            return Err(CliError::Invalid(
                "settings differ from the resumed study's manifest".into(),
            ));
        }
        log::info!(
            "resuming: {} of {} experiments pending",
            m.pending(),
            m.experiments.len()
        );
        m
    } else {
        let mut partitions = Vec::with_capacity(persons.len());
        for p in &persons {
            partitions.push(dataset::load_partitions(&args.data, &p.person_id)?);
        }
        let partitions = if partitions.iter().all(Option::is_some) {
            partitions.into_iter().flatten().collect()
        } else {
            default_partitions(&persons, settings.seed)?
        };
        StudyManifest::new(&persons, partitions, settings.study_config())?
    };
    run.set_config(&Settings::from_study_config(&manifest.config));
    run.seeds.insert("base".into(), manifest.config.seed);
    manifest.save(&manifest_path)?;
    calibration::run_pending(&mut manifest, &persons, args.jobs, |m| {
        m.save(&manifest_path)
    })?;
    run.artifacts.push(manifest_path.clone());

    let report = manifest.report();
    for (name, text) in [
        (DETAIL_CSV, calibration::detail_csv(&report)),
        (AGGREGATE_CSV, calibration::aggregate_csv(&report)),
        (PLOT_DATA_CSV, calibration::plot_data_csv(&report)),
    ] {
        let path = args.out.join(name);
        write_file(&path, text)?;
        run.artifacts.push(path);
    }
    let check = audit(&manifest);
    for v in &check.violations {
        log::error!("audit: {v}");
    }
    run.metrics
        .insert("experiments".into(), report.results.len() as f64);
    run.metrics
        .insert("failed".into(), report.failures.len() as f64);
    for s in &report.summaries {
        println!(
            "{} with {:.4} ± {:.4} without {:.4} ± {:.4} improvement {:.1}% (best partition {})",
            s.person,
            s.mean_with,
            s.std_with,
            s.mean_without,
            s.std_without,
            s.improvement_pct,
            s.best_partition
        );
    }
    if !check.is_clean() {
        return Err(CliError::Invalid(format!(
            "pairing audit found {} violations",
            check.violations.len()
        )));
    }
    if report.results.is_empty() {
        return Err(CliError::Numerical("every experiment failed".into()));
    }
    if !report.failures.is_empty() {
        log::warn!(
            "{} experiments failed and are excluded from the aggregates",
            report.failures.len()
        );
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs, run: &mut RunManifest) -> Result<(), CliError> {
    let manifest = StudyManifest::load(&args.manifest)?;
    run.set_config(&Settings::from_study_config(&manifest.config));
    run.dataset_hash = Some(manifest.dataset_hash.clone());
    let text = render_report(&manifest.report(), args.format)?;
    let ext = match args.format {
        ReportFormat::Csv => "csv",
        ReportFormat::Json => "json",
    };
    let out = args.out.clone().unwrap_or_else(|| {
        args.manifest
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("report.{ext}"))
    });
    write_file(&out, text)?;
    run.artifacts.push(out);
    Ok(())
}

/// Where a command's run manifest goes.
fn run_manifest_path(command: &Command) -> PathBuf {
    use artifacts::RUN_MANIFEST;
    match command {
        Command::Prepare(a) => a.out.join(RUN_MANIFEST),
        Command::Synth(a) => a.out.join(RUN_MANIFEST),
        Command::Train(a) => with_suffix(&a.checkpoint, ".run.json"),
        Command::Eval(a) => a
            .manifest
            .clone()
            .unwrap_or_else(|| with_suffix(&a.checkpoint, ".eval.json")),
        Command::Study(a) => a.out.join(RUN_MANIFEST),
        Command::Report(a) => match &a.out {
            Some(out) => with_suffix(out, ".run.json"),
            None => a
                .manifest
                .parent()
                .unwrap_or(Path::new("."))
                .join("report.run.json"),
        },
    }
}

/// Runs a parsed command and writes its run manifest.
pub fn execute(cli: &Cli, argv: Vec<String>) -> Result<RunManifest, CliError> {
    let name = match &cli.command {
        Command::Prepare(_) => "prepare",
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Study(_) => "study",
        Command::Report(_) => "report",
    };
    let mut run = RunManifest::start(name, argv);
    match &cli.command {
        Command::Prepare(a) => cmd_prepare(a, &mut run),
        Command::Synth(a) => cmd_synth(a, &mut run),
        Command::Train(a) => cmd_train(a, &mut run),
        Command::Eval(a) => cmd_eval(a, &mut run),
        Command::Study(a) => cmd_study(a, &mut run),
        Command::Report(a) => cmd_report(a, &mut run),
    }?;
    run.finish();
    let path = run_manifest_path(&cli.command);
    write_file(&path, run.to_json())?;
    Ok(run)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(&cli, argv) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("gazecal: {e}");
            e.exit_code()
        }
    }
}
