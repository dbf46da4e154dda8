//! Paired leave-one-person-out calibration experiments.
//!
//! For a target person and one of their calibration partitions, two models
//! are trained from the same initialization seed and configuration:
//!
//! * arm A ("with calibration") sees every other person plus the target's
//!   calibration partition;
//! * arm B ("without calibration") sees every other person only.
//!
//! Both are evaluated on the target's remaining samples. A study repeats
//! this for every person and partition; see [`study`] and [`report`].

mod report;
mod study;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetError, NormalizedSample, PartitionSet, PersonDataset, PersonId};
use crate::net::{init_network, NetError, NetworkConfig, NetworkParams};
use crate::seed::{self, stream};
use crate::train::{self, EvalResult, TrainConfig, TrainError, TrainOptions};

pub use report::{
    aggregate_csv, audit, detail_csv, plot_data_csv, render_report, AuditReport, DetailRow,
    FailedExperiment, PersonSummary, ReportFormat, StudyReport,
};
pub use study::{
    default_partitions, run_full_study, run_pending, ExperimentEntry, ExperimentState, StudyConfig,
    StudyManifest, MANIFEST_VERSION,
};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("target person {0} is not in the dataset")]
    TargetAbsent(PersonId),
    #[error("partition index {index} out of range for {count} partitions")]
    PartitionOutOfRange { index: usize, count: usize },
    #[error("partitions belong to {found}, expected {expected}")]
    PartitionMismatch { expected: PersonId, found: PersonId },
    #[error("a study needs at least 2 persons, got {0}")]
    TooFewPersons(usize),
    #[error("invalid calibration option: {0}")]
    InvalidOption(String),
    #[error("shared baseline failed: {0}")]
    BaselineFailed(String),
    #[error("report has no experiments")]
    EmptyReport,
    #[error("manifest does not match this study: {0}")]
    ManifestMismatch(String),
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl CalibrationError {
    /// True for numerical failures that a study records instead of
    /// aborting on.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            CalibrationError::Train(TrainError::Diverged { .. })
                | CalibrationError::Train(TrainError::Net(NetError::NonFinite(_)))
                | CalibrationError::Net(NetError::NonFinite(_))
                | CalibrationError::BaselineFailed(_)
        )
    }
}

/// How arm A uses the calibration partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Train from scratch on the other persons plus the calibration samples.
    #[default]
    RetrainWithCalibration,
    /// Continue training arm B's model on the calibration samples alone.
    Finetune,
}

impl CalibrationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationMode::RetrainWithCalibration => "retrain_with_calibration",
            CalibrationMode::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for CalibrationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrain_with_calibration" | "retrain" => Ok(CalibrationMode::RetrainWithCalibration),
            "finetune" => Ok(CalibrationMode::Finetune),
            other => Err(format!(
                "unknown calibration mode {other:?} (expected retrain or finetune)"
            )),
        }
    }
}

/// Schedule for [`CalibrationMode::Finetune`]; the remaining optimizer
/// settings come from the experiment's train config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            steps_per_epoch: 1,
            learning_rate: 1e-3,
        }
    }
}

/// Calibration settings shared by every experiment of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub mode: CalibrationMode,
    /// Loss weight of each calibration sample in arm A (retrain mode).
    pub calib_weight: f64,
    pub finetune: FinetuneConfig,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            mode: CalibrationMode::default(),
            calib_weight: 1.0,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl CalibrationOptions {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !(self.calib_weight > 0.0 && self.calib_weight.is_finite()) {
            return Err(CalibrationError::InvalidOption(format!(
                "calib_weight must be positive, got {}",
                self.calib_weight
            )));
        }
        let ft = &self.finetune;
        if ft.epochs == 0 || ft.steps_per_epoch == 0 {
            return Err(CalibrationError::InvalidOption(
                "finetune epochs and steps must be at least 1".into(),
            ));
        }
        if !(ft.learning_rate >= 0.0 && ft.learning_rate.is_finite()) {
            return Err(CalibrationError::InvalidOption(format!(
                "finetune learning rate must be >= 0, got {}",
                ft.learning_rate
            )));
        }
        Ok(())
    }
}

/// One paired experiment. `seed` initializes both arms and drives their
/// shuffles; it replaces `train_config.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub target_person: PersonId,
    pub partition_index: usize,
    pub network: NetworkConfig,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub calibration: CalibrationOptions,
}

impl ExperimentSpec {
    /// Training configuration actually used by both arms.
    pub fn arm_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: seed::derive(self.seed, &[stream::SHUFFLE]),
            ..self.train_config.clone()
        }
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, &[stream::INIT])
    }

    /// SHA-256 of everything both arms share: architecture, optimizer,
    /// seed and calibration options.
    pub fn config_hash(&self) -> String {
        let shared = (
            &self.network,
            &self.arm_train_config(),
            self.init_seed(),
            &self.calibration,
        );
        let json = serde_json::to_vec(&shared).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Mean and population standard deviation of per-sample errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
}

impl From<&EvalResult> for ErrorStats {
    fn from(r: &EvalResult) -> Self {
        ErrorStats {
            mean: r.mean,
            std: r.std,
        }
    }
}

/// What one arm was trained on and how, recorded for the pairing audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub config_hash: String,
    /// Persons whose full sample sets were in the training data.
    pub train_persons: Vec<PersonId>,
    /// Target-person sample indices in the training data.
    pub target_indices: Vec<usize>,
    pub train_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub target_person: PersonId,
    pub partition_index: usize,
    pub error_with: ErrorStats,
    pub error_without: ErrorStats,
    pub test_size: usize,
    /// Target-person sample indices both arms were evaluated on.
    pub test_indices: Vec<usize>,
    pub with_calibration: ArmRecord,
    pub without_calibration: ArmRecord,
}

impl PairedResult {
    /// Relative error reduction `(without − with) / without`.
    pub fn improvement(&self) -> f64 {
        (self.error_without.mean - self.error_with.mean) / self.error_without.mean
    }
}

/// Resolved inputs of one experiment.
struct Setup<'a> {
    target: &'a PersonDataset,
    others: Vec<&'a PersonDataset>,
    calibration: &'a [usize],
    test: Vec<usize>,
}

fn setup<'a>(
    all_persons: &'a [PersonDataset],
    partitions: &'a PartitionSet,
    spec: &ExperimentSpec,
) -> Result<Setup<'a>, CalibrationError> {
    spec.calibration.validate()?;
    let target = all_persons
        .iter()
        .find(|p| p.person_id == spec.target_person)
        .ok_or_else(|| CalibrationError::TargetAbsent(spec.target_person.clone()))?;
    if partitions.person_id != spec.target_person {
        return Err(CalibrationError::PartitionMismatch {
            expected: spec.target_person.clone(),
            found: partitions.person_id.clone(),
        });
    }
    if spec.partition_index >= partitions.len() {
        return Err(CalibrationError::PartitionOutOfRange {
            index: spec.partition_index,
            count: partitions.len(),
        });
    }
    if partitions.total() != target.len() {
        return Err(CalibrationError::InvalidOption(format!(
            "partitions cover {} indices but {} has {} samples",
            partitions.total(),
            target.person_id,
            target.len()
        )));
    }
    let others: Vec<_> = all_persons
        .iter()
        .filter(|p| p.person_id != spec.target_person)
        .collect();
    if others.is_empty() {
        return Err(CalibrationError::TooFewPersons(all_persons.len()));
    }
    Ok(Setup {
        target,
        others,
        calibration: &partitions.partitions[spec.partition_index],
        test: partitions.complement(spec.partition_index),
    })
}

impl Setup<'_> {
    fn other_samples(&self) -> Vec<&NormalizedSample> {
        self.others.iter().flat_map(|p| p.samples.iter()).collect()
    }

    fn pick(&self, indices: &[usize]) -> Vec<&NormalizedSample> {
        indices.iter().map(|&i| &self.target.samples[i]).collect()
    }

    fn arm_record(&self, spec: &ExperimentSpec, target_indices: Vec<usize>) -> ArmRecord {
        let others: usize = self.others.iter().map(|p| p.len()).sum();
        ArmRecord {
            init_seed: spec.init_seed(),
            shuffle_seed: spec.arm_train_config().seed,
            config_hash: spec.config_hash(),
            train_persons: self.others.iter().map(|p| p.person_id.clone()).collect(),
            train_size: others + target_indices.len(),
            target_indices,
        }
    }
}

/// Trains arm B: the other persons only.
fn train_baseline(
    setup: &Setup<'_>,
    spec: &ExperimentSpec,
) -> Result<NetworkParams, CalibrationError> {
    let params = init_network(&spec.network, spec.init_seed())?;
    let data = setup.other_samples();
    Ok(train::train(params, &data, &spec.arm_train_config())?.0)
}

/// Trains arm A, starting from the baseline in finetune mode.
fn train_calibrated(
    setup: &Setup<'_>,
    spec: &ExperimentSpec,
    baseline: &NetworkParams,
) -> Result<NetworkParams, CalibrationError> {
    let cfg = spec.arm_train_config();
    let calib = setup.pick(setup.calibration);
    match spec.calibration.mode {
        CalibrationMode::RetrainWithCalibration => {
            let mut data = setup.other_samples();
            let n_other = data.len();
            data.extend(calib);
            let weight = spec.calibration.calib_weight;
            let weights: Vec<f64> = (0..data.len())
                .map(|i| if i < n_other { 1.0 } else { weight })
                .collect();
            let options = TrainOptions {
                weights: (weight != 1.0).then_some(weights.as_slice()),
                validation: None,
            };
            let params = init_network(&spec.network, spec.init_seed())?;
            Ok(train::train_with(params, &data, &cfg, options)?.0)
        }
        CalibrationMode::Finetune => {
            let ft = &spec.calibration.finetune;
            let cfg = TrainConfig {
                epochs: ft.epochs,
                steps_per_epoch: ft.steps_per_epoch,
                learning_rate: ft.learning_rate,
                ..cfg
            };
            Ok(train::train(baseline.clone(), &calib, &cfg)?.0)
        }
    }
}

/// Runs one paired experiment, optionally reusing an already trained arm B
/// model. The baseline only depends on the target person and the spec's
/// seed and configs, never on the partition.
pub(crate) fn run_paired_with_baseline(
    all_persons: &[PersonDataset],
    partitions: &PartitionSet,
    spec: &ExperimentSpec,
    baseline: Option<&NetworkParams>,
) -> Result<PairedResult, CalibrationError> {
    let setup = setup(all_persons, partitions, spec)?;
    let trained;
    let baseline = match baseline {
        Some(b) => b,
        None => {
            trained = train_baseline(&setup, spec)?;
            &trained
        }
    };
    let calibrated = train_calibrated(&setup, spec, baseline)?;
    let test = setup.pick(&setup.test);
    let with = train::evaluate(&calibrated, &test)?;
    let without = train::evaluate(baseline, &test)?;
    Ok(PairedResult {
        target_person: spec.target_person.clone(),
        partition_index: spec.partition_index,
        error_with: (&with).into(),
        error_without: (&without).into(),
        test_size: setup.test.len(),
        with_calibration: setup.arm_record(spec, setup.calibration.to_vec()),
        without_calibration: setup.arm_record(spec, Vec::new()),
        test_indices: setup.test,
    })
}

/// Trains arm B for `spec`'s target person.
pub(crate) fn baseline_for(
    all_persons: &[PersonDataset],
    partitions: &PartitionSet,
    spec: &ExperimentSpec,
) -> Result<NetworkParams, CalibrationError> {
    train_baseline(&setup(all_persons, partitions, spec)?, spec)
}

/// Trains both arms for one person and partition and evaluates them on the
/// same held-out samples.
pub fn run_paired_experiment(
    all_persons: &[PersonDataset],
    partitions: &PartitionSet,
    spec: &ExperimentSpec,
) -> Result<PairedResult, CalibrationError> {
    run_paired_with_baseline(all_persons, partitions, spec, None)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::dataset::{
        generate_synthetic_person, partition_person_into, EyeAppearance, PrepareConfig,
        SyntheticPersonSpec,
    };
    use crate::net::Pooling;

    pub fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            stem_channels: 2,
            stage_channels: vec![2, 4],
            blocks_per_stage: 1,
            fc_width: 8,
            pooling: Pooling::Flatten,
            ..NetworkConfig::default()
        }
    }

    pub fn quick_train() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            steps_per_epoch: 2,
            ..TrainConfig::default()
        }
    }

    /// Persons of `n` samples with biases from `biases`, and 10-way
    /// partitions.
    pub fn persons(biases: &[[f64; 2]], n: usize) -> (Vec<PersonDataset>, Vec<PartitionSet>) {
        let cfg = PrepareConfig {
            per_eye: n / 2,
            partitions: 10,
        };
        let persons: Vec<_> = biases
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let mut spec = SyntheticPersonSpec::new(PersonId::numbered(i), b, 0.0, n);
                spec.appearance = EyeAppearance::random(&mut seed::rng(9, &[i as u64]));
                generate_synthetic_person(&spec, 5).unwrap()
            })
            .collect();
        let parts = persons
            .iter()
            .map(|p| partition_person_into(p, 5, &cfg).unwrap())
            .collect();
        (persons, parts)
    }

    pub fn spec(target: usize, k: usize) -> ExperimentSpec {
        ExperimentSpec {
            target_person: PersonId::numbered(target),
            partition_index: k,
            network: tiny_net(),
            train_config: quick_train(),
            seed: 17,
            calibration: CalibrationOptions::default(),
        }
    }
}
