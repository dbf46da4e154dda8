//! Full studies: every person × every partition, checkpointed in a JSON
//! manifest so an interrupted study can resume.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::{mpsc, Mutex};

use serde::{Deserialize, Serialize};

use super::{
    baseline_for, run_paired_with_baseline, CalibrationError, CalibrationOptions, ExperimentSpec,
    PairedResult, StudyReport,
};
use crate::dataset::{self, PartitionSet, PersonDataset, PersonId};
use crate::net::{NetworkConfig, NetworkParams};
use crate::seed::{self, stream};
use crate::train::TrainConfig;

pub const MANIFEST_VERSION: u32 = 1;

/// Everything that determines a study's numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct StudyConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationOptions,
    /// Train arm B once per person instead of once per partition. The
    /// numbers are identical either way; only the cost differs.
    pub share_baseline: bool,
}

impl StudyConfig {
    /// The experiment for `person` and partition `k`. Both arms draw their
    /// seed from the study seed and the person, so every partition of a
    /// person shares one baseline model.
    pub fn experiment(&self, person: &PersonId, k: usize) -> ExperimentSpec {
        ExperimentSpec {
            target_person: person.clone(),
            partition_index: k,
            network: self.network.clone(),
            train_config: self.train.clone(),
            seed: seed::derive(
                self.seed,
                &[stream::EXPERIMENT, seed::label(person.as_str())],
            ),
            calibration: self.calibration.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ExperimentState {
    Pending,
    Completed { result: PairedResult },
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEntry {
    pub person_id: PersonId,
    pub partition_index: usize,
    #[serde(flatten)]
    pub state: ExperimentState,
}

/// Study state on disk: the inputs that fix every number plus the status
/// and result of each experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub version: u32,
    pub config: StudyConfig,
    pub dataset_hash: String,
    pub partitions: Vec<PartitionSet>,
    pub experiments: Vec<ExperimentEntry>,
}

impl StudyManifest {
    /// A fresh manifest with every experiment pending. `partitions` must
    /// hold one set per person, in the same order.
    pub fn new(
        persons: &[PersonDataset],
        partitions: Vec<PartitionSet>,
        config: StudyConfig,
    ) -> Result<Self, CalibrationError> {
        if persons.len() < 2 {
            return Err(CalibrationError::TooFewPersons(persons.len()));
        }
        config.calibration.validate()?;
        config.network.validate()?;
        config.train.validate()?;
        if partitions.len() != persons.len() {
            return Err(CalibrationError::ManifestMismatch(format!(
                "{} partition sets for {} persons",
                partitions.len(),
                persons.len()
            )));
        }
        for (p, set) in persons.iter().zip(&partitions) {
            if set.person_id != p.person_id {
                return Err(CalibrationError::PartitionMismatch {
                    expected: p.person_id.clone(),
                    found: set.person_id.clone(),
                });
            }
            set.check(p.len(), set.len())
                .map_err(|e| CalibrationError::InvalidOption(format!("{}: {e}", p.person_id)))?;
        }
        let experiments = partitions
            .iter()
            .flat_map(|set| {
                (0..set.len()).map(|k| ExperimentEntry {
                    person_id: set.person_id.clone(),
                    partition_index: k,
                    state: ExperimentState::Pending,
                })
            })
            .collect();
        Ok(StudyManifest {
            version: MANIFEST_VERSION,
            config,
            dataset_hash: dataset::persons_hash(persons)?,
            partitions,
            experiments,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let bytes = fs::read(path).map_err(|source| CalibrationError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: StudyManifest =
            serde_json::from_slice(&bytes).map_err(|e| CalibrationError::Manifest {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CalibrationError::Manifest {
                path: path.to_path_buf(),
                reason: format!("unsupported version {}", manifest.version),
            });
        }
        Ok(manifest)
    }

    /// Writes the manifest atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let io = |source| CalibrationError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    /// Checks that `persons` are the data this manifest was started on.
    pub fn check_dataset(&self, persons: &[PersonDataset]) -> Result<(), CalibrationError> {
        let hash = dataset::persons_hash(persons)?;
        if hash != self.dataset_hash {
            return Err(CalibrationError::ManifestMismatch(format!(
                "dataset hash {hash} differs from recorded {}",
                self.dataset_hash
            )));
        }
        let ids: Vec<_> = persons.iter().map(|p| &p.person_id).collect();
        let recorded: Vec<_> = self.partitions.iter().map(|s| &s.person_id).collect();
        if ids != recorded {
            return Err(CalibrationError::ManifestMismatch(
                "person order differs from the recorded one".into(),
            ));
        }
        Ok(())
    }

    pub fn pending(&self) -> usize {
        self.experiments
            .iter()
            .filter(|e| e.state == ExperimentState::Pending)
            .count()
    }

    pub fn is_complete(&self) -> bool {
        self.pending() == 0
    }

    pub fn report(&self) -> StudyReport {
        StudyReport::from_entries(&self.experiments)
    }
}

enum Job {
    Baseline(usize),
    Pair(usize),
}

enum Outcome {
    Baseline(usize, Result<NetworkParams, CalibrationError>),
    Pair(usize, Result<PairedResult, CalibrationError>),
}

fn record(
    entry: &mut ExperimentEntry,
    outcome: Result<PairedResult, CalibrationError>,
) -> Result<(), CalibrationError> {
    entry.state = match outcome {
        Ok(result) => ExperimentState::Completed { result },
        Err(e) if e.is_divergence() => {
            log::warn!(
                "{} partition {} failed: {e}",
                entry.person_id,
                entry.partition_index
            );
            ExperimentState::Failed {
                reason: e.to_string(),
            }
        }
        Err(e) => return Err(e),
    };
    Ok(())
}

/// Runs `jobs` on `workers` threads, handing each outcome to `sink` on the
/// calling thread as soon as it is ready.
fn run_jobs<F>(
    jobs: Vec<Job>,
    workers: usize,
    work: &(dyn Fn(&Job) -> Outcome + Sync),
    mut sink: F,
) -> Result<(), CalibrationError>
where
    F: FnMut(Outcome) -> Result<(), CalibrationError>,
{
    let total = jobs.len();
    let queue = Mutex::new(VecDeque::from(jobs));
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, total.max(1)) {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let job = queue.lock().expect("queue lock").pop_front();
                let Some(job) = job else { break };
                if tx.send(work(&job)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut result = Ok(());
        for outcome in rx {
            if result.is_ok() {
                result = sink(outcome);
            }
            if result.is_err() {
                // stop handing out work; running jobs finish and are dropped
                queue.lock().expect("queue lock").clear();
            }
        }
        result
    })
}

/// Runs every pending experiment of `manifest` over `persons` with up to
/// `jobs` worker threads. `checkpoint` is called on the calling thread
/// after each experiment is recorded. Results do not depend on `jobs` or
/// on completion order.
pub fn run_pending<F>(
    manifest: &mut StudyManifest,
    persons: &[PersonDataset],
    jobs: usize,
    mut checkpoint: F,
) -> Result<(), CalibrationError>
where
    F: FnMut(&StudyManifest) -> Result<(), CalibrationError>,
{
    manifest.check_dataset(persons)?;
    let config = manifest.config.clone();
    let partitions = manifest.partitions.clone();
    let person_index: BTreeMap<&PersonId, usize> = partitions
        .iter()
        .enumerate()
        .map(|(i, s)| (&s.person_id, i))
        .collect();
    let pending: Vec<(usize, usize)> = manifest
        .experiments
        .iter()
        .enumerate()
        .filter(|(_, e)| e.state == ExperimentState::Pending)
        .map(|(i, e)| {
            person_index
                .get(&e.person_id)
                .map(|&p| (i, p))
                .ok_or_else(|| CalibrationError::TargetAbsent(e.person_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let spec_of = |entry: usize| {
        let e = &manifest.experiments[entry];
        config.experiment(&e.person_id, e.partition_index)
    };
    let specs: Vec<ExperimentSpec> = pending.iter().map(|&(i, _)| spec_of(i)).collect();

    let mut baselines: BTreeMap<usize, Result<NetworkParams, String>> = BTreeMap::new();
    if config.share_baseline {
        let mut needed: Vec<usize> = pending.iter().map(|&(_, p)| p).collect();
        needed.dedup();
        let work = |job: &Job| match *job {
            Job::Baseline(p) => {
                let spec = config.experiment(&partitions[p].person_id, 0);
                Outcome::Baseline(p, baseline_for(persons, &partitions[p], &spec))
            }
            Job::Pair(_) => unreachable!("baseline phase"),
        };
        let jobs_list = needed.into_iter().map(Job::Baseline).collect();
        run_jobs(jobs_list, jobs, &work, |outcome| {
            if let Outcome::Baseline(p, r) = outcome {
                match r {
                    Ok(params) => {
                        baselines.insert(p, Ok(params));
                    }
                    Err(e) if e.is_divergence() => {
                        baselines.insert(p, Err(e.to_string()));
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(())
        })?;
    }

    let work = |job: &Job| match *job {
        Job::Pair(j) => {
            let (_, p) = pending[j];
            let result = match baselines.get(&p) {
                Some(Err(reason)) => Err(CalibrationError::BaselineFailed(reason.clone())),
                Some(Ok(base)) => {
                    run_paired_with_baseline(persons, &partitions[p], &specs[j], Some(base))
                }
                None => run_paired_with_baseline(persons, &partitions[p], &specs[j], None),
            };
            Outcome::Pair(j, result)
        }
        Job::Baseline(_) => unreachable!("experiment phase"),
    };
    let total = pending.len();
    let mut done = 0;
    run_jobs(
        (0..pending.len()).map(Job::Pair).collect(),
        jobs,
        &work,
        |outcome| {
            if let Outcome::Pair(j, r) = outcome {
                let entry = &mut manifest.experiments[pending[j].0];
                record(entry, r)?;
                done += 1;
                log::info!(
                    "[{done}/{total}] {} partition {} done",
                    entry.person_id,
                    entry.partition_index
                );
                checkpoint(manifest)?;
            }
            Ok(())
        },
    )
}

/// Runs a complete study in memory: partitions are drawn from the study
/// seed, every experiment runs on the calling thread.
pub fn run_full_study(
    persons: &[PersonDataset],
    config: &StudyConfig,
) -> Result<StudyReport, CalibrationError> {
    let partitions = default_partitions(persons, config.seed)?;
    let mut manifest = StudyManifest::new(persons, partitions, config.clone())?;
    run_pending(&mut manifest, persons, 1, |_| Ok(()))?;
    Ok(manifest.report())
}

/// Ten equal partitions per person, drawn from `seed`.
pub fn default_partitions(
    persons: &[PersonDataset],
    seed: u64,
) -> Result<Vec<PartitionSet>, CalibrationError> {
    persons
        .iter()
        .map(|p| {
            let cfg = dataset::PrepareConfig {
                per_eye: p.len() / 2,
                partitions: dataset::DEFAULT_PARTITIONS,
            };
            if p.len() % 2 != 0 {
                return Err(CalibrationError::InvalidOption(format!(
                    "{} has an odd sample count {}",
                    p.person_id,
                    p.len()
                )));
            }
            Ok(dataset::partition_person_into(p, seed, &cfg)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;

    fn config(share: bool) -> StudyConfig {
        StudyConfig {
            seed: 3,
            network: tiny_net(),
            train: quick_train(),
            calibration: CalibrationOptions::default(),
            share_baseline: share,
        }
    }

    #[test]
    fn two_person_study_has_twenty_results() {
        let (persons, _) = persons(&[[0.0; 2], [0.05, 0.0]], 20);
        let report = run_full_study(&persons, &config(true)).unwrap();
        assert_eq!(report.results.len(), 20);
        assert_eq!(report.summaries.len(), 2);
        assert!(report.failures.is_empty());
    }

    #[test]
    fn sharing_the_baseline_and_threads_leave_numbers_unchanged() {
        let (persons, parts) = persons(&[[0.0; 2], [0.05, 0.0], [0.0, 0.05]], 20);
        let run = |share: bool, jobs: usize| {
            let mut m = StudyManifest::new(&persons, parts.clone(), config(share)).unwrap();
            run_pending(&mut m, &persons, jobs, |_| Ok(())).unwrap();
            m.experiments
        };
        let reference = run(false, 1);
        let shared = run(true, 3);
        assert_eq!(reference, shared);
        assert_eq!(run(true, 1), shared);
    }

    #[test]
    fn resume_runs_only_pending() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("study.json");
        let (persons, parts) = persons(&[[0.0; 2], [0.05, 0.0]], 20);
        let mut full = StudyManifest::new(&persons, parts.clone(), config(true)).unwrap();
        run_pending(&mut full, &persons, 1, |_| Ok(())).unwrap();

        let mut m = StudyManifest::new(&persons, parts, config(true)).unwrap();
        let mut calls = 0;
        let interrupted = run_pending(&mut m, &persons, 1, |m| {
            calls += 1;
            m.save(&path)?;
            if calls == 7 {
                return Err(CalibrationError::InvalidOption("interrupted".into()));
            }
            Ok(())
        });
        assert!(interrupted.is_err());
        let mut resumed = StudyManifest::load(&path).unwrap();
        assert_eq!(resumed.pending(), 13);
        let mut ran = 0;
        run_pending(&mut resumed, &persons, 1, |_| {
            ran += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(ran, 13);
        assert!(resumed.is_complete());
        assert_eq!(resumed, full);
    }

    #[test]
    fn manifest_rejects_other_data() {
        let (persons, parts) = persons(&[[0.0; 2], [0.05, 0.0]], 20);
        let mut m = StudyManifest::new(&persons, parts, config(true)).unwrap();
        let mut changed = persons.clone();
        changed[1].samples[0].gaze[0] = 0.123;
        assert!(matches!(
            run_pending(&mut m, &changed, 1, |_| Ok(())),
            Err(CalibrationError::ManifestMismatch(_))
        ));
    }

    #[test]
    fn study_needs_two_persons() {
        let (persons, parts) = persons(&[[0.0; 2]], 20);
        assert!(matches!(
            StudyManifest::new(&persons, parts, config(true)),
            Err(CalibrationError::TooFewPersons(1))
        ));
    }

    #[test]
    fn divergence_is_recorded_not_fatal() {
        let (persons, parts) = persons(&[[0.0; 2], [0.05, 0.0]], 20);
        let mut cfg = config(false);
        cfg.train.learning_rate = 1e300;
        let mut m = StudyManifest::new(&persons, parts, cfg).unwrap();
        run_pending(&mut m, &persons, 1, |_| Ok(())).unwrap();
        assert!(m
            .experiments
            .iter()
            .all(|e| matches!(e.state, ExperimentState::Failed { .. })));
        let report = m.report();
        assert_eq!(report.failures.len(), 20);
        assert!(report.summaries.is_empty());
    }
}
