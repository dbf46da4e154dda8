//! Study aggregation, CSV/JSON rendering and the pairing audit.
//!
//! Aggregate CSV columns:
//! `person,completed,failed,mean_with,std_with,mean_without,std_without,best_partition,improvement_pct`
//!
//! Detail CSV columns:
//! `person,partition,status,mean_with,std_with,mean_without,std_without,test_size,improvement_pct`
//!
//! The combined report CSV stacks both row kinds under the union of the
//! columns with a leading `row` column (`person` or `experiment`); cells
//! that do not apply to a row kind are empty. Errors are in normalized
//! screen units, standard deviations are population deviations and
//! `improvement_pct = 100 (without − with) / without`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{CalibrationError, ExperimentEntry, ExperimentState, PairedResult, StudyManifest};
use crate::dataset::PersonId;

/// Per-person aggregate over the completed partitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonSummary {
    pub person: PersonId,
    pub completed: usize,
    pub failed: usize,
    pub mean_with: f64,
    pub std_with: f64,
    pub mean_without: f64,
    pub std_without: f64,
    /// Partition with the lowest calibrated error; ties go to the lowest
    /// index.
    pub best_partition: usize,
    pub improvement_pct: f64,
}

impl PersonSummary {
    pub fn improvement(&self) -> f64 {
        self.improvement_pct / 100.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedExperiment {
    pub person: PersonId,
    pub partition: usize,
    pub reason: String,
}

/// One experiment as it appears in the detail table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub person: PersonId,
    pub partition: usize,
    pub status: String,
    pub mean_with: Option<f64>,
    pub std_with: Option<f64>,
    pub mean_without: Option<f64>,
    pub std_without: Option<f64>,
    pub test_size: Option<usize>,
    pub improvement_pct: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub results: Vec<PairedResult>,
    pub failures: Vec<FailedExperiment>,
    /// Persons with at least one completed experiment, in study order.
    pub summaries: Vec<PersonSummary>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl StudyReport {
    /// Aggregates completed and failed entries; pending ones are ignored.
    pub fn from_entries(entries: &[ExperimentEntry]) -> Self {
        let mut report = StudyReport::default();
        let mut order: Vec<PersonId> = Vec::new();
        let mut failed: BTreeMap<PersonId, usize> = BTreeMap::new();
        for e in entries {
            if !order.contains(&e.person_id) {
                order.push(e.person_id.clone());
            }
            match &e.state {
                ExperimentState::Completed { result } => report.results.push(result.clone()),
                ExperimentState::Failed { reason } => {
                    *failed.entry(e.person_id.clone()).or_default() += 1;
                    report.failures.push(FailedExperiment {
                        person: e.person_id.clone(),
                        partition: e.partition_index,
                        reason: reason.clone(),
                    });
                }
                ExperimentState::Pending => {}
            }
        }
        for person in order {
            let mut rs: Vec<&PairedResult> = report
                .results
                .iter()
                .filter(|r| r.target_person == person)
                .collect();
            if rs.is_empty() {
                continue;
            }
            rs.sort_by_key(|r| r.partition_index);
            let with: Vec<f64> = rs.iter().map(|r| r.error_with.mean).collect();
            let without: Vec<f64> = rs.iter().map(|r| r.error_without.mean).collect();
            let (mean_with, std_with) = mean_std(&with);
            let (mean_without, std_without) = mean_std(&without);
            let best = rs
                .iter()
                .min_by(|a, b| a.error_with.mean.total_cmp(&b.error_with.mean))
                .expect("non-empty");
            report.summaries.push(PersonSummary {
                completed: rs.len(),
                failed: failed.get(&person).copied().unwrap_or(0),
                person,
                mean_with,
                std_with,
                mean_without,
                std_without,
                best_partition: best.partition_index,
                improvement_pct: 100.0 * (mean_without - mean_with) / mean_without,
            });
        }
        report
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty() && self.failures.is_empty()
    }

    pub fn summary(&self, person: &PersonId) -> Option<&PersonSummary> {
        self.summaries.iter().find(|s| &s.person == person)
    }

    /// Completed and failed experiments ordered by person and partition.
    pub fn detail_rows(&self) -> Vec<DetailRow> {
        let mut rows: Vec<DetailRow> = self
            .results
            .iter()
            .map(|r| DetailRow {
                person: r.target_person.clone(),
                partition: r.partition_index,
                status: "completed".into(),
                mean_with: Some(r.error_with.mean),
                std_with: Some(r.error_with.std),
                mean_without: Some(r.error_without.mean),
                std_without: Some(r.error_without.std),
                test_size: Some(r.test_size),
                improvement_pct: Some(100.0 * r.improvement()),
            })
            .chain(self.failures.iter().map(|f| DetailRow {
                person: f.person.clone(),
                partition: f.partition,
                status: "failed".into(),
                mean_with: None,
                std_with: None,
                mean_without: None,
                std_without: None,
                test_size: None,
                improvement_pct: None,
            }))
            .collect();
        let rank: BTreeMap<&PersonId, usize> = self
            .summaries
            .iter()
            .map(|s| &s.person)
            .chain(self.failures.iter().map(|f| &f.person))
            .fold(BTreeMap::new(), |mut m, p| {
                let next = m.len();
                m.entry(p).or_insert(next);
                m
            });
        rows.sort_by_key(|r| (rank.get(&r.person).copied(), r.partition));
        rows
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!(
                "unknown report format {other:?} (expected csv or json)"
            )),
        }
    }
}

#[derive(Serialize)]
struct CombinedRow<'a> {
    row: &'static str,
    person: &'a PersonId,
    partition: Option<usize>,
    status: Option<&'a str>,
    completed: Option<usize>,
    failed: Option<usize>,
    mean_with: Option<f64>,
    std_with: Option<f64>,
    mean_without: Option<f64>,
    std_without: Option<f64>,
    test_size: Option<usize>,
    best_partition: Option<usize>,
    improvement_pct: Option<f64>,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    persons: &'a [PersonSummary],
    experiments: Vec<DetailRow>,
    failures: &'a [FailedExperiment],
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

/// Per-person aggregate table.
pub fn aggregate_csv(report: &StudyReport) -> String {
    to_csv(&report.summaries)
}

/// One row per experiment, failed ones flagged with empty numbers.
pub fn detail_csv(report: &StudyReport) -> String {
    to_csv(report.detail_rows())
}

/// Per-person means with standard-deviation error bars, one row per
/// person: `person,mean_without,std_without,mean_with,std_with`.
pub fn plot_data_csv(report: &StudyReport) -> String {
    #[derive(Serialize)]
    struct Point<'a> {
        person: &'a PersonId,
        mean_without: f64,
        std_without: f64,
        mean_with: f64,
        std_with: f64,
    }
    to_csv(report.summaries.iter().map(|s| Point {
        person: &s.person,
        mean_without: s.mean_without,
        std_without: s.std_without,
        mean_with: s.mean_with,
        std_with: s.std_with,
    }))
}

/// Renders aggregate and detail rows as one document.
pub fn render_report(
    report: &StudyReport,
    format: ReportFormat,
) -> Result<String, CalibrationError> {
    if report.is_empty() {
        return Err(CalibrationError::EmptyReport);
    }
    let details = report.detail_rows();
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(&JsonReport {
            persons: &report.summaries,
            experiments: details,
            failures: &report.failures,
        })
        .expect("report serializes"),
        ReportFormat::Csv => {
            let persons = report.summaries.iter().map(|s| CombinedRow {
                row: "person",
                person: &s.person,
                partition: None,
                status: None,
                completed: Some(s.completed),
                failed: Some(s.failed),
                mean_with: Some(s.mean_with),
                std_with: Some(s.std_with),
                mean_without: Some(s.mean_without),
                std_without: Some(s.std_without),
                test_size: None,
                best_partition: Some(s.best_partition),
                improvement_pct: Some(s.improvement_pct),
            });
            let experiments = details.iter().map(|d| CombinedRow {
                row: "experiment",
                person: &d.person,
                partition: Some(d.partition),
                status: Some(&d.status),
                completed: None,
                failed: None,
                mean_with: d.mean_with,
                std_with: d.std_with,
                mean_without: d.mean_without,
                std_without: d.std_without,
                test_size: d.test_size,
                best_partition: None,
                improvement_pct: d.improvement_pct,
            });
            to_csv(persons.chain(experiments))
        }
    })
}

/// Outcome of [`audit`]: one message per broken pairing or leakage rule.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub experiments_checked: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every completed experiment in a manifest: both arms share seeds
/// and configuration, the test indices are exactly the complement of the
/// calibration partition, and no test index appears in any training set.
pub fn audit(manifest: &StudyManifest) -> AuditReport {
    let mut out = AuditReport::default();
    let parts: BTreeMap<&PersonId, _> = manifest
        .partitions
        .iter()
        .map(|s| (&s.person_id, s))
        .collect();
    for entry in &manifest.experiments {
        let ExperimentState::Completed { result: r } = &entry.state else {
            continue;
        };
        out.experiments_checked += 1;
        let tag = format!("{} partition {}", entry.person_id, entry.partition_index);
        let mut fail = |msg: String| out.violations.push(format!("{tag}: {msg}"));
        if r.target_person != entry.person_id || r.partition_index != entry.partition_index {
            fail("result belongs to another experiment".into());
        }
        let (a, b) = (&r.with_calibration, &r.without_calibration);
        if a.init_seed != b.init_seed || a.shuffle_seed != b.shuffle_seed {
            fail("arms use different seeds".into());
        }
        if a.config_hash != b.config_hash {
            fail("arms use different configurations".into());
        }
        let spec = manifest
            .config
            .experiment(&entry.person_id, entry.partition_index);
        if a.config_hash != spec.config_hash() || a.init_seed != spec.init_seed() {
            fail("arm configuration differs from the study configuration".into());
        }
        if a.train_persons != b.train_persons {
            fail("arms train on different persons".into());
        }
        if a.train_persons.contains(&r.target_person) || b.train_persons.contains(&r.target_person)
        {
            fail("target person's full set is in a training set".into());
        }
        let test: BTreeSet<usize> = r.test_indices.iter().copied().collect();
        if test.len() != r.test_indices.len() || r.test_size != test.len() {
            fail("test indices are not a set of the recorded size".into());
        }
        for (arm, rec) in [("A", a), ("B", b)] {
            if rec.target_indices.iter().any(|i| test.contains(i)) {
                fail(format!("arm {arm} trains on test indices"));
            }
        }
        if !b.target_indices.is_empty() {
            fail("arm B trains on target samples".into());
        }
        match parts.get(&entry.person_id) {
            Some(set) if entry.partition_index < set.len() => {
                if a.target_indices != set.partitions[entry.partition_index] {
                    fail("arm A calibration samples differ from the partition".into());
                }
                if r.test_indices != set.complement(entry.partition_index) {
                    fail("test set is not the partition's complement".into());
                }
            }
            _ => fail("no recorded partition".into()),
        }
    }
    out
}
