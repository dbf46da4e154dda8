//! Per-person balancing and calibration partitions.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, EyeSide, PartitionSet, PersonDataset};
use crate::seed::{self, stream};

/// Samples drawn per eye side.
pub const DEFAULT_PER_EYE: usize = 1500;
/// Calibration partitions per person.
pub const DEFAULT_PARTITIONS: usize = 10;

/// Size of the balanced per-person set and its partitioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub per_eye: usize,
    pub partitions: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            per_eye: DEFAULT_PER_EYE,
            partitions: DEFAULT_PARTITIONS,
        }
    }
}

impl PrepareConfig {
    /// Samples per prepared person (3000 by default).
    pub fn target(&self) -> usize {
        2 * self.per_eye
    }

    /// Indices per partition (300 by default).
    pub fn partition_size(&self) -> usize {
        self.target() / self.partitions
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.per_eye == 0
            || self.partitions == 0
            || !self.target().is_multiple_of(self.partitions)
        {
            return Err(DatasetError::InvalidParameter(format!(
                "{} samples per person do not split into {} equal partitions",
                self.target(),
                self.partitions
            )));
        }
        Ok(())
    }
}

/// Balances one person to 1500 left + 1500 right samples.
pub fn prepare_person(raw: &PersonDataset, seed: u64) -> Result<PersonDataset, DatasetError> {
    prepare_person_with(raw, seed, &PrepareConfig::default())
}

/// Balances one person to `per_eye` samples of each side.
///
/// Each side contributes up to `per_eye` samples drawn without replacement.
/// A shortfall is filled first from the person's unused samples of either
/// side, then by duplicating already chosen samples uniformly at random.
/// The result is shuffled. Output depends only on `raw`, `seed` and the
/// person id.
pub fn prepare_person_with(
    raw: &PersonDataset,
    seed: u64,
    cfg: &PrepareConfig,
) -> Result<PersonDataset, DatasetError> {
    cfg.validate()?;
    let mut rng = seed::rng(
        seed,
        &[stream::PREPARE, seed::label(raw.person_id.as_str())],
    );
    let side_indices = |side: EyeSide| -> Vec<usize> {
        raw.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.eye_side == side)
            .map(|(i, _)| i)
            .collect()
    };

    let mut chosen = Vec::with_capacity(cfg.target());
    let mut used = vec![false; raw.samples.len()];
    for side in [EyeSide::Left, EyeSide::Right] {
        let pool = side_indices(side);
        if pool.is_empty() {
            return Err(DatasetError::MissingEyeSide {
                person: raw.person_id.clone(),
                side,
            });
        }
        let take = pool.len().min(cfg.per_eye);
        for k in index::sample(&mut rng, pool.len(), take).into_iter() {
            chosen.push(pool[k]);
            used[pool[k]] = true;
        }
    }

    let target = cfg.target();
    if chosen.len() < target {
        let spare: Vec<usize> = (0..raw.samples.len()).filter(|&i| !used[i]).collect();
        let take = spare.len().min(target - chosen.len());
        chosen.extend(
            index::sample(&mut rng, spare.len(), take)
                .into_iter()
                .map(|k| spare[k]),
        );
    }
    let distinct = chosen.len();
    while chosen.len() < target {
        let k = rng.random_range(0..distinct);
        chosen.push(chosen[k]);
    }
    chosen.shuffle(&mut rng);

    Ok(PersonDataset {
        person_id: raw.person_id.clone(),
        samples: chosen.into_iter().map(|i| raw.samples[i].clone()).collect(),
    })
}

/// Splits a prepared 3000-sample person into 10 random blocks of 300.
pub fn partition_person(prepared: &PersonDataset, seed: u64) -> Result<PartitionSet, DatasetError> {
    partition_person_into(prepared, seed, &PrepareConfig::default())
}

/// Splits a prepared person into `cfg.partitions` random equal blocks.
///
/// The blocks are consecutive slices of a seeded permutation of the sample
/// indices; each block is stored in ascending order.
pub fn partition_person_into(
    prepared: &PersonDataset,
    seed: u64,
    cfg: &PrepareConfig,
) -> Result<PartitionSet, DatasetError> {
    cfg.validate()?;
    if prepared.len() != cfg.target() {
        return Err(DatasetError::WrongSampleCount {
            person: prepared.person_id.clone(),
            expected: cfg.target(),
            actual: prepared.len(),
        });
    }
    let mut rng = seed::rng(
        seed,
        &[stream::PARTITION, seed::label(prepared.person_id.as_str())],
    );
    let mut perm: Vec<usize> = (0..prepared.len()).collect();
    perm.shuffle(&mut rng);
    let partitions = perm
        .chunks_exact(cfg.partition_size())
        .map(|c| {
            let mut block = c.to_vec();
            block.sort_unstable();
            block
        })
        .collect();
    Ok(PartitionSet {
        person_id: prepared.person_id.clone(),
        partitions,
    })
}
