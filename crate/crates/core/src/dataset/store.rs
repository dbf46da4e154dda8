//! Flat binary sample store.
//!
//! A store is a directory holding one `pXX.gzd` file per person. Each file
//! is little-endian:
//!
//! ```text
//! "GZD1"            4 bytes magic
//! count             u32
//! count records of
//!   eye_side        u8   (0 left, 1 right)
//!   image           2160 bytes, row-major, stride 60
//!   head_angle      2 x f32 (yaw, pitch)
//!   gaze            2 x f32 (x, y)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{
    DatasetError, EyeImage, EyeSide, NormalizedSample, PartitionSet, PersonDataset, PersonId,
    EYE_PIXELS,
};

pub const STORE_MAGIC: &[u8; 4] = b"GZD1";
pub const STORE_EXTENSION: &str = "gzd";

const HEADER_LEN: usize = 8;
const RECORD_LEN: usize = 1 + EYE_PIXELS + 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Directory of `pXX.gzd` files.
    #[default]
    Gzd,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn store_files(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e == STORE_EXTENSION) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every person file in the store directory, ordered by file name.
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
) -> Result<Vec<PersonDataset>, DatasetError> {
    match format {
        DatasetFormat::Gzd => store_files(path)?.iter().map(|f| load_person(f)).collect(),
    }
}

/// Loads a single `.gzd` file; the person id is the file stem.
pub fn load_person(path: &Path) -> Result<PersonDataset, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let person_id = PersonId::new(
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    );
    decode_person(path, person_id, &bytes)
}

fn decode_person(
    path: &Path,
    person_id: PersonId,
    bytes: &[u8],
) -> Result<PersonDataset, DatasetError> {
    if bytes.len() < HEADER_LEN {
        return Err(DatasetError::BadHeader {
            path: path.to_path_buf(),
            reason: format!("file is {} bytes, shorter than the header", bytes.len()),
        });
    }
    if &bytes[..4] != STORE_MAGIC {
        return Err(DatasetError::BadHeader {
            path: path.to_path_buf(),
            reason: "missing GZD1 magic".into(),
        });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    let malformed = |index: usize, reason: String| DatasetError::MalformedRecord {
        path: path.to_path_buf(),
        index,
        reason,
    };
    let expected = count * RECORD_LEN;
    if body.len() < expected {
        let index = body.len() / RECORD_LEN;
        return Err(malformed(
            index,
            format!(
                "record truncated ({} of {RECORD_LEN} bytes present); image must be 60x36",
                body.len() - index * RECORD_LEN
            ),
        ));
    }
    if body.len() > expected {
        return Err(malformed(
            count,
            format!(
                "{} trailing bytes after the last record",
                body.len() - expected
            ),
        ));
    }

    let f32_at = |rec: &[u8], off: usize| f32::from_le_bytes(rec[off..off + 4].try_into().unwrap());
    let mut samples = Vec::with_capacity(count);
    for (index, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let eye_side = EyeSide::from_byte(rec[0])
            .ok_or_else(|| malformed(index, format!("eye side byte {} is not 0 or 1", rec[0])))?;
        let eye_image = EyeImage::from_pixels(rec[1..1 + EYE_PIXELS].to_vec())
            .map_err(|e| malformed(index, e.to_string()))?;
        let off = 1 + EYE_PIXELS;
        let sample = NormalizedSample {
            eye_image,
            head_angle: [f32_at(rec, off), f32_at(rec, off + 4)],
            gaze: [f32_at(rec, off + 8), f32_at(rec, off + 12)],
            eye_side,
            person_id: person_id.clone(),
        };
        sample.validate().map_err(|r| malformed(index, r))?;
        samples.push(sample);
    }
    Ok(PersonDataset { person_id, samples })
}

/// The on-disk encoding of one person.
pub fn encode_person(person: &PersonDataset) -> Result<Vec<u8>, DatasetError> {
    let count = u32::try_from(person.samples.len())
        .map_err(|_| DatasetError::InvalidParameter("more than u32::MAX samples".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + person.samples.len() * RECORD_LEN);
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for s in &person.samples {
        out.push(s.eye_side.to_byte());
        out.extend_from_slice(s.eye_image.pixels());
        for v in s.head_angle.iter().chain(s.gaze.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn person_file_name(person: &PersonId) -> String {
    format!("{person}.{STORE_EXTENSION}")
}

/// Writes one person as `<dir>/<person_id>.gzd`, returning the file path.
pub fn save_person(dir: &Path, person: &PersonDataset) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(person_file_name(&person.person_id));
    let bytes = encode_person(person)?;
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(io_err(&path))?;
    Ok(path)
}

pub fn save_dataset(dir: &Path, persons: &[PersonDataset]) -> Result<Vec<PathBuf>, DatasetError> {
    persons.iter().map(|p| save_person(dir, p)).collect()
}

fn hash_entry(hasher: &mut Sha256, name: &str, bytes: &[u8]) {
    hasher.update(name.as_bytes());
    hasher.update([0u8]);
    hasher.update(bytes);
}

/// SHA-256 over the store's file names and contents, hex encoded.
pub fn dataset_hash(dir: &Path) -> Result<String, DatasetError> {
    let mut hasher = Sha256::new();
    for f in store_files(dir)? {
        let name = f
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        hash_entry(&mut hasher, &name, &fs::read(&f).map_err(io_err(&f))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// The hash [`dataset_hash`] would report for a store holding exactly
/// `persons`.
pub fn persons_hash(persons: &[PersonDataset]) -> Result<String, DatasetError> {
    let mut named: Vec<(String, &PersonDataset)> = persons
        .iter()
        .map(|p| (person_file_name(&p.person_id), p))
        .collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let mut hasher = Sha256::new();
    for (name, p) in named {
        hash_entry(&mut hasher, &name, &encode_person(p)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Path of the partition file stored next to a person's samples.
pub fn partitions_path(dir: &Path, person: &PersonId) -> PathBuf {
    dir.join(format!("{person}.partitions.json"))
}

pub fn save_partitions(dir: &Path, set: &PartitionSet) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = partitions_path(dir, &set.person_id);
    let json = serde_json::to_vec_pretty(set)
        .map_err(|e| DatasetError::InvalidParameter(e.to_string()))?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(path)
}

/// Reads a person's partition file, or `None` when the store has none.
pub fn load_partitions(
    dir: &Path,
    person: &PersonId,
) -> Result<Option<PartitionSet>, DatasetError> {
    let path = partitions_path(dir, person);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let set: PartitionSet =
        serde_json::from_slice(&bytes).map_err(|e| DatasetError::BadHeader {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    if set.person_id != *person {
        return Err(DatasetError::BadHeader {
            path,
            reason: format!("partitions belong to {}, not {person}", set.person_id),
        });
    }
    Ok(Some(set))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: usize) -> NormalizedSample {
        NormalizedSample {
            eye_image: EyeImage::from_pixels(
                (0..EYE_PIXELS).map(|p| ((p + i) % 256) as u8).collect(),
            )
            .unwrap(),
            head_angle: [0.01 * i as f32, -0.02],
            gaze: [0.25, 0.75],
            eye_side: if i.is_multiple_of(2) {
                EyeSide::Left
            } else {
                EyeSide::Right
            },
            person_id: PersonId::new("p03"),
        }
    }

    #[test]
    fn empty_store_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), DatasetFormat::Gzd)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn missing_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(&dir.path().join("nope"), DatasetFormat::Gzd).unwrap_err();
        assert!(matches!(err, DatasetError::Io { .. }));
    }

    #[test]
    fn short_image_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = STORE_MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(0);
        bytes.extend(std::iter::repeat_n(128u8, 59 * 36));
        for v in [0f32, 0.0, 0.5, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.path().join("p00.gzd"), bytes).unwrap();
        match load_dataset(dir.path(), DatasetFormat::Gzd).unwrap_err() {
            DatasetError::MalformedRecord { index, .. } => assert_eq!(index, 0),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn gaze_out_of_range_rejected_with_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = PersonDataset {
            person_id: PersonId::new("p01"),
            samples: (0..3).map(sample).collect(),
        };
        p.samples[2].gaze = [1.5, 0.2];
        save_person(dir.path(), &p).unwrap();
        match load_dataset(dir.path(), DatasetFormat::Gzd).unwrap_err() {
            DatasetError::MalformedRecord { index, reason, .. } => {
                assert_eq!(index, 2);
                assert!(reason.contains("gaze"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("p00.gzd"), b"NOPE\0\0\0\0").unwrap();
        assert!(matches!(
            load_dataset(dir.path(), DatasetFormat::Gzd),
            Err(DatasetError::BadHeader { .. })
        ));
    }

    #[test]
    fn round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let persons: Vec<_> = ["p00", "p01"]
            .iter()
            .map(|id| PersonDataset {
                person_id: PersonId::new(*id),
                samples: (0..4)
                    .map(|i| NormalizedSample {
                        person_id: PersonId::new(*id),
                        ..sample(i)
                    })
                    .collect(),
            })
            .collect();
        save_dataset(dir.path(), &persons).unwrap();
        let back = load_dataset(dir.path(), DatasetFormat::Gzd).unwrap();
        assert_eq!(back, persons);
        let h1 = dataset_hash(dir.path()).unwrap();
        assert_eq!(h1.len(), 64);
        assert_eq!(h1, dataset_hash(dir.path()).unwrap());
        let reversed: Vec<_> = persons.iter().rev().cloned().collect();
        assert_eq!(persons_hash(&reversed).unwrap(), h1);
    }

    #[test]
    fn partitions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let id = PersonId::new("p04");
        assert!(load_partitions(dir.path(), &id).unwrap().is_none());
        let set = PartitionSet {
            person_id: id.clone(),
            partitions: vec![vec![0, 3], vec![1, 2]],
        };
        save_partitions(dir.path(), &set).unwrap();
        assert_eq!(load_partitions(dir.path(), &id).unwrap(), Some(set));
        std::fs::copy(
            partitions_path(dir.path(), &id),
            partitions_path(dir.path(), &PersonId::new("p05")),
        )
        .unwrap();
        assert!(load_partitions(dir.path(), &PersonId::new("p05")).is_err());
    }
}
