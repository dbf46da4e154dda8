//! Normalized gaze samples, the per-person store, sampling and partitioning.

mod prepare;
mod store;
mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use prepare::{
    partition_person, partition_person_into, prepare_person, prepare_person_with, PrepareConfig,
    DEFAULT_PARTITIONS, DEFAULT_PER_EYE,
};
pub use store::{
    dataset_hash, encode_person, load_dataset, load_partitions, load_person, partitions_path,
    persons_hash, save_dataset, save_partitions, save_person, DatasetFormat, STORE_EXTENSION,
    STORE_MAGIC,
};
pub use synthetic::{
    generate_synthetic_person, generate_synthetic_samples, pupil_center, render_eye, EyeAppearance,
    SyntheticPersonSpec, SyntheticSample, ADMISSIBLE_X, ADMISSIBLE_Y, HEAD_RANGE, LATENT_RANGE,
};

/// Width of a normalized eye crop in pixels.
pub const EYE_WIDTH: usize = 60;
/// Height of a normalized eye crop in pixels.
pub const EYE_HEIGHT: usize = 36;
/// Pixel count of a normalized eye crop.
pub const EYE_PIXELS: usize = EYE_WIDTH * EYE_HEIGHT;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed record {index}: {reason}")]
    MalformedRecord {
        path: PathBuf,
        index: usize,
        reason: String,
    },
    #[error("{path}: bad header: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("eye image must be {EYE_WIDTH}x{EYE_HEIGHT}, got {width}x{height}")]
    BadImageSize { width: usize, height: usize },
    #[error("person {person} has no {side} eye samples")]
    MissingEyeSide { person: PersonId, side: EyeSide },
    #[error("person {person} has {actual} samples, expected {expected}")]
    WrongSampleCount {
        person: PersonId,
        expected: usize,
        actual: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Identifier of one participant, e.g. `p00`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PersonId(Arc<str>);

impl PersonId {
    pub fn new(id: impl AsRef<str>) -> Self {
        PersonId(Arc::from(id.as_ref()))
    }

    /// Canonical id for the `index`-th participant.
    pub fn numbered(index: usize) -> Self {
        PersonId::new(format!("p{index:02}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PersonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EyeSide {
    Left,
    Right,
}

impl EyeSide {
    pub fn to_byte(self) -> u8 {
        match self {
            EyeSide::Left => 0,
            EyeSide::Right => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(EyeSide::Left),
            1 => Some(EyeSide::Right),
            _ => None,
        }
    }
}

impl fmt::Display for EyeSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EyeSide::Left => "left",
            EyeSide::Right => "right",
        })
    }
}

/// A 60x36 grayscale eye crop, row-major with a stride of 60.
#[derive(Clone, PartialEq, Eq)]
pub struct EyeImage(Box<[u8]>);

impl EyeImage {
    pub fn from_pixels(pixels: Vec<u8>) -> Result<Self, DatasetError> {
        if pixels.len() != EYE_PIXELS {
            return Err(DatasetError::InvalidParameter(format!(
                "eye image needs {EYE_PIXELS} pixels, got {}",
                pixels.len()
            )));
        }
        Ok(EyeImage(pixels.into_boxed_slice()))
    }

    pub fn from_gray(img: &image::GrayImage) -> Result<Self, DatasetError> {
        let (w, h) = img.dimensions();
        if w as usize != EYE_WIDTH || h as usize != EYE_HEIGHT {
            return Err(DatasetError::BadImageSize {
                width: w as usize,
                height: h as usize,
            });
        }
        Ok(EyeImage(img.as_raw().clone().into_boxed_slice()))
    }

    pub fn filled(level: u8) -> Self {
        EyeImage(vec![level; EYE_PIXELS].into_boxed_slice())
    }

    pub fn pixels(&self) -> &[u8] {
        &self.0
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.0[y * EYE_WIDTH + x]
    }

    /// Left-right mirror image.
    pub fn mirrored(&self) -> Self {
        let mut out = vec![0u8; EYE_PIXELS];
        for (dst, src) in out
            .chunks_exact_mut(EYE_WIDTH)
            .zip(self.0.chunks_exact(EYE_WIDTH))
        {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        EyeImage(out.into_boxed_slice())
    }

    pub fn to_gray(&self) -> image::GrayImage {
        image::GrayImage::from_raw(EYE_WIDTH as u32, EYE_HEIGHT as u32, self.0.to_vec())
            .expect("eye image buffer has fixed size")
    }
}

impl fmt::Debug for EyeImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mean = self.0.iter().map(|&p| p as f64).sum::<f64>() / EYE_PIXELS as f64;
        write!(f, "EyeImage({EYE_WIDTH}x{EYE_HEIGHT}, mean {mean:.1})")
    }
}

/// One training example: eye crop `e`, head angle `h` (yaw, pitch in
/// radians) and gaze target `g` in normalized screen coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSample {
    pub eye_image: EyeImage,
    pub head_angle: [f32; 2],
    pub gaze: [f32; 2],
    pub eye_side: EyeSide,
    pub person_id: PersonId,
}

impl NormalizedSample {
    /// Image and head angle in the left-eye frame: right-eye crops are
    /// mirrored and their yaw negated so one network serves both eyes.
    pub fn canonical(&self) -> (EyeImage, [f32; 2]) {
        match self.eye_side {
            EyeSide::Left => (self.eye_image.clone(), self.head_angle),
            EyeSide::Right => (
                self.eye_image.mirrored(),
                [-self.head_angle[0], self.head_angle[1]],
            ),
        }
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        for (k, g) in self.gaze.iter().enumerate() {
            if !g.is_finite() || !(0.0..=1.0).contains(g) {
                return Err(format!("gaze component {k} = {g} outside [0,1]"));
            }
        }
        for (k, h) in self.head_angle.iter().enumerate() {
            if !h.is_finite() {
                return Err(format!("head angle component {k} is not finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonDataset {
    pub person_id: PersonId,
    pub samples: Vec<NormalizedSample>,
}

impl PersonDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_side(&self, side: EyeSide) -> usize {
        self.samples.iter().filter(|s| s.eye_side == side).count()
    }
}

/// Disjoint, covering index blocks over one prepared person.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSet {
    pub person_id: PersonId,
    pub partitions: Vec<Vec<usize>>,
}

impl PartitionSet {
    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    /// Total number of indices covered.
    pub fn total(&self) -> usize {
        self.partitions.iter().map(Vec::len).sum()
    }

    /// Every index not in partition `k`, ascending.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .partitions
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, p)| p.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Checks that the partitions are equal-sized, disjoint and cover
    /// `0..n` exactly once.
    pub fn check(&self, n: usize, parts: usize) -> Result<(), String> {
        if self.partitions.len() != parts {
            return Err(format!(
                "expected {parts} partitions, got {}",
                self.partitions.len()
            ));
        }
        if !n.is_multiple_of(parts) {
            return Err(format!("{n} samples do not split into {parts} equal parts"));
        }
        let size = n / parts;
        let mut seen = vec![false; n];
        for (k, p) in self.partitions.iter().enumerate() {
            if p.len() != size {
                return Err(format!(
                    "partition {k} has {} indices, expected {size}",
                    p.len()
                ));
            }
            for &i in p {
                if i >= n {
                    return Err(format!("partition {k} index {i} out of range"));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(format!("index {i} appears twice"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_is_involution() {
        let px: Vec<u8> = (0..EYE_PIXELS).map(|i| (i % 251) as u8).collect();
        let img = EyeImage::from_pixels(px).unwrap();
        assert_ne!(img.mirrored(), img);
        assert_eq!(img.mirrored().mirrored(), img);
        assert_eq!(img.mirrored().get(0, 3), img.get(EYE_WIDTH - 1, 3));
    }

    #[test]
    fn wrong_size_rejected() {
        assert!(EyeImage::from_pixels(vec![0; 59 * 36]).is_err());
        let g = image::GrayImage::new(59, 36);
        assert!(matches!(
            EyeImage::from_gray(&g),
            Err(DatasetError::BadImageSize {
                width: 59,
                height: 36
            })
        ));
    }

    #[test]
    fn canonical_right_eye_flips_yaw() {
        let s = NormalizedSample {
            eye_image: EyeImage::filled(9),
            head_angle: [0.2, -0.1],
            gaze: [0.5, 0.5],
            eye_side: EyeSide::Right,
            person_id: PersonId::numbered(0),
        };
        let (_, h) = s.canonical();
        assert_eq!(h, [-0.2, -0.1]);
    }

    #[test]
    fn partition_check_catches_overlap() {
        let ps = PartitionSet {
            person_id: PersonId::numbered(1),
            partitions: vec![vec![0, 1], vec![1, 3]],
        };
        assert!(ps.check(4, 2).is_err());
        let ok = PartitionSet {
            person_id: PersonId::numbered(1),
            partitions: vec![vec![2, 1], vec![0, 3]],
        };
        assert!(ok.check(4, 2).is_ok());
        assert_eq!(ok.complement(0), vec![0, 3]);
    }
}
