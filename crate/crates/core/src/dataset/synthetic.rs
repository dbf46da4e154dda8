//! Synthetic persons with known ground truth.
//!
//! Each sample is rendered from a latent gaze point `u` and a head angle `h`:
//!
//! * `u` is uniform in `[0.1, 0.9]²`, `h` uniform in `[-0.3, 0.3]²` radians.
//! * In the left-eye frame the eye is a bright background with a concentric
//!   iris and pupil disk centred at
//!   `cx = 30 + 40 (u_x - 0.5) + 20 yaw`, `cy = 18 + 20 (u_y - 0.5) - 10 pitch`,
//!   with one pixel of linear anti-aliasing at each disk edge.
//! * The gaze label is `clamp(u + bias + N(0, sigma²), 0, 1)`.
//! * Samples alternate left/right; right-eye samples are stored mirrored with
//!   yaw negated, which is exactly what [`NormalizedSample::canonical`] undoes.
//!
//! Per-person [`EyeAppearance`] lets a network tell persons apart, which is
//! what calibration data can exploit.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    DatasetError, EyeImage, EyeSide, NormalizedSample, PersonDataset, PersonId, EYE_HEIGHT,
    EYE_WIDTH,
};
use crate::seed::{self, stream};

/// Range of each latent gaze component.
pub const LATENT_RANGE: (f64, f64) = (0.1, 0.9);
/// Half-width of the head-angle range, radians.
pub const HEAD_RANGE: f64 = 0.3;

const CENTER: [f64; 2] = [30.0, 18.0];
const GAIN_U: [f64; 2] = [40.0, 20.0];
const GAIN_H: [f64; 2] = [20.0, -10.0];

/// Horizontal extent of every reachable pupil centre.
pub const ADMISSIBLE_X: (f64, f64) = (
    CENTER[0] - GAIN_U[0] * 0.4 - GAIN_H[0] * HEAD_RANGE,
    CENTER[0] + GAIN_U[0] * 0.4 + GAIN_H[0] * HEAD_RANGE,
);
/// Vertical extent of every reachable pupil centre.
pub const ADMISSIBLE_Y: (f64, f64) = (
    CENTER[1] - GAIN_U[1] * 0.4 + GAIN_H[1] * HEAD_RANGE,
    CENTER[1] + GAIN_U[1] * 0.4 - GAIN_H[1] * HEAD_RANGE,
);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeAppearance {
    pub background: u8,
    pub iris: u8,
    pub pupil: u8,
    pub iris_radius: f64,
    pub pupil_radius: f64,
}

impl Default for EyeAppearance {
    fn default() -> Self {
        EyeAppearance {
            background: 210,
            iris: 120,
            pupil: 30,
            iris_radius: 9.0,
            pupil_radius: 4.0,
        }
    }
}

impl EyeAppearance {
    /// A random but plausible appearance, used to give synthetic persons
    /// distinguishable eyes.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let pupil_radius = rng.random_range(3.0..5.5);
        EyeAppearance {
            background: rng.random_range(170..=235),
            iris: rng.random_range(90..=150),
            pupil: rng.random_range(10..=50),
            iris_radius: pupil_radius + rng.random_range(3.5..6.5),
            pupil_radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPersonSpec {
    pub person_id: PersonId,
    pub bias: [f64; 2],
    pub noise_sigma: f64,
    pub sample_count: usize,
    #[serde(default)]
    pub appearance: EyeAppearance,
}

impl SyntheticPersonSpec {
    pub fn new(person_id: PersonId, bias: [f64; 2], noise_sigma: f64, sample_count: usize) -> Self {
        SyntheticPersonSpec {
            person_id,
            bias,
            noise_sigma,
            sample_count,
            appearance: EyeAppearance::default(),
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DatasetError::InvalidParameter(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.sample_count == 0 {
            return Err(DatasetError::InvalidParameter(
                "sample_count must be >= 1".into(),
            ));
        }
        if !self.bias.iter().all(|b| b.is_finite()) {
            return Err(DatasetError::InvalidParameter("bias must be finite".into()));
        }
        let a = &self.appearance;
        if !(a.pupil_radius > 0.0 && a.iris_radius >= a.pupil_radius) {
            return Err(DatasetError::InvalidParameter(
                "appearance needs 0 < pupil_radius <= iris_radius".into(),
            ));
        }
        Ok(())
    }
}

/// A generated sample together with the latents it was rendered from.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub sample: NormalizedSample,
    /// Latent gaze `u` before bias and noise.
    pub latent: [f64; 2],
    /// Head angle in the left-eye frame.
    pub head: [f64; 2],
    /// Pupil centre in the left-eye frame, pixels.
    pub pupil_center: [f64; 2],
}

/// Pupil centre in the left-eye frame for latent gaze `u` and head angle `h`.
pub fn pupil_center(u: [f64; 2], h: [f64; 2]) -> [f64; 2] {
    [
        CENTER[0] + GAIN_U[0] * (u[0] - 0.5) + GAIN_H[0] * h[0],
        CENTER[1] + GAIN_U[1] * (u[1] - 0.5) + GAIN_H[1] * h[1],
    ]
}

/// Renders the left-eye-frame crop with the pupil at `center`.
pub fn render_eye(center: [f64; 2], look: &EyeAppearance) -> EyeImage {
    let mut px = Vec::with_capacity(EYE_WIDTH * EYE_HEIGHT);
    let bg = look.background as f64;
    let iris = look.iris as f64;
    let pupil = look.pupil as f64;
    for y in 0..EYE_HEIGHT {
        for x in 0..EYE_WIDTH {
            let d = (x as f64 - center[0]).hypot(y as f64 - center[1]);
            let in_iris = (look.iris_radius + 0.5 - d).clamp(0.0, 1.0);
            let in_pupil = (look.pupil_radius + 0.5 - d).clamp(0.0, 1.0);
            let v = bg + (iris - bg) * in_iris + (pupil - iris) * in_pupil;
            px.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    EyeImage::from_pixels(px).expect("rendered buffer has fixed size")
}

/// Generates `spec.sample_count` samples with their latents.
pub fn generate_synthetic_samples(
    spec: &SyntheticPersonSpec,
    seed: u64,
) -> Result<Vec<SyntheticSample>, DatasetError> {
    spec.validate()?;
    let mut rng = seed::rng(seed, &[stream::SYNTH, seed::label(spec.person_id.as_str())]);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| DatasetError::InvalidParameter(e.to_string()))?;
    let (lo, hi) = LATENT_RANGE;
    let out = (0..spec.sample_count)
        .map(|i| {
            let latent = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
            let head = [
                rng.random_range(-HEAD_RANGE..=HEAD_RANGE),
                rng.random_range(-HEAD_RANGE..=HEAD_RANGE),
            ];
            let eps = [noise.sample(&mut rng), noise.sample(&mut rng)];
            let gaze = [0, 1].map(|k| (latent[k] + spec.bias[k] + eps[k]).clamp(0.0, 1.0) as f32);
            let center = pupil_center(latent, head);
            let canonical = render_eye(center, &spec.appearance);
            let (eye_side, eye_image, head_angle) = if i % 2 == 0 {
                (EyeSide::Left, canonical, [head[0] as f32, head[1] as f32])
            } else {
                (
                    EyeSide::Right,
                    canonical.mirrored(),
                    [-head[0] as f32, head[1] as f32],
                )
            };
            SyntheticSample {
                sample: NormalizedSample {
                    eye_image,
                    head_angle,
                    gaze,
                    eye_side,
                    person_id: spec.person_id.clone(),
                },
                latent,
                head,
                pupil_center: center,
            }
        })
        .collect();
    Ok(out)
}

pub fn generate_synthetic_person(
    spec: &SyntheticPersonSpec,
    seed: u64,
) -> Result<PersonDataset, DatasetError> {
    Ok(PersonDataset {
        person_id: spec.person_id.clone(),
        samples: generate_synthetic_samples(spec, seed)?
            .into_iter()
            .map(|s| s.sample)
            .collect(),
    })
}
