//! Multimodal gaze regressor: a small pre-activation residual network over
//! the eye image, with the head angle vector joined after the fully
//! connected layer.
//!
//! ```text
//! image ─ conv3x3 ─ [BN-ReLU-conv-BN-ReLU-conv + shortcut] × stages
//!       ─ BN-ReLU ─ pool ─ FC-ReLU ─ ⊕ head angles ─ linear ─ gaze (x, y)
//! ```
//!
//! Everything runs in `f64` with hand-written reverse-mode gradients.

mod kernels;
mod model;
mod params;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{
    backward, forward, gradient_check, loss, weighted_loss, Batch, ForwardCache, ForwardOutput,
    GradientCheck, Gradients, Mode, GRADCHECK_FLOOR,
};
pub use params::{init_network, NetworkParams, Segment, CHECKPOINT_MAGIC};

/// Size of the head angle vector fed next to the image.
pub const HEAD_ANGLE_DIM: usize = 2;
/// Size of the regressed gaze point.
pub const OUTPUT_DIM: usize = 2;
/// Keep-fraction of the batch-norm running statistics per update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("forward cache does not belong to this batch and parameter state")]
    StaleCache,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How the final feature map is reduced before the fully connected layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Global average over space, one value per channel.
    Average,
    /// Keep every spatial position; preserves where features sit in the
    /// crop.
    #[default]
    Flatten,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Average => "average",
            Pooling::Flatten => "flatten",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "average" | "gap" => Ok(Pooling::Average),
            "flatten" => Ok(Pooling::Flatten),
            other => Err(format!(
                "unknown pooling {other:?} (expected average or flatten)"
            )),
        }
    }
}

/// How per-sample distances are reduced to the training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    Sum,
    Mean,
}

impl LossReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            LossReduction::Sum => "sum",
            LossReduction::Mean => "mean",
        }
    }
}

impl std::str::FromStr for LossReduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(LossReduction::Sum),
            "mean" => Ok(LossReduction::Mean),
            other => Err(format!(
                "unknown loss reduction {other:?} (expected sum or mean)"
            )),
        }
    }
}

/// Architecture hyperparameters. Stage `s > 0` halves the resolution in its
/// first block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub fc_width: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub pooling: Pooling,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stem_channels: 16,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            fc_width: 64,
            input_height: crate::dataset::EYE_HEIGHT,
            input_width: crate::dataset::EYE_WIDTH,
            pooling: Pooling::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.into()));
        if self.stem_channels == 0 || self.fc_width == 0 || self.blocks_per_stage == 0 {
            return bad("stem_channels, fc_width and blocks_per_stage must be positive");
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad("stage_channels must be a non-empty list of positive widths");
        }
        if self.input_height == 0 || self.input_width == 0 {
            return bad("input size must be positive");
        }
        Ok(())
    }

    /// Weights in the bias-free 3x3 stem convolution.
    pub fn stem_param_count(&self) -> usize {
        3 * 3 * self.stem_channels
    }

    /// Spatial size after the last stage.
    pub fn final_spatial(&self) -> (usize, usize) {
        let halve = |n: usize| (n - 1) / 2 + 1;
        (1..self.stage_channels.len()).fold((self.input_height, self.input_width), |(h, w), _| {
            (halve(h), halve(w))
        })
    }
}
