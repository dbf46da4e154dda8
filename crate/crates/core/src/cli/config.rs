//! Flat `key = value` configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Later assignments win, and command-line flags win over the
//! file. Recognized keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `seed` | base seed |
//! | `stem_channels`, `stage_channels` (comma list), `blocks_per_stage`, `fc_width`, `pooling` | network |
//! | `epochs`, `steps_per_epoch`, `optimizer`, `learning_rate`, `momentum`, `beta1`, `beta2`, `adam_epsilon`, `loss_reduction` | training |
//! | `calibration_mode`, `calib_weight`, `finetune_epochs`, `finetune_steps_per_epoch`, `finetune_learning_rate`, `share_baseline` | study |

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationOptions, StudyConfig};
use crate::net::NetworkConfig;
use crate::train::TrainConfig;

/// Resolved settings for one command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationOptions,
    pub share_baseline: bool,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, String> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl Settings {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let (net, tr, cal) = (&mut self.network, &mut self.train, &mut self.calibration);
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "stem_channels" => net.stem_channels = parse(key, v)?,
            "stage_channels" => net.stage_channels = parse_list(key, v)?,
            "blocks_per_stage" => net.blocks_per_stage = parse(key, v)?,
            "fc_width" => net.fc_width = parse(key, v)?,
            "pooling" => net.pooling = parse(key, v)?,
            "epochs" => tr.epochs = parse(key, v)?,
            "steps_per_epoch" => tr.steps_per_epoch = parse(key, v)?,
            "optimizer" => tr.optimizer = parse(key, v)?,
            "learning_rate" => tr.learning_rate = parse(key, v)?,
            "momentum" => tr.momentum = parse(key, v)?,
            "beta1" => tr.beta1 = parse(key, v)?,
            "beta2" => tr.beta2 = parse(key, v)?,
            "adam_epsilon" => tr.adam_epsilon = parse(key, v)?,
            "loss_reduction" => tr.loss_reduction = parse(key, v)?,
            "calibration_mode" => cal.mode = parse(key, v)?,
            "calib_weight" => cal.calib_weight = parse(key, v)?,
            "finetune_epochs" => cal.finetune.epochs = parse(key, v)?,
            "finetune_steps_per_epoch" => cal.finetune.steps_per_epoch = parse(key, v)?,
            "finetune_learning_rate" => cal.finetune.learning_rate = parse(key, v)?,
            "share_baseline" => self.share_baseline = parse(key, v)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Applies every assignment of a config text.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
            self.set(key, value)
                .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        self.apply_text(&text)
            .map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Applies a `key=value` override given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), String> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| format!("--set expects key=value, got {assignment:?}"))?;
        self.set(key, value)
    }

    /// The settings as a config text that [`Settings::apply_text`] reads
    /// back to the same values.
    pub fn to_text(&self) -> String {
        let (net, tr, cal) = (&self.network, &self.train, &self.calibration);
        let stages: Vec<String> = net.stage_channels.iter().map(|c| c.to_string()).collect();
        let lines = [
            ("seed", self.seed.to_string()),
            ("stem_channels", net.stem_channels.to_string()),
            ("stage_channels", stages.join(",")),
            ("blocks_per_stage", net.blocks_per_stage.to_string()),
            ("fc_width", net.fc_width.to_string()),
            ("pooling", net.pooling.as_str().into()),
            ("epochs", tr.epochs.to_string()),
            ("steps_per_epoch", tr.steps_per_epoch.to_string()),
            ("optimizer", tr.optimizer.as_str().into()),
            ("learning_rate", tr.learning_rate.to_string()),
            ("momentum", tr.momentum.to_string()),
            ("beta1", tr.beta1.to_string()),
            ("beta2", tr.beta2.to_string()),
            ("adam_epsilon", tr.adam_epsilon.to_string()),
            ("loss_reduction", tr.loss_reduction.as_str().into()),
            ("calibration_mode", cal.mode.as_str().into()),
            ("calib_weight", cal.calib_weight.to_string()),
            ("finetune_epochs", cal.finetune.epochs.to_string()),
            (
                "finetune_steps_per_epoch",
                cal.finetune.steps_per_epoch.to_string(),
            ),
            (
                "finetune_learning_rate",
                cal.finetune.learning_rate.to_string(),
            ),
            ("share_baseline", self.share_baseline.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn study_config(&self) -> StudyConfig {
        StudyConfig {
            seed: self.seed,
            network: self.network.clone(),
            train: self.train.clone(),
            calibration: self.calibration.clone(),
            share_baseline: self.share_baseline,
        }
    }

    pub fn from_study_config(cfg: &StudyConfig) -> Self {
        Settings {
            seed: cfg.seed,
            network: cfg.network.clone(),
            train: cfg.train.clone(),
            calibration: cfg.calibration.clone(),
            share_baseline: cfg.share_baseline,
        }
    }
}
