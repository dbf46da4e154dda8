//! Optimization loop and error measurement.
//!
//! An epoch shuffles the training set with a per-epoch seeded permutation
//! and splits it into `steps_per_epoch` near-equal batches of at most
//! `ceil(N / steps_per_epoch)` samples. Each step runs a train-mode forward
//! and backward pass, blends the batch statistics into the BN running
//! statistics and applies one optimizer update.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::NormalizedSample;
use crate::net::{self, Batch, LossReduction, Mode, NetError, NetworkParams, BN_MOMENTUM};
use crate::seed;

/// Samples per eval-mode forward pass.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no samples to {0}")]
    EmptyData(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("writing training record: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            other => Err(format!(
                "unknown optimizer {other:?} (expected adam or sgd_momentum)"
            )),
        }
    }
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

/// Optimizer and schedule settings. `momentum` applies to SGD; `beta1`,
/// `beta2` and `adam_epsilon` to Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub loss_reduction: LossReduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            steps_per_epoch: 12,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            loss_reduction: LossReduction::Sum,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate 0 is accepted and turns training into a no-op.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("epochs and steps_per_epoch must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive".into());
        }
        Ok(())
    }

    /// Largest batch for a training set of `n` samples.
    pub fn batch_size(&self, n: usize) -> usize {
        n.div_ceil(self.steps_per_epoch)
    }
}

/// Per-epoch mean per-sample training distance and, when a validation set
/// was supplied, the validation mean error.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub loss: Vec<f64>,
    pub val_error: Option<Vec<f64>>,
}

impl TrainRecord {
    pub fn epochs(&self) -> usize {
        self.loss.len()
    }

    /// CSV with header `epoch,loss` or `epoch,loss,val_error`; epochs count
    /// from 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        let to_io = |e: csv::Error| TrainError::Io(e.into());
        match &self.val_error {
            Some(val) => {
                w.write_record(["epoch", "loss", "val_error"])
                    .map_err(to_io)?;
                for (i, (l, v)) in self.loss.iter().zip(val).enumerate() {
                    w.write_record([(i + 1).to_string(), l.to_string(), v.to_string()])
                        .map_err(to_io)?;
                }
            }
            None => {
                w.write_record(["epoch", "loss"]).map_err(to_io)?;
                for (i, l) in self.loss.iter().enumerate() {
                    w.write_record([(i + 1).to_string(), l.to_string()])
                        .map_err(to_io)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Optional extras for [`train_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Per-sample loss weights aligned with the training data.
    pub weights: Option<&'a [f64]>,
    /// Evaluated after every epoch; never used for stopping.
    pub validation: Option<&'a [&'a NormalizedSample]>,
}

enum Optimizer {
    Sgd { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::SgdMomentum => Optimizer::Sgd {
                velocity: vec![0.0; n],
            },
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    fn step(&mut self, cfg: &TrainConfig, params: &mut [f64], grad: &[f64]) {
        let lr = cfg.learning_rate;
        match self {
            Optimizer::Sgd { velocity } => {
                for ((p, g), vel) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
                    *vel = cfg.momentum * *vel + g;
                    *p -= lr * *vel;
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - cfg.beta1.powi(*t);
                let c2 = 1.0 - cfg.beta2.powi(*t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
                }
            }
        }
    }
}

/// Contiguous `(start, len)` batches: `steps` near-equal parts of `n`.
fn batch_bounds(n: usize, steps: usize) -> Vec<(usize, usize)> {
    let steps = steps.min(n);
    let (base, extra) = (n / steps, n % steps);
    let mut start = 0;
    (0..steps)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let b = (start, len);
            start += len;
            b
        })
        .collect()
}

/// Trains `params` on `data` and returns the updated parameters with the
/// per-epoch record.
pub fn train(
    params: NetworkParams,
    data: &[&NormalizedSample],
    config: &TrainConfig,
) -> Result<(NetworkParams, TrainRecord), TrainError> {
    train_with(params, data, config, TrainOptions::default())
}

pub fn train_with(
    mut params: NetworkParams,
    data: &[&NormalizedSample],
    config: &TrainConfig,
    options: TrainOptions<'_>,
) -> Result<(NetworkParams, TrainRecord), TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData("train on"));
    }
    if let Some(w) = options.weights {
        if w.len() != data.len() {
            return Err(TrainError::InvalidConfig(format!(
                "{} weights for {} samples",
                w.len(),
                data.len()
            )));
        }
    }
    params.check()?;
    let frozen = config.learning_rate == 0.0;
    let mut opt = Optimizer::new(config.optimizer, params.param_count());
    let bounds = batch_bounds(data.len(), config.steps_per_epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut record = TrainRecord {
        loss: Vec::with_capacity(config.epochs),
        val_error: options
            .validation
            .map(|_| Vec::with_capacity(config.epochs)),
    };

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(
            config.seed,
            &[seed::stream::SHUFFLE, epoch as u64],
        ));
        let mut distance_sum = 0.0;
        for (step, &(start, len)) in bounds.iter().enumerate() {
            // sorted so a batch's content, not the draw order, fixes the
            // floating-point summation order
            let mut idx = order[start..start + len].to_vec();
            idx.sort_unstable();
            let mut batch = Batch::from_samples(idx.iter().map(|&i| data[i]))?;
            if let Some(w) = options.weights {
                batch = batch.with_weights(idx.iter().map(|&i| w[i]).collect())?;
            }
            let out = net::forward(&params, &batch, Mode::Train)?;
            let distances = net::loss(&out.predictions, batch.targets(), LossReduction::Sum)?;
            let diverged = |loss| TrainError::Diverged { epoch, step, loss };
            if !distances.is_finite() {
                return Err(diverged(distances));
            }
            distance_sum += distances;
            if frozen {
                continue;
            }
            let cache = out.cache.as_ref().expect("train mode caches");
            let grad = net::backward(&params, &batch, cache, config.loss_reduction)?;
            if !grad.values().iter().all(|g| g.is_finite()) {
                return Err(diverged(f64::NAN));
            }
            params.update_running_stats(cache, BN_MOMENTUM)?;
            opt.step(config, params.values_mut(), grad.values());
        }
        let epoch_loss = distance_sum / data.len() as f64;
        record.loss.push(epoch_loss);
        if let (Some(val), Some(errs)) = (options.validation, record.val_error.as_mut()) {
            errs.push(evaluate(&params, val)?.mean);
        }
        log::debug!(
            "epoch {}/{}: loss {epoch_loss:.6}",
            epoch + 1,
            config.epochs
        );
    }
    if params.check().is_err() {
        return Err(TrainError::Diverged {
            epoch: config.epochs - 1,
            step: bounds.len() - 1,
            loss: f64::NAN,
        });
    }
    Ok((params, record))
}

/// Mean, population standard deviation and per-sample Euclidean errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub per_sample: Vec<f64>,
}

impl EvalResult {
    pub fn from_errors(per_sample: Vec<f64>) -> Result<Self, TrainError> {
        if per_sample.is_empty() {
            return Err(TrainError::EmptyData("evaluate"));
        }
        let n = per_sample.len() as f64;
        let mean = per_sample.iter().sum::<f64>() / n;
        let var = per_sample
            .iter()
            .map(|e| (e - mean) * (e - mean))
            .sum::<f64>()
            / n;
        Ok(EvalResult {
            mean,
            std: var.sqrt(),
            per_sample,
        })
    }
}

/// Eval-mode predictions for `data`, in order.
pub fn predict(
    params: &NetworkParams,
    data: &[&NormalizedSample],
) -> Result<Vec<[f64; 2]>, TrainError> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let batch = Batch::from_samples(chunk.iter().copied())?;
        out.extend(net::forward(params, &batch, Mode::Eval)?.predictions);
    }
    Ok(out)
}

/// Per-sample error `‖g_pred − g_true‖₂` in normalized screen units.
pub fn evaluate(
    params: &NetworkParams,
    data: &[&NormalizedSample],
) -> Result<EvalResult, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData("evaluate"));
    }
    let preds = predict(params, data)?;
    let errors = preds
        .iter()
        .zip(data)
        .map(|(p, s)| (p[0] - s.gaze[0] as f64).hypot(p[1] - s.gaze[1] as f64))
        .collect();
    EvalResult::from_errors(errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_person, PersonId, SyntheticPersonSpec};
    use crate::net::{init_network, NetworkConfig, Pooling};
    use rand::Rng;

    fn small_net() -> NetworkConfig {
        NetworkConfig {
            stem_channels: 2,
            stage_channels: vec![2, 4],
            blocks_per_stage: 1,
            fc_width: 8,
            pooling: Pooling::Flatten,
            ..NetworkConfig::default()
        }
    }

    fn synth(n: usize, seed: u64) -> Vec<NormalizedSample> {
        let spec = SyntheticPersonSpec::new(PersonId::new("p00"), [0.0, 0.0], 0.0, n);
        generate_synthetic_person(&spec, seed).unwrap().samples
    }

    fn refs(v: &[NormalizedSample]) -> Vec<&NormalizedSample> {
        v.iter().collect()
    }

    #[test]
    fn batch_bounds_cover_evenly() {
        assert_eq!(batch_bounds(25, 12).iter().map(|b| b.1).max(), Some(3));
        assert_eq!(batch_bounds(25, 12).len(), 12);
        assert_eq!(
            batch_bounds(24, 12).iter().map(|b| b.1).collect::<Vec<_>>(),
            vec![2; 12]
        );
        assert_eq!(batch_bounds(5, 12).len(), 5);
        let b = batch_bounds(3000, 12);
        assert_eq!(b.last().map(|(s, l)| s + l), Some(3000));
        assert_eq!(TrainConfig::default().batch_size(42300), 3525);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let data = synth(96, 1);
        let cfg = TrainConfig {
            epochs: 6,
            steps_per_epoch: 4,
            learning_rate: 3e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let p0 = init_network(&small_net(), 3).unwrap();
        let (p1, rec) = train(p0.clone(), &refs(&data), &cfg).unwrap();
        assert_eq!(rec.epochs(), 6);
        assert!(rec.loss[5] < rec.loss[0], "{:?}", rec.loss);
        let (p2, rec2) = train(p0, &refs(&data), &cfg).unwrap();
        assert_eq!(rec, rec2);
        assert!(p1
            .values()
            .iter()
            .zip(p2.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(p1
            .running_stats()
            .iter()
            .zip(p2.running_stats())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn sgd_momentum_also_learns() {
        let data = synth(64, 2);
        let cfg = TrainConfig {
            epochs: 5,
            steps_per_epoch: 4,
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let (_, rec) = train(init_network(&small_net(), 3).unwrap(), &refs(&data), &cfg).unwrap();
        assert!(rec.loss[4] < rec.loss[0], "{:?}", rec.loss);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = synth(40, 3);
        let cfg = TrainConfig {
            epochs: 3,
            steps_per_epoch: 1,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let p0 = init_network(&small_net(), 4).unwrap();
        let before = evaluate(&p0, &refs(&data)).unwrap();
        let (p1, rec) = train(p0.clone(), &refs(&data), &cfg).unwrap();
        assert_eq!(p0, p1);
        assert!(rec
            .loss
            .iter()
            .all(|l| l.to_bits() == rec.loss[0].to_bits()));
        assert_eq!(evaluate(&p1, &refs(&data)).unwrap(), before);
    }

    #[test]
    fn divergence_reports_position() {
        let data = synth(48, 4);
        let cfg = TrainConfig {
            epochs: 30,
            steps_per_epoch: 4,
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: 1e200,
            ..TrainConfig::default()
        };
        match train(init_network(&small_net(), 4).unwrap(), &refs(&data), &cfg) {
            Err(TrainError::Diverged { epoch, step, .. }) => assert!(epoch < 30 && step < 4),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_inputs_rejected() {
        let p = init_network(&small_net(), 1).unwrap();
        assert!(matches!(evaluate(&p, &[]), Err(TrainError::EmptyData(_))));
        assert!(matches!(
            train(p, &[], &TrainConfig::default()),
            Err(TrainError::EmptyData(_))
        ));
    }

    /// A network whose only non-zero values are the regression bias.
    fn constant_net(at: [f64; 2]) -> NetworkParams {
        let mut p = init_network(&small_net(), 1).unwrap();
        p.values_mut().fill(0.0);
        p.segment_mut("head.bias").unwrap().copy_from_slice(&at);
        p
    }

    #[test]
    fn constant_predictor_errors() {
        let mut data = synth(2, 6);
        data[0].gaze = [0.5, 0.5];
        data[1].gaze = [0.5, 0.9];
        let r = evaluate(&constant_net([0.5, 0.5]), &refs(&data)).unwrap();
        assert!(r.per_sample[0].abs() < 1e-12);
        assert!((r.per_sample[1] - 0.4).abs() < 1e-7);
        assert!((r.mean - 0.2).abs() < 1e-7);
        assert!((r.std - 0.2).abs() < 1e-7);
    }

    #[test]
    fn exact_predictions_score_zero() {
        let mut data = synth(5, 7);
        data.iter_mut().for_each(|s| s.gaze = [0.25, 0.75]);
        let r = evaluate(&constant_net([0.25, 0.75]), &refs(&data)).unwrap();
        assert_eq!((r.mean, r.std), (0.0, 0.0));
    }

    #[test]
    fn fresh_network_error_in_sanity_band() {
        let data = synth(400, 8);
        let p = init_network(&NetworkConfig::default(), 9).unwrap();
        let preds = predict(&p, &refs(&data)).unwrap();
        let r = evaluate(&p, &refs(&data)).unwrap();
        // Monte-Carlo distance from the mean prediction to uniform targets
        let c = [
            preds.iter().map(|p| p[0]).sum::<f64>() / preds.len() as f64,
            preds.iter().map(|p| p[1]).sum::<f64>() / preds.len() as f64,
        ];
        let mut rng = seed::rng(1, &[42]);
        let mc = (0..20000)
            .map(|_| (c[0] - rng.random::<f64>()).hypot(c[1] - rng.random::<f64>()))
            .sum::<f64>()
            / 20000.0;
        assert!(
            r.mean > 0.2 && r.mean < 0.8,
            "mean {} (monte carlo {mc})",
            r.mean
        );
        assert!(
            (r.mean - mc).abs() < 0.05,
            "mean {} vs monte carlo {mc}",
            r.mean
        );
        assert!(r
            .per_sample
            .iter()
            .all(|&e| (0.0..=2f64.sqrt() + 2.0).contains(&e)));
    }

    #[test]
    fn validation_curve_and_csv() {
        let data = synth(32, 9);
        let val = synth(8, 10);
        let cfg = TrainConfig {
            epochs: 2,
            steps_per_epoch: 2,
            ..TrainConfig::default()
        };
        let opts = TrainOptions {
            weights: None,
            validation: Some(&refs(&val)),
        };
        let (_, rec) = train_with(
            init_network(&small_net(), 1).unwrap(),
            &refs(&data),
            &cfg,
            opts,
        )
        .unwrap();
        assert_eq!(rec.val_error.as_ref().map(Vec::len), Some(2));
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,loss,val_error\n1,"));
        assert_eq!(text.lines().count(), 3);
        let plain = TrainRecord {
            loss: vec![0.5],
            val_error: None,
        };
        let mut buf = Vec::new();
        plain.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,loss\n1,0.5\n");
    }

    #[test]
    fn weights_must_align() {
        let data = synth(8, 11);
        let w = vec![1.0; 3];
        let opts = TrainOptions {
            weights: Some(&w),
            validation: None,
        };
        let r = train_with(
            init_network(&small_net(), 1).unwrap(),
            &refs(&data),
            &TrainConfig::default(),
            opts,
        );
        assert!(matches!(r, Err(TrainError::InvalidConfig(_))));
    }
}
