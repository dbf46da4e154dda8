//! Batches, forward and backward passes, the Euclidean loss and the
//! finite-difference gradient check.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index;

use super::kernels::{
    bn_relu_backward, bn_relu_eval, bn_relu_recompute, bn_relu_train, conv_backward, conv_forward,
    matmul, matmul_abt, matmul_atb_acc, BnTrace,
};
use super::params::{BnSlot, ConvSlot};
use super::{LossReduction, NetError, NetworkParams, Pooling, HEAD_ANGLE_DIM, OUTPUT_DIM};
use crate::dataset::{NormalizedSample, EYE_HEIGHT, EYE_WIDTH};
use crate::seed;

static NEXT_BATCH: AtomicU64 = AtomicU64::new(1);

/// Images scaled to `[0, 1]`, head angles, gaze targets and per-sample loss
/// weights. Validated on construction; each batch carries a unique id.
#[derive(Clone, Debug)]
pub struct Batch {
    id: u64,
    height: usize,
    width: usize,
    images: Vec<f64>,
    head_angles: Vec<[f64; 2]>,
    targets: Vec<[f64; 2]>,
    weights: Vec<f64>,
}

impl Batch {
    /// `images` is `[B][height][width]`, row-major.
    pub fn new(
        height: usize,
        width: usize,
        images: Vec<f64>,
        head_angles: Vec<[f64; 2]>,
        targets: Vec<[f64; 2]>,
    ) -> Result<Self, NetError> {
        let b = targets.len();
        if b == 0 {
            return Err(NetError::InvalidBatch("batch is empty".into()));
        }
        if head_angles.len() != b || images.len() != b * height * width {
            return Err(NetError::InvalidBatch(format!(
                "{} images of {height}x{width}, {} head angles and {b} targets do not line up",
                images.len() as f64 / (height * width).max(1) as f64,
                head_angles.len()
            )));
        }
        if !images.iter().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite("batch images"));
        }
        if !head_angles.iter().flatten().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite("batch head angles"));
        }
        if !targets.iter().flatten().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite("batch targets"));
        }
        Ok(Batch {
            id: NEXT_BATCH.fetch_add(1, Ordering::Relaxed),
            height,
            width,
            images,
            head_angles,
            targets,
            weights: vec![1.0; b],
        })
    }

    /// Builds a batch from stored samples, flipping right eyes into the
    /// left-eye frame.
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a NormalizedSample>,
    ) -> Result<Self, NetError> {
        let mut images = Vec::new();
        let mut head_angles = Vec::new();
        let mut targets = Vec::new();
        for s in samples {
            let (img, head) = s.canonical();
            images.extend(img.pixels().iter().map(|&p| p as f64 / 255.0));
            head_angles.push([head[0] as f64, head[1] as f64]);
            targets.push([s.gaze[0] as f64, s.gaze[1] as f64]);
        }
        Batch::new(EYE_HEIGHT, EYE_WIDTH, images, head_angles, targets)
    }

    /// Replaces the per-sample loss weights (default 1). Weights must be
    /// finite, non-negative and not all zero.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, NetError> {
        if weights.len() != self.len() {
            return Err(NetError::ShapeMismatch {
                expected: format!("{} weights", self.len()),
                actual: weights.len().to_string(),
            });
        }
        if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) || weights.iter().all(|&w| w == 0.0)
        {
            return Err(NetError::InvalidBatch(
                "weights must be finite, non-negative, not all zero".into(),
            ));
        }
        self.weights = weights;
        self.id = NEXT_BATCH.fetch_add(1, Ordering::Relaxed);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn head_angles(&self) -> &[[f64; 2]] {
        &self.head_angles
    }

    pub fn targets(&self) -> &[[f64; 2]] {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every BN layer; returns a cache for backward.
    Train,
    /// Running statistics; a pure function of parameters and batch.
    Eval,
}

/// Intermediate values kept from a train-mode forward pass. Only the
/// normalized BN inputs are stored; ReLU outputs are rebuilt on demand.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch_id: u64,
    params_version: u64,
    bn: Vec<BnTrace>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    predictions: Vec<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub predictions: Vec<[f64; 2]>,
    pub cache: Option<ForwardCache>,
}

/// Gradient of the loss with respect to every learnable value, laid out
/// like [`NetworkParams::values`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn slice(v: &[f64], offset: usize, len: usize) -> &[f64] {
    &v[offset..][..len]
}

pub fn forward(
    params: &NetworkParams,
    batch: &Batch,
    mode: Mode,
) -> Result<ForwardOutput, NetError> {
    let cfg = params.config();
    if batch.height != cfg.input_height || batch.width != cfg.input_width {
        return Err(NetError::ShapeMismatch {
            expected: format!("{}x{} images", cfg.input_height, cfg.input_width),
            actual: format!("{}x{}", batch.height, batch.width),
        });
    }
    let plan = params.plan();
    let v = params.values();
    let running = params.running_stats();
    let bsz = batch.len();
    let mut traces = Vec::with_capacity(plan.bn_order.len());

    let mut bn = |x: &[f64], s: &BnSlot| {
        let ch = s.channels;
        let mut out = vec![0.0; x.len()];
        let (g, b) = (slice(v, s.gamma, ch), slice(v, s.beta, ch));
        match mode {
            Mode::Train => traces.push(bn_relu_train(x, ch, g, b, &mut out)),
            Mode::Eval => bn_relu_eval(
                x,
                ch,
                g,
                b,
                slice(running, s.mean, ch),
                slice(running, s.var, ch),
                &mut out,
            ),
        }
        out
    };
    let conv = |x: &[f64], c: &ConvSlot| {
        let mut out = vec![0.0; c.shape.cout * bsz * c.shape.ho * c.shape.wo];
        conv_forward(
            x,
            &c.shape,
            bsz,
            slice(v, c.weight, c.shape.weight_len()),
            &mut out,
        );
        out
    };

    let mut a = conv(&batch.images, &plan.stem);
    for blk in &plan.blocks {
        let u = bn(&a, &blk.bn1);
        let y1 = conv(&u, &blk.conv1);
        let act = bn(&y1, &blk.bn2);
        let mut y2 = conv(&act, &blk.conv2);
        let skip = match &blk.shortcut {
            Some(sc) => conv(&u, sc),
            None => a,
        };
        y2.iter_mut().zip(&skip).for_each(|(o, s)| *o += s);
        a = y2;
    }
    let z = bn(&a, &plan.final_bn);

    let ch = plan.final_bn.channels;
    let plane = plan.final_plane;
    let mut pooled = vec![0.0; bsz * plan.pooled];
    for c in 0..ch {
        for b in 0..bsz {
            let src = &z[(c * bsz + b) * plane..][..plane];
            match cfg.pooling {
                Pooling::Average => pooled[b * ch + c] = src.iter().sum::<f64>() / plane as f64,
                Pooling::Flatten => {
                    pooled[b * plan.pooled + c * plane..][..plane].copy_from_slice(src)
                }
            }
        }
    }

    let fc = plan.fc_width;
    let mut hidden = vec![0.0; bsz * fc];
    matmul_abt(
        &pooled,
        slice(v, plan.fc_w, fc * plan.pooled),
        bsz,
        plan.pooled,
        fc,
        &mut hidden,
    );
    let fc_b = slice(v, plan.fc_b, fc);
    for row in hidden.chunks_exact_mut(fc) {
        row.iter_mut()
            .zip(fc_b)
            .for_each(|(h, b)| *h = (*h + b).max(0.0));
    }

    let head_in = fc + HEAD_ANGLE_DIM;
    let head_w = slice(v, plan.head_w, OUTPUT_DIM * head_in);
    let head_b = slice(v, plan.head_b, OUTPUT_DIM);
    let predictions: Vec<[f64; 2]> = (0..bsz)
        .map(|b| {
            let feat = &hidden[b * fc..][..fc];
            let h = batch.head_angles[b];
            let mut out = [0.0; OUTPUT_DIM];
            for (o, val) in out.iter_mut().enumerate() {
                let w = &head_w[o * head_in..][..head_in];
                let dot: f64 = w[..fc].iter().zip(feat).map(|(a, b)| a * b).sum();
                *val = dot + w[fc] * h[0] + w[fc + 1] * h[1] + head_b[o];
            }
            out
        })
        .collect();

    let cache = (mode == Mode::Train).then(|| ForwardCache {
        batch_id: batch.id,
        params_version: params.version(),
        bn: traces,
        pooled,
        hidden,
        predictions: predictions.clone(),
    });
    Ok(ForwardOutput { predictions, cache })
}

fn check_pairs(preds: &[[f64; 2]], targets: &[[f64; 2]], weights: &[f64]) -> Result<(), NetError> {
    if preds.len() != targets.len() || weights.len() != targets.len() {
        return Err(NetError::ShapeMismatch {
            expected: format!("{} predictions and weights", targets.len()),
            actual: format!("{} predictions, {} weights", preds.len(), weights.len()),
        });
    }
    Ok(())
}

/// `Σ ‖pred − target‖₂`, or its mean.
pub fn loss(
    preds: &[[f64; 2]],
    targets: &[[f64; 2]],
    reduction: LossReduction,
) -> Result<f64, NetError> {
    weighted_loss(preds, targets, &vec![1.0; targets.len()], reduction)
}

/// `Σ wᵢ ‖predᵢ − targetᵢ‖₂`; the mean variant divides by `Σ wᵢ`.
pub fn weighted_loss(
    preds: &[[f64; 2]],
    targets: &[[f64; 2]],
    weights: &[f64],
    reduction: LossReduction,
) -> Result<f64, NetError> {
    check_pairs(preds, targets, weights)?;
    let total: f64 = preds
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((p, t), w)| w * (p[0] - t[0]).hypot(p[1] - t[1]))
        .sum();
    Ok(match reduction {
        LossReduction::Sum => total,
        LossReduction::Mean => total / weights.iter().sum::<f64>(),
    })
}

/// Per-sample gradient of the loss w.r.t. the prediction; zero where the
/// prediction hits the target exactly.
fn loss_grad(
    preds: &[[f64; 2]],
    targets: &[[f64; 2]],
    weights: &[f64],
    reduction: LossReduction,
) -> Vec<[f64; 2]> {
    let scale = match reduction {
        LossReduction::Sum => 1.0,
        LossReduction::Mean => 1.0 / weights.iter().sum::<f64>(),
    };
    preds
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((p, t), w)| {
            let d = [p[0] - t[0], p[1] - t[1]];
            let n = d[0].hypot(d[1]);
            if n > 0.0 {
                [scale * w * d[0] / n, scale * w * d[1] / n]
            } else {
                [0.0, 0.0]
            }
        })
        .collect()
}

/// Exact gradients of the batch loss, given the cache of a train-mode
/// forward pass on the same batch with the same parameters.
pub fn backward(
    params: &NetworkParams,
    batch: &Batch,
    cache: &ForwardCache,
    reduction: LossReduction,
) -> Result<Gradients, NetError> {
    if cache.batch_id != batch.id || cache.params_version != params.version() {
        return Err(NetError::StaleCache);
    }
    let plan = params.plan();
    let v = params.values();
    let bsz = batch.len();
    let mut grad = vec![0.0; plan.n_params];
    let dpred = loss_grad(
        &cache.predictions,
        &batch.targets,
        &batch.weights,
        reduction,
    );

    // regression layer over [hidden, head angles]
    let fc = plan.fc_width;
    let head_in = fc + HEAD_ANGLE_DIM;
    let head_w = slice(v, plan.head_w, OUTPUT_DIM * head_in);
    let mut dhidden = vec![0.0; bsz * fc];
    for (b, d) in dpred.iter().enumerate() {
        let feat = &cache.hidden[b * fc..][..fc];
        let h = batch.head_angles[b];
        for (o, &dval) in d.iter().enumerate() {
            let gw = &mut grad[plan.head_w + o * head_in..][..head_in];
            gw[..fc]
                .iter_mut()
                .zip(feat)
                .for_each(|(g, f)| *g += dval * f);
            gw[fc] += dval * h[0];
            gw[fc + 1] += dval * h[1];
            grad[plan.head_b + o] += dval;
            let w = &head_w[o * head_in..][..fc];
            dhidden[b * fc..][..fc]
                .iter_mut()
                .zip(w)
                .for_each(|(dh, w)| *dh += dval * w);
        }
    }
    for (dh, h) in dhidden.iter_mut().zip(&cache.hidden) {
        if *h <= 0.0 {
            *dh = 0.0;
        }
    }

    // fully connected layer
    matmul_atb_acc(
        &dhidden,
        &cache.pooled,
        bsz,
        fc,
        plan.pooled,
        &mut grad[plan.fc_w..][..fc * plan.pooled],
    );
    for row in dhidden.chunks_exact(fc) {
        grad[plan.fc_b..][..fc]
            .iter_mut()
            .zip(row)
            .for_each(|(g, d)| *g += d);
    }
    let mut dpooled = vec![0.0; bsz * plan.pooled];
    matmul(
        &dhidden,
        slice(v, plan.fc_w, fc * plan.pooled),
        bsz,
        fc,
        plan.pooled,
        &mut dpooled,
    );

    // pooling
    let ch = plan.final_bn.channels;
    let plane = plan.final_plane;
    let mut dz = vec![0.0; ch * bsz * plane];
    for c in 0..ch {
        for b in 0..bsz {
            let dst = &mut dz[(c * bsz + b) * plane..][..plane];
            match params.config().pooling {
                Pooling::Average => dst.fill(dpooled[b * ch + c] / plane as f64),
                Pooling::Flatten => {
                    dst.copy_from_slice(&dpooled[b * plan.pooled + c * plane..][..plane])
                }
            }
        }
    }

    let bn_back = |grad: &mut [f64], s: &BnSlot, trace: &BnTrace, dout: &[f64], dx: &mut [f64]| {
        let ch = s.channels;
        debug_assert_eq!(s.beta, s.gamma + ch);
        let (dg, db) = grad[s.gamma..][..2 * ch].split_at_mut(ch);
        bn_relu_backward(
            trace,
            ch,
            slice(v, s.gamma, ch),
            slice(v, s.beta, ch),
            dout,
            dg,
            db,
            dx,
        );
    };
    let relu_of = |s: &BnSlot, trace: &BnTrace| {
        bn_relu_recompute(
            &trace.xhat,
            s.channels,
            slice(v, s.gamma, s.channels),
            slice(v, s.beta, s.channels),
        )
    };
    let conv_back =
        |grad: &mut [f64], c: &ConvSlot, x: &[f64], dout: &[f64], dx: Option<&mut [f64]>| {
            let len = c.shape.weight_len();
            conv_backward(
                x,
                &c.shape,
                bsz,
                slice(v, c.weight, len),
                dout,
                &mut grad[c.weight..][..len],
                dx,
            );
        };

    let final_trace = cache.bn.last().ok_or(NetError::StaleCache)?;
    let mut da = vec![0.0; final_trace.xhat.len()];
    bn_back(&mut grad, &plan.final_bn, final_trace, &dz, &mut da);

    for (i, blk) in plan.blocks.iter().enumerate().rev() {
        let (t1, t2) = (&cache.bn[2 * i], &cache.bn[2 * i + 1]);
        let u = relu_of(&blk.bn1, t1);
        let act = relu_of(&blk.bn2, t2);
        let mut dact = vec![0.0; act.len()];
        conv_back(&mut grad, &blk.conv2, &act, &da, Some(&mut dact));
        let mut dy1 = vec![0.0; act.len()];
        bn_back(&mut grad, &blk.bn2, t2, &dact, &mut dy1);
        let mut du = vec![0.0; u.len()];
        conv_back(&mut grad, &blk.conv1, &u, &dy1, Some(&mut du));
        let mut da_in = match &blk.shortcut {
            Some(sc) => {
                conv_back(&mut grad, sc, &u, &da, Some(&mut du));
                vec![0.0; u.len()]
            }
            None => da,
        };
        bn_back(&mut grad, &blk.bn1, t1, &du, &mut da_in);
        da = da_in;
    }
    conv_back(&mut grad, &plan.stem, &batch.images, &da, None);
    Ok(Gradients(grad))
}

impl NetworkParams {
    /// Blends the batch statistics of a train-mode pass into the running
    /// statistics: `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update_running_stats(
        &mut self,
        cache: &ForwardCache,
        momentum: f64,
    ) -> Result<(), NetError> {
        if cache.params_version != self.version() || cache.bn.len() != self.plan().bn_order.len() {
            return Err(NetError::StaleCache);
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(NetError::InvalidParameter(format!(
                "momentum {momentum} outside [0, 1]"
            )));
        }
        let slots = self.plan().bn_order.clone();
        let running = self.running_mut();
        for (s, trace) in slots.iter().zip(&cache.bn) {
            let ch = s.channels;
            for (r, b) in running[s.mean..][..ch].iter_mut().zip(&trace.mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, b) in running[s.var..][..ch].iter_mut().zip(&trace.var) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
        Ok(())
    }
}

/// ReLU on/off state of every unit in a train-mode forward pass, in forward
/// order.
fn relu_pattern(params: &NetworkParams, cache: &ForwardCache) -> Vec<bool> {
    let v = params.values();
    let mut on = Vec::new();
    for (s, trace) in params.plan().bn_order.iter().zip(&cache.bn) {
        let n = trace.xhat.len() / s.channels;
        let (g, b) = (slice(v, s.gamma, s.channels), slice(v, s.beta, s.channels));
        for (c, xh) in trace.xhat.chunks_exact(n).enumerate() {
            on.extend(xh.iter().map(|x| g[c] * x + b[c] > 0.0));
        }
    }
    on.extend(cache.hidden.iter().map(|h| *h > 0.0));
    on
}

/// Denominator floor of the relative error. Central differences of an O(1)
/// loss carry absolute noise near 1e-11 at ε = 1e-4, so smaller gradients
/// are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Outcome of [`gradient_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    /// Largest relative error over the checked coordinates.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates whose `±ε` step switched a ReLU, where the central
    /// difference does not estimate the derivative.
    pub skipped_at_kinks: usize,
}

/// Compares analytic gradients with central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε` over `coordinates` randomly chosen parameters.
/// Uses train-mode forward passes and the summed loss.
pub fn gradient_check(
    params: &NetworkParams,
    batch: &Batch,
    epsilon: f64,
    coordinates: usize,
    seed: u64,
) -> Result<GradientCheck, NetError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(NetError::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let reduction = LossReduction::Sum;
    let out = forward(params, batch, Mode::Train)?;
    let cache = out.cache.as_ref().expect("train mode caches");
    let analytic = backward(params, batch, cache, reduction)?;
    let base = relu_pattern(params, cache);
    let mut rng = seed::rng(seed, &[seed::stream::GRADCHECK]);
    let n = params.param_count();
    let picks = index::sample(&mut rng, n, coordinates.min(n));
    let mut probe = params.clone();
    let eval = |p: &NetworkParams| -> Result<(f64, bool), NetError> {
        let out = forward(p, batch, Mode::Train)?;
        let smooth = relu_pattern(p, out.cache.as_ref().expect("train mode caches")) == base;
        let loss = weighted_loss(&out.predictions, &batch.targets, &batch.weights, reduction)?;
        Ok((loss, smooth))
    };
    let mut report = GradientCheck {
        max_relative_error: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    for i in picks {
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + epsilon;
        let (plus, smooth_plus) = eval(&probe)?;
        probe.values_mut()[i] = orig - epsilon;
        let (minus, smooth_minus) = eval(&probe)?;
        probe.values_mut()[i] = orig;
        if !(smooth_plus && smooth_minus) {
            report.skipped_at_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.0[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
