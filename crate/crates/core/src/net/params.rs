//! Flat parameter storage, initialization and the checkpoint format.
//!
//! Learnable values live in one `Vec<f64>` split into named segments in a
//! fixed order; batch-norm running statistics live in a second vector.
//!
//! Checkpoint (little-endian):
//!
//! ```text
//! "GZNT"                     magic
//! u32 version (1)
//! u32 stem_channels
//! u32 stage count, then one u32 width per stage
//! u32 blocks_per_stage, u32 fc_width, u32 input_height, u32 input_width
//! u8  pooling (0 average, 1 flatten)
//! u64 n, then n f64 learnable values in segment order
//! u64 m, then m f64 running statistics (per BN layer: means, then variances)
//! ```

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::kernels::ConvShape;
use super::{NetError, NetworkConfig, Pooling, HEAD_ANGLE_DIM, OUTPUT_DIM};
use crate::seed;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GZNT";
const CHECKPOINT_VERSION: u32 = 1;

/// Scale of the regression layer's initial weights relative to a unit-gain
/// init; keeps a fresh network's output close to its (zero) bias.
const REGRESSION_GAIN: f64 = 0.01;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// He-normal with the given fan-in.
    HeNormal(usize),
    /// Normal with `REGRESSION_GAIN / sqrt(fan_in)` deviation.
    SmallNormal(usize),
    Zero,
    One,
}

/// A named slice of the flat learnable vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvSlot {
    pub weight: usize,
    pub shape: ConvShape,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BnSlot {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockSlot {
    pub bn1: BnSlot,
    pub conv1: ConvSlot,
    pub bn2: BnSlot,
    pub conv2: ConvSlot,
    /// 1x1 projection of the pre-activated input when width or stride change.
    pub shortcut: Option<ConvSlot>,
}

/// Offsets and shapes of every layer for one config.
#[derive(Clone, Debug)]
pub(crate) struct Plan {
    pub stem: ConvSlot,
    pub blocks: Vec<BlockSlot>,
    pub final_bn: BnSlot,
    pub final_plane: usize,
    pub pooled: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub fc_width: usize,
    pub n_params: usize,
    pub n_running: usize,
    pub segments: Vec<Segment>,
    /// Batch-norm layers in forward order.
    pub bn_order: Vec<BnSlot>,
}

struct PlanBuilder {
    segments: Vec<Segment>,
    n_params: usize,
    n_running: usize,
    bn_order: Vec<BnSlot>,
}

impl PlanBuilder {
    fn push(&mut self, name: String, len: usize, init: Init) -> usize {
        let offset = self.n_params;
        self.segments.push(Segment {
            name,
            offset,
            len,
            init,
        });
        self.n_params += len;
        offset
    }

    fn conv(&mut self, name: String, shape: ConvShape) -> ConvSlot {
        let fan_in = shape.cin * shape.kernel * shape.kernel;
        ConvSlot {
            weight: self.push(name, shape.weight_len(), Init::HeNormal(fan_in)),
            shape,
        }
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnSlot {
        let gamma = self.push(format!("{name}.gamma"), channels, Init::One);
        let beta = self.push(format!("{name}.beta"), channels, Init::Zero);
        let mean = self.n_running;
        self.n_running += 2 * channels;
        let slot = BnSlot {
            gamma,
            beta,
            mean,
            var: mean + channels,
            channels,
        };
        self.bn_order.push(slot);
        slot
    }
}

impl Plan {
    pub fn build(cfg: &NetworkConfig) -> Plan {
        let mut b = PlanBuilder {
            segments: Vec::new(),
            n_params: 0,
            n_running: 0,
            bn_order: Vec::new(),
        };
        let (mut h, mut w) = (cfg.input_height, cfg.input_width);
        let stem = b.conv(
            "stem.weight".into(),
            ConvShape::new(1, cfg.stem_channels, 3, 1, 1, h, w),
        );
        let mut ch = cfg.stem_channels;
        let mut blocks = Vec::new();
        for (s, &out) in cfg.stage_channels.iter().enumerate() {
            for k in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && k == 0 { 2 } else { 1 };
                let p = format!("s{s}.b{k}");
                let bn1 = b.bn(&format!("{p}.bn1"), ch);
                let conv1 = b.conv(
                    format!("{p}.conv1.weight"),
                    ConvShape::new(ch, out, 3, stride, 1, h, w),
                );
                let (ho, wo) = (conv1.shape.ho, conv1.shape.wo);
                let bn2 = b.bn(&format!("{p}.bn2"), out);
                let conv2 = b.conv(
                    format!("{p}.conv2.weight"),
                    ConvShape::new(out, out, 3, 1, 1, ho, wo),
                );
                let shortcut = (stride != 1 || ch != out).then(|| {
                    b.conv(
                        format!("{p}.shortcut.weight"),
                        ConvShape::new(ch, out, 1, stride, 0, h, w),
                    )
                });
                blocks.push(BlockSlot {
                    bn1,
                    conv1,
                    bn2,
                    conv2,
                    shortcut,
                });
                (h, w, ch) = (ho, wo, out);
            }
        }
        let final_bn = b.bn("final_bn", ch);
        let final_plane = h * w;
        let pooled = match cfg.pooling {
            Pooling::Average => ch,
            Pooling::Flatten => ch * final_plane,
        };
        let fc_w = b.push(
            "fc.weight".into(),
            cfg.fc_width * pooled,
            Init::HeNormal(pooled),
        );
        let fc_b = b.push("fc.bias".into(), cfg.fc_width, Init::Zero);
        let head_in = cfg.fc_width + HEAD_ANGLE_DIM;
        let head_w = b.push(
            "head.weight".into(),
            OUTPUT_DIM * head_in,
            Init::SmallNormal(head_in),
        );
        let head_b = b.push("head.bias".into(), OUTPUT_DIM, Init::Zero);
        Plan {
            stem,
            blocks,
            final_bn,
            final_plane,
            pooled,
            fc_w,
            fc_b,
            head_w,
            head_b,
            fc_width: cfg.fc_width,
            n_params: b.n_params,
            n_running: b.n_running,
            segments: b.segments,
            bn_order: b.bn_order,
        }
    }
}

/// Learnable values plus batch-norm running statistics for one config.
///
/// Every mutation of the learnable values draws a fresh version number, so
/// a forward cache can tell whether it still matches the parameters.
#[derive(Clone)]
pub struct NetworkParams {
    config: NetworkConfig,
    plan: Arc<Plan>,
    values: Vec<f64>,
    running: Vec<f64>,
    version: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values && self.running == other.running
    }
}

impl fmt::Debug for NetworkParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NetworkParams")
            .field("config", &self.config)
            .field("params", &self.values.len())
            .field("running", &self.running.len())
            .finish()
    }
}

/// He-normal conv/FC weights, a small-gain normal regression layer, zero
/// biases and shifts, unit scales, running mean 0 and variance 1.
/// Deterministic per seed.
pub fn init_network(config: &NetworkConfig, seed: u64) -> Result<NetworkParams, NetError> {
    config.validate()?;
    let plan = Plan::build(config);
    let mut rng = seed::rng(seed, &[seed::stream::INIT]);
    let mut values = vec![0.0; plan.n_params];
    for seg in &plan.segments {
        let dst = &mut values[seg.offset..][..seg.len];
        match seg.init {
            Init::HeNormal(fan_in) | Init::SmallNormal(fan_in) => {
                let std = match seg.init {
                    Init::HeNormal(_) => (2.0 / fan_in as f64).sqrt(),
                    _ => REGRESSION_GAIN / (fan_in as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                dst.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
            Init::Zero => dst.fill(0.0),
            Init::One => dst.fill(1.0),
        }
    }
    let mut running = vec![0.0; plan.n_running];
    for bn in &plan.bn_order {
        running[bn.var..][..bn.channels].fill(1.0);
    }
    Ok(NetworkParams {
        config: config.clone(),
        plan: Arc::new(plan),
        values,
        running,
        version: next_version(),
    })
}

impl NetworkParams {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub(crate) fn plan(&self) -> &Plan {
        &self.plan
    }

    pub(crate) fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable learnable values; invalidates outstanding forward caches.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version = next_version();
        &mut self.values
    }

    pub fn running_stats(&self) -> &[f64] {
        &self.running
    }

    pub fn segments(&self) -> &[Segment] {
        &self.plan.segments
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.plan
            .segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..][..s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let seg = self.plan.segments.iter().find(|s| s.name == name)?.clone();
        Some(&mut self.values_mut()[seg.offset..][..seg.len])
    }

    pub(crate) fn running_mut(&mut self) -> &mut [f64] {
        &mut self.running
    }

    /// All values finite and every running variance positive.
    pub fn check(&self) -> Result<(), NetError> {
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite("parameters"));
        }
        if !self.running.iter().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite("running statistics"));
        }
        for bn in &self.plan.bn_order {
            if self.running[bn.var..][..bn.channels]
                .iter()
                .any(|&v| v <= 0.0)
            {
                return Err(NetError::InvalidParameter(
                    "running variance must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 8 * (self.values.len() + self.running.len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut u32_le = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        u32_le(CHECKPOINT_VERSION as usize);
        u32_le(c.stem_channels);
        u32_le(c.stage_channels.len());
        for &s in &c.stage_channels {
            u32_le(s);
        }
        u32_le(c.blocks_per_stage);
        u32_le(c.fc_width);
        u32_le(c.input_height);
        u32_le(c.input_width);
        out.push(match c.pooling {
            Pooling::Average => 0,
            Pooling::Flatten => 1,
        });
        for arr in [&self.values, &self.running] {
            out.extend_from_slice(&(arr.len() as u64).to_le_bytes());
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(NetError::Checkpoint("missing GZNT magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let stem_channels = r.u32()? as usize;
        let stages = r.u32()? as usize;
        if stages > 64 {
            return Err(NetError::Checkpoint(format!(
                "implausible stage count {stages}"
            )));
        }
        let stage_channels = (0..stages)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let blocks_per_stage = r.u32()? as usize;
        let fc_width = r.u32()? as usize;
        let input_height = r.u32()? as usize;
        let input_width = r.u32()? as usize;
        let pooling = match r.take(1)?[0] {
            0 => Pooling::Average,
            1 => Pooling::Flatten,
            b => return Err(NetError::Checkpoint(format!("unknown pooling byte {b}"))),
        };
        let config = NetworkConfig {
            stem_channels,
            stage_channels,
            blocks_per_stage,
            fc_width,
            input_height,
            input_width,
            pooling,
        };
        config.validate()?;
        let plan = Plan::build(&config);
        let values = r.f64_array(plan.n_params, "learnable values")?;
        let running = r.f64_array(plan.n_running, "running statistics")?;
        if r.pos != bytes.len() {
            return Err(NetError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let params = NetworkParams {
            config,
            plan: Arc::new(plan),
            values,
            running,
            version: next_version(),
        };
        params.check()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let bytes = std::fs::read(path).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| NetError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64_array(&mut self, expected: usize, what: &str) -> Result<Vec<f64>, NetError> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if n != expected as u64 {
            return Err(NetError::Checkpoint(format!(
                "{what}: {n} values, config needs {expected}"
            )));
        }
        let raw = self.take(expected * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
