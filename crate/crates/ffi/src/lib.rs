//! C ABI for gazecal.
//!
//! Objects cross the boundary as opaque handles ([`GzNetwork`],
//! [`GzDataset`]) created and freed by this library. Every fallible
//! function returns a [`GzStatus`]; on failure a description is available
//! from [`gz_last_error_message`] on the same thread. Results are written
//! through out-pointers supplied by the caller. The generated header is
//! `include/gazecal.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use gazecal::dataset::{self, DatasetError, DatasetFormat, PersonDataset, EYE_HEIGHT, EYE_WIDTH};
use gazecal::geometry::{
    estimate_head_pose, head_angle_vector, histogram_equalize, CameraIntrinsics, FacialModel,
    GeometryError,
};
use gazecal::net::{self, Batch, Mode, NetError, NetworkConfig, NetworkParams, Pooling};
use gazecal::train::{self, TrainError};
use nalgebra::{Matrix3, Vector2};

/// Outcome of a call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GzStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument or input file failed validation.
    InvalidArgument = 2,
    /// Reading or writing a file failed.
    Io = 3,
    /// A computation produced non-finite values or did not converge.
    Numerical = 4,
    /// An internal error; the library state is unchanged.
    Internal = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GzPooling {
    Average = 0,
    Flatten = 1,
}

/// Maximum number of residual stages in a [`GzNetworkConfig`].
pub const GZ_MAX_STAGES: usize = 8;

/// Network architecture. Only the first `stage_count` entries of
/// `stage_channels` are used.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct GzNetworkConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; GZ_MAX_STAGES],
    pub stage_count: usize,
    pub blocks_per_stage: usize,
    pub fc_width: usize,
    pub pooling: GzPooling,
}

/// Mean and population standard deviation of the per-sample error.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct GzErrorStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Head-to-camera pose: row-major rotation, translation in millimetres.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct GzPose {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub rms_error: f64,
}

/// A trained or freshly initialized network.
pub struct GzNetwork {
    params: NetworkParams,
}

/// A loaded sample store.
pub struct GzDataset {
    persons: Vec<PersonDataset>,
}

struct Failure(GzStatus, String);

type Outcome = Result<(), Failure>;

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        let status = match e {
            DatasetError::Io { .. } => GzStatus::Io,
            _ => GzStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        let status = match e {
            NetError::Io { .. } => GzStatus::Io,
            NetError::NonFinite(_) => GzStatus::Numerical,
            _ => GzStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Net(n) => n.into(),
            TrainError::Diverged { .. } => Failure(GzStatus::Numerical, e.to_string()),
            _ => Failure(GzStatus::InvalidArgument, e.to_string()),
        }
    }
}

impl From<GeometryError> for Failure {
    fn from(e: GeometryError) -> Self {
        let status = match e {
            GeometryError::InvalidParameter(_) => GzStatus::InvalidArgument,
            _ => GzStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let clean = message.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("nul bytes removed"));
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Outcome) -> GzStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            GzStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            GzStatus::Internal
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(GzStatus::NullArgument, format!("{name} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(GzStatus::InvalidArgument, message.into())
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn out_arg<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(name))
}

unsafe fn ref_arg<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(name))
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_out<'a, T>(ptr: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Description of the last failure on this thread, or an empty string.
/// The pointer stays valid until the next call into the library on this
/// thread.
#[no_mangle]
pub extern "C" fn gz_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gz_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fills `out` with the default architecture.
///
/// # Safety
/// `out` must be null or point to writable memory for one config.
#[no_mangle]
pub unsafe extern "C" fn gz_network_config_default(out: *mut GzNetworkConfig) -> GzStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = NetworkConfig::default();
        let mut stages = [0; GZ_MAX_STAGES];
        stages[..cfg.stage_channels.len()].copy_from_slice(&cfg.stage_channels);
        *out = GzNetworkConfig {
            stem_channels: cfg.stem_channels,
            stage_channels: stages,
            stage_count: cfg.stage_channels.len(),
            blocks_per_stage: cfg.blocks_per_stage,
            fc_width: cfg.fc_width,
            pooling: match cfg.pooling {
                Pooling::Average => GzPooling::Average,
                Pooling::Flatten => GzPooling::Flatten,
            },
        };
        Ok(())
    })
}

/// Creates a freshly initialized network. Free it with
/// [`gz_network_free`].
///
/// # Safety
/// `config` must be null or point to a valid config; `out` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gz_network_new(
    config: *const GzNetworkConfig,
    seed: u64,
    out: *mut *mut GzNetwork,
) -> GzStatus {
    guard(|| {
        let c = ref_arg(config, "config")?;
        let out = out_arg(out, "out")?;
        if c.stage_count > GZ_MAX_STAGES {
            return Err(invalid(format!("stage_count exceeds {GZ_MAX_STAGES}")));
        }
        let cfg = NetworkConfig {
            stem_channels: c.stem_channels,
            stage_channels: c.stage_channels[..c.stage_count].to_vec(),
            blocks_per_stage: c.blocks_per_stage,
            fc_width: c.fc_width,
            input_height: EYE_HEIGHT,
            input_width: EYE_WIDTH,
            pooling: match c.pooling {
                GzPooling::Average => Pooling::Average,
                GzPooling::Flatten => Pooling::Flatten,
            },
        };
        let params = net::init_network(&cfg, seed)?;
        *out = Box::into_raw(Box::new(GzNetwork { params }));
        Ok(())
    })
}

/// Loads a checkpoint written by `gazecal train` or [`gz_network_save`].
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gz_network_load(
    path: *const c_char,
    out: *mut *mut GzNetwork,
) -> GzStatus {
    guard(|| {
        let path = path_arg(path)?;
        let out = out_arg(out, "out")?;
        let params = NetworkParams::load(&path)?;
        *out = Box::into_raw(Box::new(GzNetwork { params }));
        Ok(())
    })
}

/// # Safety
/// `network` must be null or a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gz_network_save(
    network: *const GzNetwork,
    path: *const c_char,
) -> GzStatus {
    guard(|| {
        let n = ref_arg(network, "network")?;
        n.params.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a network handle. Null is ignored.
///
/// # Safety
/// `network` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gz_network_free(network: *mut GzNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// # Safety
/// `network` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gz_network_param_count(
    network: *const GzNetwork,
    out: *mut usize,
) -> GzStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(network, "network")?.params.param_count();
        Ok(())
    })
}

/// Predicts gaze points for `count` eye crops.
///
/// `images` holds `count` crops of 60×36 grey pixels, row-major, already in
/// the left-eye frame (mirror right-eye crops and negate their yaw first).
/// `head_angles` holds `count` (yaw, pitch) pairs in radians. `out`
/// receives `count` (x, y) pairs in normalized screen coordinates.
///
/// # Safety
/// Each pointer must be null or valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn gz_network_predict(
    network: *const GzNetwork,
    images: *const u8,
    head_angles: *const f32,
    count: usize,
    out: *mut f64,
) -> GzStatus {
    guard(|| {
        let n = ref_arg(network, "network")?;
        if count == 0 {
            return Ok(());
        }
        let pixels = slice_arg(images, count * EYE_WIDTH * EYE_HEIGHT, "images")?;
        let heads = slice_arg(head_angles, 2 * count, "head_angles")?;
        let out = slice_out(out, 2 * count, "out")?;
        let batch = Batch::new(
            EYE_HEIGHT,
            EYE_WIDTH,
            pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            heads
                .chunks_exact(2)
                .map(|h| [h[0] as f64, h[1] as f64])
                .collect(),
            vec![[0.0; 2]; count],
        )?;
        let preds = net::forward(&n.params, &batch, Mode::Eval)?.predictions;
        for (o, p) in out.chunks_exact_mut(2).zip(preds) {
            o.copy_from_slice(&p);
        }
        Ok(())
    })
}

/// Loads every `.gzd` person file in a store directory.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gz_dataset_load(
    path: *const c_char,
    out: *mut *mut GzDataset,
) -> GzStatus {
    guard(|| {
        let path = path_arg(path)?;
        let out = out_arg(out, "out")?;
        let persons = dataset::load_dataset(&path, DatasetFormat::Gzd)?;
        *out = Box::into_raw(Box::new(GzDataset { persons }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gz_dataset_person_count(
    dataset: *const GzDataset,
    out: *mut usize,
) -> GzStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(dataset, "dataset")?.persons.len();
        Ok(())
    })
}

/// Number of samples of person `person` (store order).
///
/// # Safety
/// `dataset` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gz_dataset_sample_count(
    dataset: *const GzDataset,
    person: usize,
    out: *mut usize,
) -> GzStatus {
    guard(|| {
        let d = ref_arg(dataset, "dataset")?;
        let p = d
            .persons
            .get(person)
            .ok_or_else(|| invalid(format!("person index {person} out of range")))?;
        *out_arg(out, "out")? = p.len();
        Ok(())
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gz_dataset_free(dataset: *mut GzDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Mean Euclidean gaze error of `network` over every sample in `dataset`.
///
/// # Safety
/// Handles must be null or live; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gz_evaluate(
    network: *const GzNetwork,
    dataset: *const GzDataset,
    out: *mut GzErrorStats,
) -> GzStatus {
    guard(|| {
        let n = ref_arg(network, "network")?;
        let d = ref_arg(dataset, "dataset")?;
        let out = out_arg(out, "out")?;
        let samples: Vec<_> = d.persons.iter().flat_map(|p| p.samples.iter()).collect();
        let r = train::evaluate(&n.params, &samples)?;
        *out = GzErrorStats {
            mean: r.mean,
            std: r.std,
            count: samples.len(),
        };
        Ok(())
    })
}

/// Histogram-equalizes a `width`×`height` grey image into `out`.
///
/// # Safety
/// `pixels` and `out` must be null or valid for `width * height` bytes.
#[no_mangle]
pub unsafe extern "C" fn gz_histogram_equalize(
    pixels: *const u8,
    width: u32,
    height: u32,
    out: *mut u8,
) -> GzStatus {
    guard(|| {
        let len = width as usize * height as usize;
        if len == 0 {
            return Err(invalid("image is empty"));
        }
        let src = slice_arg(pixels, len, "pixels")?;
        let dst = slice_out(out, len, "out")?;
        let img = image::GrayImage::from_raw(width, height, src.to_vec())
            .ok_or_else(|| invalid("pixel buffer does not match the size"))?;
        dst.copy_from_slice(histogram_equalize(&img).as_raw());
        Ok(())
    })
}

/// Estimates the head pose from six landmarks of the generic face model.
///
/// `points` holds six (u, v) pixel pairs in landmark order: right eye
/// outer, right eye inner, left eye inner, left eye outer, mouth right,
/// mouth left.
///
/// # Safety
/// `points` must be null or valid for 12 values; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gz_estimate_head_pose(
    points: *const f64,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    out: *mut GzPose,
) -> GzStatus {
    guard(|| {
        let pts = slice_arg(points, 12, "points")?;
        let out = out_arg(out, "out")?;
        let cam = CameraIntrinsics::new(fx, fy, cx, cy)?;
        let observed: [Vector2<f64>; 6] =
            std::array::from_fn(|i| Vector2::new(pts[2 * i], pts[2 * i + 1]));
        let est = estimate_head_pose(&FacialModel::generic(), &observed, &cam)?;
        let r = est.pose.rotation.matrix();
        *out = GzPose {
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            translation: [
                est.pose.translation.x,
                est.pose.translation.y,
                est.pose.translation.z,
            ],
            rms_error: est.rms_error,
        };
        Ok(())
    })
}

/// Converts a row-major head rotation into the (yaw, pitch) head angle
/// vector fed to the network.
///
/// # Safety
/// `rotation` must be null or valid for 9 values; `out` for 2.
#[no_mangle]
pub unsafe extern "C" fn gz_head_angles(rotation: *const f64, out: *mut f64) -> GzStatus {
    guard(|| {
        let r = slice_arg(rotation, 9, "rotation")?;
        let out = slice_out(out, 2, "out")?;
        let m = Matrix3::from_row_slice(r);
        out.copy_from_slice(&head_angle_vector(&m)?);
        Ok(())
    })
}
