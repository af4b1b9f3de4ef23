//! C ABI for the pose distillation library: opaque model handles, flat-buffer
//! sampling, and the distribution/temporal metrics.
//!
//! All functions return a [`PoseStatus`]; on failure a thread-local message is
//! retrievable via [`pose_last_error`]. Buffers are caller-allocated row-major
//! `double` arrays.

use pose_core::ckpt::Checkpoint;
use pose_core::eval::{mmd_rbf, sliced_wasserstein, temporal_metrics};
use pose_core::flow::{euler_sample, Conditioning};
use pose_core::nets::{BoundNet, NetConfig};
use pose_core::tensor::Tensor;
use pose_core::PoseError;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Status codes returned by every FFI entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Missing = 3,
    Training = 4,
    Evaluation = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_last_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(status: PoseStatus, msg: &str) -> PoseStatus {
    set_last_error(msg);
    status
}

fn status_for(err: &PoseError) -> PoseStatus {
    match err {
        PoseError::InvalidArgument(_) | PoseError::ShapeMismatch(_) | PoseError::ZeroNoiseLevel(_) => {
            PoseStatus::InvalidArgument
        }
        PoseError::Missing(_) => PoseStatus::Missing,
        PoseError::NonFinite(_) => PoseStatus::Training,
        _ => PoseStatus::Internal,
    }
}

/// An opaque loaded generator: architecture plus parameters.
pub struct PoseModel {
    cfg: NetConfig,
    ckpt: Checkpoint,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pose_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. Valid until the next
/// failing call from the same thread.
#[no_mangle]
pub extern "C" fn pose_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint from its path stem (without the `.bin`/`.json`
/// extension). On success writes a handle that must be released with
/// [`pose_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pose_model_load(
    path: *const c_char,
    out: *mut *mut PoseModel,
) -> PoseStatus {
    if path.is_null() || out.is_null() {
        return fail(PoseStatus::NullPointer, "pose_model_load: null pointer");
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => return fail(PoseStatus::InvalidArgument, "path is not valid UTF-8"),
    };
    let ckpt = match Checkpoint::load(Path::new(path)) {
        Ok(c) => c,
        Err(e) => return fail(status_for(&e), &format!("loading {path}: {e}")),
    };
    let cfg: NetConfig = match serde_json::from_value(ckpt.meta.arch.clone()) {
        Ok(c) => c,
        Err(e) => {
            return fail(
                PoseStatus::InvalidArgument,
                &format!("checkpoint {path} has no architecture sidecar: {e}"),
            )
        }
    };
    *out = Box::into_raw(Box::new(PoseModel { cfg, ckpt }));
    PoseStatus::Ok
}

/// Release a model handle. Passing NULL is a no-op.
///
/// # Safety
/// `model` must be a handle from [`pose_model_load`], released at most once.
#[no_mangle]
pub unsafe extern "C" fn pose_model_free(model: *mut PoseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters in the loaded model.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pose_model_num_params(
    model: *const PoseModel,
    out: *mut usize,
) -> PoseStatus {
    if model.is_null() || out.is_null() {
        return fail(PoseStatus::NullPointer, "pose_model_num_params: null pointer");
    }
    *out = (*model).ckpt.params.num_scalars();
    PoseStatus::Ok
}

/// Sample clips by Euler integration from `t=1` noise.
///
/// `noise` and `out` hold `batch*frames*channels*height*width` doubles in
/// row-major order; `cond_frames` is either NULL (unconditional) or
/// `batch*channels*height*width` doubles giving the conditional first frame.
///
/// # Safety
/// All non-null pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn pose_model_sample(
    model: *const PoseModel,
    noise: *const f64,
    batch: usize,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    steps: usize,
    cond_frames: *const f64,
    out: *mut f64,
) -> PoseStatus {
    if model.is_null() || noise.is_null() || out.is_null() {
        return fail(PoseStatus::NullPointer, "pose_model_sample: null pointer");
    }
    let model = &*model;
    if channels != model.cfg.channels || height != model.cfg.height || width != model.cfg.width {
        return fail(
            PoseStatus::InvalidArgument,
            &format!(
                "geometry {channels}x{height}x{width} does not match model {}x{}x{}",
                model.cfg.channels, model.cfg.height, model.cfg.width
            ),
        );
    }
    let n = batch * frames * channels * height * width;
    if n == 0 {
        return fail(PoseStatus::InvalidArgument, "empty sample request");
    }
    let noise = std::slice::from_raw_parts(noise, n);
    let x = Tensor::new(
        ndarray::ArrayD::from_shape_vec(
            ndarray::IxDyn(&[batch, frames, channels, height, width]),
            noise.to_vec(),
        )
        .unwrap(),
    );
    let cond = if cond_frames.is_null() {
        None
    } else {
        let cf = std::slice::from_raw_parts(cond_frames, batch * channels * height * width);
        let frame = Tensor::new(
            ndarray::ArrayD::from_shape_vec(
                ndarray::IxDyn(&[batch, channels, height, width]),
                cf.to_vec(),
            )
            .unwrap(),
        );
        let mut mask = vec![0.0; frames];
        mask[0] = 1.0;
        Some(Conditioning {
            frame,
            mask,
            attributes: vec![Vec::new(); batch],
        })
    };
    let net = BoundNet::new(model.cfg.clone(), model.ckpt.params.bind(false));
    let (samples, _nfe) = match euler_sample(&net, &x, steps, cond.as_ref()) {
        Ok(s) => s,
        Err(e) => return fail(status_for(&e), &format!("sampling failed: {e}")),
    };
    let data = samples.detach().data().as_standard_layout().to_owned();
    let out = std::slice::from_raw_parts_mut(out, n);
    out.copy_from_slice(data.as_slice().unwrap());
    PoseStatus::Ok
}

unsafe fn points<'a>(
    ptr: *const f64,
    n: usize,
    dim: usize,
) -> Result<ndarray::ArrayD<f64>, PoseStatus> {
    if ptr.is_null() {
        return Err(PoseStatus::NullPointer);
    }
    let s = std::slice::from_raw_parts(ptr, n * dim);
    Ok(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[n, dim]), s.to_vec()).unwrap())
}

/// Sliced Wasserstein-1 distance between two point sets of `dim` columns.
///
/// # Safety
/// `a` holds `n_a*dim` doubles, `b` holds `n_b*dim`; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pose_sliced_wasserstein(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    dim: usize,
    n_projections: usize,
    seed: u64,
    out: *mut f64,
) -> PoseStatus {
    if out.is_null() {
        return fail(PoseStatus::NullPointer, "pose_sliced_wasserstein: null out");
    }
    let (a, b) = match (points(a, n_a, dim), points(b, n_b, dim)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return fail(PoseStatus::NullPointer, "pose_sliced_wasserstein: null input"),
    };
    match sliced_wasserstein(&a, &b, n_projections, seed) {
        Ok(v) => {
            *out = v;
            PoseStatus::Ok
        }
        Err(e) => fail(status_for(&e), &format!("sliced wasserstein: {e}")),
    }
}

/// Biased RBF-kernel MMD between two point sets of `dim` columns.
///
/// # Safety
/// Same buffer contract as [`pose_sliced_wasserstein`].
#[no_mangle]
pub unsafe extern "C" fn pose_mmd_rbf(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    dim: usize,
    out: *mut f64,
) -> PoseStatus {
    if out.is_null() {
        return fail(PoseStatus::NullPointer, "pose_mmd_rbf: null out");
    }
    let (a, b) = match (points(a, n_a, dim), points(b, n_b, dim)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return fail(PoseStatus::NullPointer, "pose_mmd_rbf: null input"),
    };
    match mmd_rbf(&a, &b, true) {
        Ok(v) => {
            *out = v;
            PoseStatus::Ok
        }
        Err(e) => fail(status_for(&e), &format!("mmd: {e}")),
    }
}

/// Temporal metrics of a clip batch: motion smoothness, subject consistency
/// and dynamic degree.
///
/// # Safety
/// `videos` holds `batch*frames*channels*height*width` doubles; the three
/// output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pose_temporal_metrics(
    videos: *const f64,
    batch: usize,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_smoothness: *mut f64,
    out_consistency: *mut f64,
    out_dynamic: *mut f64,
) -> PoseStatus {
    if videos.is_null() || out_smoothness.is_null() || out_consistency.is_null() || out_dynamic.is_null()
    {
        return fail(PoseStatus::NullPointer, "pose_temporal_metrics: null pointer");
    }
    let n = batch * frames * channels * height * width;
    let s = std::slice::from_raw_parts(videos, n);
    let t = Tensor::new(
        ndarray::ArrayD::from_shape_vec(
            ndarray::IxDyn(&[batch, frames, channels, height, width]),
            s.to_vec(),
        )
        .unwrap(),
    );
    match temporal_metrics(&t) {
        Ok((smooth, consist, dynamic)) => {
            *out_smoothness = smooth;
            *out_consistency = consist;
            *out_dynamic = dynamic;
            PoseStatus::Ok
        }
        Err(e) => fail(status_for(&e), &format!("temporal metrics: {e}")),
    }
}
