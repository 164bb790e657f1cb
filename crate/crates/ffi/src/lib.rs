//! C ABI over `npx-core`.
//!
//! Datasets and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns an [`NpxStatus`]; on failure
//! [`npx_last_error_message`] describes the most recent error on the calling
//! thread. Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use npx_core::model::{load_checkpoint, save_checkpoint, Dmbn, ModelConfig, ObservationSet, TimeMode};
use npx_core::synthdata::{default_corpus, load_dataset, save_dataset, ArmGeometry, Trajectory};
use npx_core::training::evaluate;
use npx_core::Error;

/// Pixels per frame (16×16, row-major).
pub const NPX_FRAME_LEN: usize = 256;
/// Joint coordinates per observation.
pub const NPX_JOINTS: usize = 2;

const _: () = assert!(NPX_FRAME_LEN == npx_core::synthdata::FRAME_LEN && NPX_JOINTS == npx_core::synthdata::JOINTS);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NpxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Malformed = 4,
    Version = 5,
    Dimension = 6,
    Domain = 7,
    Contract = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NpxTimeMode {
    Channel = 0,
    Pte = 1,
}

/// Per-modality evaluation metrics.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NpxMetrics {
    pub image_nll: f64,
    pub image_mse: f64,
    pub image_coverage: f64,
    pub joint_nll: f64,
    pub joint_mse: f64,
    pub joint_coverage: f64,
}

/// Opaque list of trajectories.
pub struct NpxDataset {
    trajs: Vec<Trajectory>,
}

/// Opaque trained or freshly initialized model.
pub struct NpxModel {
    model: Dmbn,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> NpxStatus {
    match e {
        Error::Dimension { .. } => NpxStatus::Dimension,
        Error::Domain { .. } => NpxStatus::Domain,
        Error::Contract(_) | Error::Index { .. } | Error::Mode(_) => NpxStatus::Contract,
        Error::Config(_) => NpxStatus::InvalidArgument,
        Error::Malformed { .. } => NpxStatus::Malformed,
        Error::Version { .. } => NpxStatus::Version,
        Error::Io { .. } => NpxStatus::Io,
    }
}

struct Fail(NpxStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NpxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            NpxStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NpxStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(NpxStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(NpxStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn npx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn npx_dataset_load(path: *const c_char, out: *mut *mut NpxDataset) -> NpxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let trajs = load_dataset(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(NpxDataset { trajs }));
        Ok(())
    })
}

/// Generates `count` trajectories of length `t` from seeds `seed..seed+count`.
#[no_mangle]
pub unsafe extern "C" fn npx_dataset_generate(
    count: usize,
    t: usize,
    seed: u64,
    out: *mut *mut NpxDataset,
) -> NpxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (trajs, _) = default_corpus(count, 0, t, seed, &ArmGeometry::default())?;
        *out = Box::into_raw(Box::new(NpxDataset { trajs }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn npx_dataset_save(ds: *const NpxDataset, path: *const c_char) -> NpxStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        save_dataset(&ds.trajs, path_arg(path)?)?;
        Ok(())
    })
}

/// Number of trajectories; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn npx_dataset_len(ds: *const NpxDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.trajs.len())
}

/// Length T of trajectory `index`.
#[no_mangle]
pub unsafe extern "C" fn npx_dataset_sequence_length(
    ds: *const NpxDataset,
    index: usize,
    out_t: *mut usize,
) -> NpxStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if out_t.is_null() {
            return Err(null("out_t"));
        }
        let tr = ds.trajs.get(index).ok_or(Error::Index {
            index,
            len: ds.trajs.len(),
        })?;
        *out_t = tr.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn npx_dataset_free(ds: *mut NpxDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// A freshly initialized model with default widths.
#[no_mangle]
pub unsafe extern "C" fn npx_model_new(mode: NpxTimeMode, seed: u64, out: *mut *mut NpxModel) -> NpxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = match mode {
            NpxTimeMode::Channel => TimeMode::Channel,
            NpxTimeMode::Pte => TimeMode::Pte,
        };
        let model = Dmbn::new(ModelConfig::new(mode).with_seed(seed))?;
        *out = Box::into_raw(Box::new(NpxModel { model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn npx_model_load(path: *const c_char, out: *mut *mut NpxModel) -> NpxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(NpxModel { model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn npx_model_save(model: *const NpxModel, path: *const c_char) -> NpxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        save_checkpoint(&m.model, path_arg(path)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn npx_model_time_mode(model: *const NpxModel, out: *mut NpxTimeMode) -> NpxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = match m.model.config().time_mode {
            TimeMode::Channel => NpxTimeMode::Channel,
            TimeMode::Pte => NpxTimeMode::Pte,
        };
        Ok(())
    })
}

/// Predicts `n_targets` times from the observations `context[0..n_ctx]` of
/// trajectory `seq`. Image buffers hold `n_targets * NPX_FRAME_LEN` values
/// and joint buffers `n_targets * NPX_JOINTS`, row per target.
#[no_mangle]
pub unsafe extern "C" fn npx_model_predict(
    model: *const NpxModel,
    ds: *const NpxDataset,
    seq: usize,
    context: *const usize,
    n_ctx: usize,
    targets: *const f64,
    n_targets: usize,
    image_mean: *mut f64,
    image_var: *mut f64,
    joint_mean: *mut f64,
    joint_var: *mut f64,
) -> NpxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if context.is_null() || targets.is_null() {
            return Err(null("context or targets"));
        }
        if n_ctx == 0 || n_targets == 0 {
            return Err(Fail(NpxStatus::InvalidArgument, "n_ctx and n_targets must be positive".into()));
        }
        let tr = ds.trajs.get(seq).ok_or(Error::Index {
            index: seq,
            len: ds.trajs.len(),
        })?;
        let idx = std::slice::from_raw_parts(context, n_ctx);
        let times = std::slice::from_raw_parts(targets, n_targets);
        let ctx = ObservationSet::from_trajectory(tr, idx)?;
        let pred = m.model.forward(&ctx, times)?;
        out_slice(image_mean, n_targets * NPX_FRAME_LEN, "image_mean")?.copy_from_slice(pred.image_mean.data());
        out_slice(image_var, n_targets * NPX_FRAME_LEN, "image_var")?.copy_from_slice(pred.image_var.data());
        out_slice(joint_mean, n_targets * NPX_JOINTS, "joint_mean")?.copy_from_slice(pred.joint_mean.data());
        out_slice(joint_var, n_targets * NPX_JOINTS, "joint_var")?.copy_from_slice(pred.joint_var.data());
        Ok(())
    })
}

/// Scores the model on every trajectory from `n_ctx` evenly spaced
/// observations.
#[no_mangle]
pub unsafe extern "C" fn npx_model_evaluate(
    model: *const NpxModel,
    ds: *const NpxDataset,
    n_ctx: usize,
    out: *mut NpxMetrics,
) -> NpxStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let e = evaluate(&m.model, &ds.trajs, n_ctx)?;
        *out = NpxMetrics {
            image_nll: e.image.nll,
            image_mse: e.image.mse,
            image_coverage: e.image.coverage,
            joint_nll: e.joint.nll,
            joint_mse: e.joint.mse,
            joint_coverage: e.joint.coverage,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn npx_model_free(model: *mut NpxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
