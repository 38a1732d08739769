//! C ABI for the morphing attack detection toolkit.
//!
//! Conventions: every fallible function returns an [`OmadStatus`]; on any
//! non-OK status a human-readable message is stored per thread and can be
//! fetched with [`omad_last_error`]. Models are opaque handles created by
//! [`omad_model_load`] and released with [`omad_model_free`]. Strings are
//! NUL-terminated UTF-8; pixel buffers are row-major grayscale in [0,1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use orthomad::error::Error;
use orthomad::metrics::{self, ScoreSet};
use orthomad::model::{load_model, ModelConfig, ModelParams};
use orthomad::synthdata::{generate_dataset, load_manifest, resize_bilinear, GenParams};
use orthomad::tensor::Tensor;
use orthomad::trainer::{train, Optimizer, TrainConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmadStatus {
    /// Success.
    Ok = 0,
    /// Invalid arguments or configuration; nothing was written.
    Usage = 1,
    /// Runtime failure (I/O, corrupt file, numeric divergence).
    Runtime = 2,
    /// A required pointer argument was NULL or not valid UTF-8.
    NullArg = 3,
}

/// Loaded model; opaque to C.
pub struct OmadModel {
    params: ModelParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("NUL bytes removed");
    });
}

fn fail(e: &Error) -> OmadStatus {
    set_error(&e.to_string());
    if e.is_usage() {
        OmadStatus::Usage
    } else {
        OmadStatus::Runtime
    }
}

fn null_arg(name: &str) -> OmadStatus {
    set_error(&format!("argument {name} is NULL or invalid"));
    OmadStatus::NullArg
}

/// # Safety
/// `s` must be NULL or a NUL-terminated string.
unsafe fn utf8_arg<'a>(s: *const c_char, name: &str) -> Result<&'a str, OmadStatus> {
    if s.is_null() {
        return Err(null_arg(name));
    }
    CStr::from_ptr(s).to_str().map_err(|_| null_arg(name))
}

/// Message for the most recent non-OK status on this thread. The pointer is
/// valid until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn omad_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Generate a deterministic synthetic morph dataset under `out_dir`.
///
/// # Safety
/// `out_dir` must be a NUL-terminated path string.
#[no_mangle]
pub unsafe extern "C" fn omad_generate_dataset(
    out_dir: *const c_char,
    seed: u64,
    identities: u32,
    per_identity: u32,
    morphs: u32,
    split_fraction: f64,
    image_size: usize,
    noise_std: f64,
) -> OmadStatus {
    let out_dir = match utf8_arg(out_dir, "out_dir") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let params = GenParams {
        seed,
        n_identities: identities,
        bona_fide_per_identity: per_identity,
        n_morphs: morphs,
        split_fraction,
        size: image_size,
        noise_std,
    };
    match generate_dataset(&params, Path::new(out_dir)) {
        Ok(_) => OmadStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Train on a generated dataset; writes checkpoints and the training log
/// under `out_dir`. `optimizer` is "adam" or "sgd".
///
/// # Safety
/// `data_dir`, `out_dir`, and `optimizer` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn omad_train(
    data_dir: *const c_char,
    out_dir: *const c_char,
    alpha: f64,
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    embed_dim: usize,
    optimizer: *const c_char,
) -> OmadStatus {
    let data_dir = match utf8_arg(data_dir, "data_dir") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let out_dir = match utf8_arg(out_dir, "out_dir") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let optimizer = match utf8_arg(optimizer, "optimizer") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let run = || -> orthomad::Result<()> {
        let config = TrainConfig {
            alpha,
            learning_rate,
            batch_size,
            epochs,
            seed,
            optimizer: optimizer.parse::<Optimizer>()?,
            ..TrainConfig::default()
        };
        config.validate()?;
        if embed_dim == 0 {
            return Err(Error::Config("embed dim must be ≥ 1".into()));
        }
        let model_config = ModelConfig {
            embed_dim,
            ..ModelConfig::default()
        };
        let manifest = load_manifest(Path::new(data_dir))?;
        train::<f32>(&config, &model_config, &manifest, Path::new(out_dir))?;
        Ok(())
    };
    match run() {
        Ok(()) => OmadStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Load a model checkpoint into a handle stored at `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn omad_model_load(
    path: *const c_char,
    out: *mut *mut OmadModel,
) -> OmadStatus {
    if out.is_null() {
        return null_arg("out");
    }
    *out = ptr::null_mut();
    let path = match utf8_arg(path, "path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match load_model::<f32>(Path::new(path)) {
        Ok(params) => {
            *out = Box::into_raw(Box::new(OmadModel { params }));
            OmadStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Release a handle from [`omad_model_load`]. NULL is a no-op.
///
/// # Safety
/// `model` must be NULL or a pointer returned by [`omad_model_load`] that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn omad_model_free(model: *mut OmadModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square input the model expects.
///
/// # Safety
/// `model` must be a live handle from [`omad_model_load`].
#[no_mangle]
pub unsafe extern "C" fn omad_model_input_size(model: *const OmadModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).params.config.input_size
}

/// Score one square grayscale image (row-major, values in [0,1]); images of
/// a different size than the model input are bilinearly resized. The bona
/// fide score in (0,1) is written to `score_out`.
///
/// # Safety
/// `model` must be a live handle, `pixels` must point to `size*size`
/// floats, and `score_out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn omad_model_predict(
    model: *const OmadModel,
    pixels: *const f32,
    size: usize,
    score_out: *mut f64,
) -> OmadStatus {
    if model.is_null() {
        return null_arg("model");
    }
    if pixels.is_null() {
        return null_arg("pixels");
    }
    if score_out.is_null() {
        return null_arg("score_out");
    }
    let model = &*model;
    if size == 0 {
        set_error("image size must be ≥ 1");
        return OmadStatus::Usage;
    }
    let raw = std::slice::from_raw_parts(pixels, size * size);
    let run = || -> orthomad::Result<f64> {
        let as_f64: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let resized = resize_bilinear(&as_f64, size, model.params.config.input_size);
        let side = model.params.config.input_size;
        let data: Vec<f32> = resized.iter().map(|&v| v as f32).collect();
        let image = Tensor::new(vec![1, side, side], data)?;
        let y = orthomad::model::predict(&model.params, &image)?;
        Ok(y as f64)
    };
    match run() {
        Ok(score) => {
            *score_out = score;
            OmadStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

unsafe fn score_set_from_raw(
    scores: *const f64,
    labels: *const u8,
    count: usize,
) -> Result<ScoreSet, OmadStatus> {
    if scores.is_null() {
        return Err(null_arg("scores"));
    }
    if labels.is_null() {
        return Err(null_arg("labels"));
    }
    let scores = std::slice::from_raw_parts(scores, count);
    let labels = std::slice::from_raw_parts(labels, count);
    let mut set = ScoreSet::new();
    for (i, (&score, &label)) in scores.iter().zip(labels).enumerate() {
        set.push(format!("sample_{i}"), label, score).map_err(|e| fail(&e))?;
    }
    Ok(set)
}

/// Equal error rate of a scored set (labels: 1 bona fide, 0 attack; higher
/// score = more bona fide). The rate and its threshold are written to the
/// output pointers.
///
/// # Safety
/// `scores` and `labels` must point to `count` elements each; the output
/// pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn omad_eer(
    scores: *const f64,
    labels: *const u8,
    count: usize,
    eer_out: *mut f64,
    threshold_out: *mut f64,
) -> OmadStatus {
    if eer_out.is_null() || threshold_out.is_null() {
        return null_arg("eer_out/threshold_out");
    }
    let set = match score_set_from_raw(scores, labels, count) {
        Ok(set) => set,
        Err(status) => return status,
    };
    match metrics::eer(&set) {
        Ok((rate, threshold)) => {
            *eer_out = rate;
            *threshold_out = threshold;
            OmadStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Lowest BPCER attainable with APCER ≤ `target` (target in (0,1)).
///
/// # Safety
/// Same contracts as [`omad_eer`].
#[no_mangle]
pub unsafe extern "C" fn omad_bpcer_at_apcer(
    scores: *const f64,
    labels: *const u8,
    count: usize,
    target: f64,
    bpcer_out: *mut f64,
    threshold_out: *mut f64,
) -> OmadStatus {
    if bpcer_out.is_null() || threshold_out.is_null() {
        return null_arg("bpcer_out/threshold_out");
    }
    let set = match score_set_from_raw(scores, labels, count) {
        Ok(set) => set,
        Err(status) => return status,
    };
    match metrics::bpcer_at_apcer(&set, target) {
        Ok((bpcer, threshold)) => {
            *bpcer_out = bpcer;
            *threshold_out = threshold;
            OmadStatus::Ok
        }
        Err(e) => fail(&e),
    }
}
