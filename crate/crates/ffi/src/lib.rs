//! C ABI over the core crate: load a trained checkpoint, generate embedding
//! traces, round-trip them through the on-disk container, and score them
//! against a reference distribution.
//!
//! Conventions, mirrored in `include/cam.h`:
//! - Every fallible call returns a [`cam_status`]; out-parameters are written
//!   only on `CAM_OK`. The message behind the most recent failure on the
//!   current thread is available via [`cam_last_error`].
//! - Handles (`cam_model`, `cam_traces`, `cam_dataset`) are opaque and
//!   single-owner; release them with the matching `*_free`, which accepts
//!   null. No call transfers ownership of its inputs.
//! - Panics never unwind across the boundary: every entry point catches them
//!   and reports `CAM_ERR_PANIC` instead.
//!
//! The committed header is generated with cbindgen from this crate's
//! directory: `cbindgen --config cbindgen.toml --output include/cam.h`.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cam_core::data::{read_embeddings, write_embeddings, Dataset};
use cam_core::inference::{generate_batch, GenerationConfig, GenerationTrace, InjectionMode};
use cam_core::math::ErrorLevel;
use cam_core::metrics::{fed_protocol, FedConfig};
use cam_core::training::{load_checkpoint, Objective, TrainState};
use cam_core::CamError;

/// Result classes for every fallible call. The config/numeric/io split
/// matches the CLI's exit codes; the last two are boundary-specific.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum cam_status {
    /// Success; out-parameters are valid.
    CAM_OK = 0,
    /// Rejected input: bad dimensions, out-of-range options, corrupt config.
    CAM_ERR_CONFIG = 2,
    /// A computation produced a non-finite value.
    CAM_ERR_NUMERIC = 3,
    /// File i/o failed or a container failed validation.
    CAM_ERR_IO = 4,
    /// A required pointer argument was null.
    CAM_ERR_NULL_ARG = 5,
    /// An internal panic was caught at the boundary.
    CAM_ERR_PANIC = 6,
}

/// How imperfect samples are fed back during generation.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum cam_injection {
    /// fed = k*eps + (1-k)*x, the same map training augments with.
    CAM_INJECTION_CONVEX = 0,
    /// fed = x + k*eps.
    CAM_INJECTION_ADDITIVE = 1,
}

/// A trained model loaded from a checkpoint file.
pub struct cam_model {
    state: TrainState,
}

/// A batch of generated or file-loaded embedding traces.
pub struct cam_traces {
    traces: Vec<GenerationTrace>,
    provenance: String,
}

/// An embedding dataset serving as the reference distribution.
pub struct cam_dataset {
    dataset: Dataset,
}

/// Options for [`cam_generate`]. Obtain defaults from
/// [`cam_generate_opts_default`] and override fields as needed.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct cam_generate_opts {
    /// Master seed; fixed seed plus fixed options gives bit-identical traces.
    pub seed: u64,
    /// Number of traces sampled in lockstep. Must be positive.
    pub num_traces: usize,
    /// Frames per trace. Must be positive.
    pub target_length: usize,
    /// Solver steps per frame for flow/diffusion heads; ignored by GMM heads.
    pub num_steps_denoise: usize,
    /// Sliding context in frames; 0 means the model's full context.
    pub context_window: usize,
    /// Noise level re-injected into fed-back samples, in [0, 1].
    pub k_inf: f64,
    /// GMM sampling temperature; ignored by flow/diffusion heads.
    pub temperature: f64,
    /// Feedback map for `k_inf`.
    pub injection: cam_injection,
}

/// Options for [`cam_fed`]. Obtain defaults from [`cam_fed_opts_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct cam_fed_opts {
    /// Frames per scored window; traces must be at least twice this long.
    pub window: usize,
    /// Windows drawn from the reference to fit the reference Gaussian.
    pub reference_windows: usize,
    /// Trace windows per bootstrap draw. Must exceed the feature
    /// dimension, which is five times the embedding dimension.
    pub background_windows: usize,
    /// Bootstrap draws averaged into each score.
    pub draws: usize,
    /// Seed for the feature projection and all window sampling.
    pub feature_seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    // Interior nuls cannot occur in our messages, but a C string must not
    // contain them, so replace defensively rather than panic.
    let msg = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul removed")));
}

fn fail(e: CamError) -> cam_status {
    let status = match e.exit_code() {
        3 => cam_status::CAM_ERR_NUMERIC,
        4 => cam_status::CAM_ERR_IO,
        _ => cam_status::CAM_ERR_CONFIG,
    };
    set_error(e.to_string());
    status
}

fn invalid(msg: String) -> cam_status {
    set_error(msg);
    cam_status::CAM_ERR_CONFIG
}

fn null_arg(what: &str) -> cam_status {
    set_error(format!("{what} must not be null"));
    cam_status::CAM_ERR_NULL_ARG
}

/// Run a fallible body, converting any panic into `CAM_ERR_PANIC` so that
/// unwinding never crosses the ABI (which would abort the process).
fn guarded(f: impl FnOnce() -> cam_status) -> cam_status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(format!("internal panic: {msg}"));
            cam_status::CAM_ERR_PANIC
        }
    }
}

/// Read a required UTF-8 path argument.
///
/// # Safety
/// `ptr` must be null or a valid nul-terminated C string.
unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, cam_status> {
    if ptr.is_null() {
        return Err(null_arg(what));
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(invalid(format!("{what} is not valid UTF-8"))),
    }
}

/// Library version as a static nul-terminated string; never null.
#[no_mangle]
pub extern "C" fn cam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on the calling thread, or null if no
/// call has failed yet. The pointer stays valid until the next failure on
/// the same thread.
#[no_mangle]
pub extern "C" fn cam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Load a model from a checkpoint file written by the `cam` trainer.
///
/// # Safety
/// `path` must be a valid nul-terminated C string; `out` must be a valid
/// pointer. On `CAM_OK`, `*out` owns the model until [`cam_model_free`].
#[no_mangle]
pub unsafe extern "C" fn cam_model_load(
    path: *const c_char,
    out: *mut *mut cam_model,
) -> cam_status {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let path = match unsafe { path_arg(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(path) {
            Ok(state) => {
                unsafe { *out = Box::into_raw(Box::new(cam_model { state })) };
                cam_status::CAM_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a model. Accepts null.
///
/// # Safety
/// `model` must be null or an unfreed pointer from [`cam_model_load`].
#[no_mangle]
pub unsafe extern "C" fn cam_model_free(model: *mut cam_model) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Embedding dimension the model consumes and produces; 0 for null.
///
/// # Safety
/// `model` must be null or a valid [`cam_model`] pointer.
#[no_mangle]
pub unsafe extern "C" fn cam_model_input_dim(model: *const cam_model) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.state.model_cfg.backbone.input_dim)
}

/// Total trainable parameters; 0 for null.
///
/// # Safety
/// `model` must be null or a valid [`cam_model`] pointer.
#[no_mangle]
pub unsafe extern "C" fn cam_model_param_count(model: *const cam_model) -> u64 {
    unsafe { model.as_ref() }.map_or(0, |m| m.state.params.param_count())
}

/// Training objective as a static string ("cam", "mar_rf", ...); null for a
/// null model.
///
/// # Safety
/// `model` must be null or a valid [`cam_model`] pointer.
#[no_mangle]
pub unsafe extern "C" fn cam_model_objective(model: *const cam_model) -> *const c_char {
    let Some(m) = (unsafe { model.as_ref() }) else {
        return ptr::null();
    };
    let name = match m.state.train_cfg.objective {
        Objective::Cam => c"cam",
        Objective::MarLinear => c"mar_linear",
        Objective::MarRf => c"mar_rf",
        Objective::Givt => c"givt",
        Objective::GivtNoise => c"givt_noise",
    };
    name.as_ptr()
}

/// Generation defaults: one trace of 128 frames, 20 solver steps, no
/// injected noise, temperature 0.9, convex feedback, full context, seed 0.
#[no_mangle]
pub extern "C" fn cam_generate_opts_default() -> cam_generate_opts {
    cam_generate_opts {
        seed: 0,
        num_traces: 1,
        target_length: 128,
        num_steps_denoise: 20,
        context_window: 0,
        k_inf: 0.0,
        temperature: 0.9,
        injection: cam_injection::CAM_INJECTION_CONVEX,
    }
}

/// Sample traces from a loaded model. Passing null options uses
/// [`cam_generate_opts_default`].
///
/// # Safety
/// `model` must be a valid [`cam_model`] pointer, `opts` null or a valid
/// pointer, and `out` a valid pointer. On `CAM_OK`, `*out` owns the traces
/// until [`cam_traces_free`].
#[no_mangle]
pub unsafe extern "C" fn cam_generate(
    model: *const cam_model,
    opts: *const cam_generate_opts,
    out: *mut *mut cam_traces,
) -> cam_status {
    guarded(|| {
        let Some(m) = (unsafe { model.as_ref() }) else {
            return null_arg("model");
        };
        if out.is_null() {
            return null_arg("out");
        }
        let o = unsafe { opts.as_ref() }
            .copied()
            .unwrap_or_else(|| cam_generate_opts_default());
        if o.num_traces == 0 || o.target_length == 0 {
            return invalid("num_traces and target_length must be positive".into());
        }
        let k_inf = match ErrorLevel::new(o.k_inf) {
            Ok(k) => k,
            Err(e) => return fail(e),
        };
        let gen = GenerationConfig {
            num_steps_denoise: o.num_steps_denoise,
            k_inf,
            temperature: o.temperature,
            target_length: o.target_length,
            context_window: if o.context_window == 0 {
                m.state.model_cfg.backbone.max_context
            } else {
                o.context_window
            },
            seed: o.seed,
            injection: match o.injection {
                cam_injection::CAM_INJECTION_CONVEX => InjectionMode::Convex,
                cam_injection::CAM_INJECTION_ADDITIVE => InjectionMode::Additive,
            },
        };
        let objective = m.state.train_cfg.objective;
        match generate_batch(&m.state.params, &m.state.model_cfg, objective, &gen, o.num_traces) {
            Ok(traces) => {
                let handle = cam_traces {
                    traces,
                    provenance: format!("generated:{objective}"),
                };
                unsafe { *out = Box::into_raw(Box::new(handle)) };
                cam_status::CAM_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Release traces. Accepts null.
///
/// # Safety
/// `traces` must be null or an unfreed pointer from [`cam_generate`] or
/// [`cam_traces_read`].
#[no_mangle]
pub unsafe extern "C" fn cam_traces_free(traces: *mut cam_traces) {
    if !traces.is_null() {
        drop(unsafe { Box::from_raw(traces) });
    }
}

/// Number of traces in the batch; 0 for null.
///
/// # Safety
/// `traces` must be null or a valid [`cam_traces`] pointer.
#[no_mangle]
pub unsafe extern "C" fn cam_traces_count(traces: *const cam_traces) -> usize {
    unsafe { traces.as_ref() }.map_or(0, |t| t.traces.len())
}

/// Embedding dimension of the traces; 0 for null or an empty batch.
///
/// # Safety
/// `traces` must be null or a valid [`cam_traces`] pointer.
#[no_mangle]
pub unsafe extern "C" fn cam_traces_dim(traces: *const cam_traces) -> usize {
    unsafe { traces.as_ref() }.map_or(0, |t| t.traces.first().map_or(0, |tr| tr.dim))
}

/// Number of frames in trace `index`; 0 for null or out of range.
///
/// # Safety
/// `traces` must be null or a valid [`cam_traces`] pointer.
#[no_mangle]
pub unsafe extern "C" fn cam_traces_length(traces: *const cam_traces, index: usize) -> usize {
    unsafe { traces.as_ref() }.map_or(0, |t| t.traces.get(index).map_or(0, |tr| tr.len()))
}

/// Borrow the frames of trace `index` as a flat row-major array of
/// `length * dim` floats. The pointer stays valid until the batch is freed.
///
/// # Safety
/// `traces` must be a valid [`cam_traces`] pointer; `out_ptr` and `out_len`
/// must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cam_traces_frames(
    traces: *const cam_traces,
    index: usize,
    out_ptr: *mut *const f32,
    out_len: *mut usize,
) -> cam_status {
    guarded(|| {
        let Some(t) = (unsafe { traces.as_ref() }) else {
            return null_arg("traces");
        };
        if out_ptr.is_null() || out_len.is_null() {
            return null_arg("out_ptr/out_len");
        }
        let Some(trace) = t.traces.get(index) else {
            return invalid(format!(
                "trace index {index} out of range ({} traces)",
                t.traces.len()
            ));
        };
        unsafe {
            *out_ptr = trace.clean.as_ptr();
            *out_len = trace.clean.len();
        }
        cam_status::CAM_OK
    })
}

/// Write the traces to an embedding container file. Round-trips bit-exactly
/// through [`cam_traces_read`].
///
/// # Safety
/// `traces` must be a valid [`cam_traces`] pointer and `path` a valid
/// nul-terminated C string.
#[no_mangle]
pub unsafe extern "C" fn cam_traces_save(
    traces: *const cam_traces,
    path: *const c_char,
) -> cam_status {
    guarded(|| {
        let Some(t) = (unsafe { traces.as_ref() }) else {
            return null_arg("traces");
        };
        let path = match unsafe { path_arg(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let Some(dim) = t.traces.first().map(|tr| tr.dim) else {
            return invalid("cannot save an empty trace batch".into());
        };
        let ds = Dataset {
            sequences: t.traces.iter().map(|tr| tr.clean.clone()).collect(),
            dim,
            norm: None,
            provenance: t.provenance.clone(),
        };
        match write_embeddings(&ds, path) {
            Ok(()) => cam_status::CAM_OK,
            Err(e) => fail(e),
        }
    })
}

/// Load an embedding container file as a trace batch, e.g. for scoring
/// previously saved generations with [`cam_fed`].
///
/// # Safety
/// `path` must be a valid nul-terminated C string; `out` must be a valid
/// pointer. On `CAM_OK`, `*out` owns the traces until [`cam_traces_free`].
#[no_mangle]
pub unsafe extern "C" fn cam_traces_read(
    path: *const c_char,
    out: *mut *mut cam_traces,
) -> cam_status {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let path = match unsafe { path_arg(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ds = match read_embeddings(path) {
            Ok(ds) => ds,
            Err(e) => return fail(e),
        };
        let traces = ds
            .sequences
            .iter()
            .enumerate()
            .map(|(i, s)| GenerationTrace {
                clean: s.clone(),
                fed_back: s.clone(),
                dim: ds.dim,
                step_micros: vec![0; s.len() / ds.dim],
                seed: 0,
                trace_index: i as u64,
            })
            .collect();
        let handle = cam_traces {
            traces,
            provenance: ds.provenance,
        };
        unsafe { *out = Box::into_raw(Box::new(handle)) };
        cam_status::CAM_OK
    })
}

/// Load an embedding container file as a reference dataset.
///
/// # Safety
/// `path` must be a valid nul-terminated C string; `out` must be a valid
/// pointer. On `CAM_OK`, `*out` owns the dataset until [`cam_dataset_free`].
#[no_mangle]
pub unsafe extern "C" fn cam_dataset_read(
    path: *const c_char,
    out: *mut *mut cam_dataset,
) -> cam_status {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let path = match unsafe { path_arg(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_embeddings(path) {
            Ok(dataset) => {
                unsafe { *out = Box::into_raw(Box::new(cam_dataset { dataset })) };
                cam_status::CAM_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a dataset. Accepts null.
///
/// # Safety
/// `dataset` must be null or an unfreed pointer from [`cam_dataset_read`].
#[no_mangle]
pub unsafe extern "C" fn cam_dataset_free(dataset: *mut cam_dataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Number of sequences in the dataset; 0 for null.
///
/// # Safety
/// `dataset` must be null or a valid [`cam_dataset`] pointer.
#[no_mangle]
pub unsafe extern "C" fn cam_dataset_count(dataset: *const cam_dataset) -> usize {
    unsafe { dataset.as_ref() }.map_or(0, |d| d.dataset.num_sequences())
}

/// Embedding dimension of the dataset; 0 for null.
///
/// # Safety
/// `dataset` must be null or a valid [`cam_dataset`] pointer.
#[no_mangle]
pub unsafe extern "C" fn cam_dataset_dim(dataset: *const cam_dataset) -> usize {
    unsafe { dataset.as_ref() }.map_or(0, |d| d.dataset.dim)
}

/// Scoring defaults for the given window size and seed: 4096 reference
/// windows, 512 background windows, 5 bootstrap draws.
#[no_mangle]
pub extern "C" fn cam_fed_opts_default(window: usize, feature_seed: u64) -> cam_fed_opts {
    let desk = FedConfig::desk(window, feature_seed);
    cam_fed_opts {
        window: desk.window,
        reference_windows: desk.reference_windows,
        background_windows: desk.background_windows,
        draws: desk.draws,
        feature_seed: desk.feature_seed,
    }
}

/// Fréchet embedding distance of the traces against a reference dataset.
/// `out_fed` scores the first `window` frames of each trace, `out_fed_acc`
/// the second, so their gap measures degradation as generation proceeds.
///
/// # Safety
/// `traces` and `reference` must be valid handle pointers, `opts` null or a
/// valid pointer (null uses `cam_fed_opts_default(16, 0)`), and `out_fed`
/// and `out_fed_acc` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cam_fed(
    traces: *const cam_traces,
    reference: *const cam_dataset,
    opts: *const cam_fed_opts,
    out_fed: *mut f64,
    out_fed_acc: *mut f64,
) -> cam_status {
    guarded(|| {
        let Some(t) = (unsafe { traces.as_ref() }) else {
            return null_arg("traces");
        };
        let Some(d) = (unsafe { reference.as_ref() }) else {
            return null_arg("reference");
        };
        if out_fed.is_null() || out_fed_acc.is_null() {
            return null_arg("out_fed/out_fed_acc");
        }
        let o = unsafe { opts.as_ref() }
            .copied()
            .unwrap_or_else(|| cam_fed_opts_default(16, 0));
        let cfg = FedConfig {
            window: o.window,
            reference_windows: o.reference_windows,
            background_windows: o.background_windows,
            draws: o.draws,
            feature_seed: o.feature_seed,
        };
        match fed_protocol(&t.traces, &d.dataset, &cfg) {
            Ok(report) => {
                unsafe {
                    *out_fed = report.fed;
                    *out_fed_acc = report.fed_acc;
                }
                cam_status::CAM_OK
            }
            Err(e) => fail(e),
        }
    })
}
