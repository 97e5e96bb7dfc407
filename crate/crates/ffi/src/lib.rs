//! C ABI over `fsb-core`: a pipeline engine handle and a projector handle.
//!
//! Every fallible call returns an [`FsbStatus`]. On failure the message is
//! kept per thread and read back with [`fsb_last_error`]. Handles are owned
//! by the caller and released with their `_free` function; a handle must
//! not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fsb_core::bodymodel::{Vec3, POSE_DIM};
use fsb_core::cli::{Models, RunConfig};
use fsb_core::pipeline::{Engine, Frame, PipelineConfig};
use fsb_core::priors::Scene;
use fsb_core::projection::{project_forward_with, BaryMap, ProjectorScratch, ProjectorWeights};
use fsb_core::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsbStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numeric = 3,
    Shape = 4,
    Io = 5,
    Format = 6,
    Usage = 7,
    Panic = 8,
}

/// Pathway selector for [`fsb_engine_new`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsbMode {
    Serial = 0,
    Fast = 1,
}

/// Pipeline engine with its own models and buffers.
pub struct FsbEngine {
    engine: Engine,
    models: Models,
}

/// Trained projector bound to a barycentric map.
pub struct FsbProjector {
    weights: ProjectorWeights,
    map: BaryMap,
    scratch: ProjectorScratch,
    vertices: Vec<Vec3>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FsbStatus {
    match e {
        Error::Config(_) | Error::Json { .. } => FsbStatus::Config,
        Error::Numeric(_) | Error::Diverged(_) => FsbStatus::Numeric,
        Error::Shape(_) | Error::Projection(_) => FsbStatus::Shape,
        Error::Io { .. } => FsbStatus::Io,
        Error::Format(_) => FsbStatus::Format,
        Error::Usage(_) => FsbStatus::Usage,
    }
}

/// Runs `f`, recording any error or panic for [`fsb_last_error`].
fn guard(f: impl FnOnce() -> Result<(), FsbError>) -> FsbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsbStatus::Ok,
        Ok(Err(FsbError::Null(what))) => {
            set_error(format!("{what} is null"));
            FsbStatus::NullPointer
        }
        Ok(Err(FsbError::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FsbStatus::Panic
        }
    }
}

enum FsbError {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for FsbError {
    fn from(e: Error) -> Self {
        FsbError::Core(e)
    }
}

unsafe fn opt_str<'a>(p: *const c_char) -> Result<Option<&'a str>, FsbError> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| Error::Usage("string argument is not UTF-8".into()).into())
}

unsafe fn req_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, FsbError> {
    opt_str(p)?.ok_or(FsbError::Null(what))
}

unsafe fn config_from(json: *const c_char) -> Result<RunConfig, FsbError> {
    Ok(match opt_str(json)? {
        Some(text) => RunConfig::from_json(text)?,
        None => RunConfig::default(),
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fsb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of floats in a parameter vector.
#[no_mangle]
pub extern "C" fn fsb_pose_dim() -> usize {
    POSE_DIM
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fsb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds models from `config_json` (null for defaults) and an engine for
/// `mode`. Serial mode ignores the config's pipeline section.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be a
/// valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn fsb_engine_new(
    config_json: *const c_char,
    mode: FsbMode,
    out: *mut *mut FsbEngine,
) -> FsbStatus {
    guard(|| {
        if out.is_null() {
            return Err(FsbError::Null("out"));
        }
        let mut cfg = config_from(config_json)?;
        if mode == FsbMode::Serial {
            cfg.pipeline = PipelineConfig::serial();
        }
        let models = Models::build(&cfg)?;
        let engine = Engine::new(&models.decoder()?, cfg.pipeline)?;
        *out = Box::into_raw(Box::new(FsbEngine { engine, models }));
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle from [`fsb_engine_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fsb_engine_free(engine: *mut FsbEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

unsafe fn run_frame(
    e: *mut FsbEngine,
    scene: impl FnOnce() -> Result<Scene, FsbError>,
    seed: u64,
    params: *mut f32,
    camera: *mut f32,
    total_ms: *mut f64,
) -> Result<(), FsbError> {
    let e = e.as_mut().ok_or(FsbError::Null("engine"))?;
    if params.is_null() {
        return Err(FsbError::Null("params"));
    }
    let scene = scene()?;
    let frame = Frame::from_scene(&scene, &e.models.mhr, seed)?;
    let o = e.engine.run(&frame)?;
    ptr::copy_nonoverlapping(o.params.as_slice().as_ptr(), params, POSE_DIM);
    if !camera.is_null() {
        ptr::copy_nonoverlapping(o.camera.as_ptr(), camera, 3);
    }
    if !total_ms.is_null() {
        *total_ms = o.timing.total_ms;
    }
    Ok(())
}

/// Runs one frame of the synthetic scene `scene_seed`. Writes
/// [`fsb_pose_dim`] floats to `params`; `camera` (3 floats) and `total_ms`
/// may be null.
///
/// # Safety
/// `engine` must be a live handle; the output pointers must be null (where
/// allowed) or point to enough writable storage.
#[no_mangle]
pub unsafe extern "C" fn fsb_engine_run_synthetic(
    engine: *mut FsbEngine,
    scene_seed: u64,
    params: *mut f32,
    camera: *mut f32,
    total_ms: *mut f64,
) -> FsbStatus {
    guard(|| {
        run_frame(
            engine,
            || Ok(Scene::synthetic(scene_seed)),
            scene_seed,
            params,
            camera,
            total_ms,
        )
    })
}

/// Like [`fsb_engine_run_synthetic`] for a scene given as JSON text;
/// `seed` drives the detector stub's keypoint noise.
///
/// # Safety
/// As for [`fsb_engine_run_synthetic`]; `scene_json` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fsb_engine_run_scene(
    engine: *mut FsbEngine,
    scene_json: *const c_char,
    seed: u64,
    params: *mut f32,
    camera: *mut f32,
    total_ms: *mut f64,
) -> FsbStatus {
    guard(|| {
        let text = req_str(scene_json, "scene_json")?;
        let scene = move || {
            let s: Scene = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            s.validate()?;
            Ok(s)
        };
        run_frame(engine, scene, seed, params, camera, total_ms)
    })
}

/// Loads projector weights from `weights_json` and the source-to-target
/// map from `bary_json`; when `bary_json` is null the map comes from
/// models built with `config_json` (null for defaults).
///
/// # Safety
/// String arguments must be null (where allowed) or NUL-terminated; `out`
/// must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn fsb_projector_load(
    weights_json: *const c_char,
    bary_json: *const c_char,
    config_json: *const c_char,
    out: *mut *mut FsbProjector,
) -> FsbStatus {
    guard(|| {
        if out.is_null() {
            return Err(FsbError::Null("out"));
        }
        let weights = ProjectorWeights::load(Path::new(req_str(weights_json, "weights_json")?))?;
        let cfg = config_from(config_json)?;
        let models = Models::build(&cfg)?;
        let map = match opt_str(bary_json)? {
            Some(p) => BaryMap::load(Path::new(p), &models.mhr)?,
            None => models.bary,
        };
        *out = Box::into_raw(Box::new(FsbProjector {
            weights,
            map,
            scratch: ProjectorScratch::default(),
            vertices: Vec::new(),
        }));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from [`fsb_projector_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fsb_projector_free(p: *mut FsbProjector) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Source vertex count the projector expects, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fsb_projector_source_vertices(p: *const FsbProjector) -> usize {
    p.as_ref().map_or(0, |p| p.map.source_vertices())
}

/// Converts one source mesh (`num_vertices × 3` floats, row-major) into
/// [`fsb_pose_dim`] target parameters.
///
/// # Safety
/// `p` must be a live handle, `vertices` must hold `3 * num_vertices`
/// readable floats and `params` must have room for the output.
#[no_mangle]
pub unsafe extern "C" fn fsb_projector_forward(
    p: *mut FsbProjector,
    vertices: *const f32,
    num_vertices: usize,
    params: *mut f32,
) -> FsbStatus {
    guard(|| {
        let p = p.as_mut().ok_or(FsbError::Null("projector"))?;
        if vertices.is_null() {
            return Err(FsbError::Null("vertices"));
        }
        if params.is_null() {
            return Err(FsbError::Null("params"));
        }
        let flat = std::slice::from_raw_parts(vertices, num_vertices * 3);
        p.vertices.clear();
        p.vertices
            .extend(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]));
        let out = project_forward_with(&p.vertices, &p.map, &p.weights, &mut p.scratch)?;
        ptr::copy_nonoverlapping(out.as_slice().as_ptr(), params, POSE_DIM);
        Ok(())
    })
}
