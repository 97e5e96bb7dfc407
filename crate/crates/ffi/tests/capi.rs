use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fsb_core::bodymodel::{skin, PoseSampler, SkinKernel, POSE_DIM};
use fsb_core::cli::{Models, RunConfig};
use fsb_core::pipeline::{Engine, Frame, PipelineConfig};
use fsb_core::priors::Scene;
use fsb_core::projection::{project_forward, ProjectorWeights};
use fsb_ffi::*;

fn last_error() -> String {
    let p = fsb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn engine(mode: FsbMode) -> *mut FsbEngine {
    let mut e = ptr::null_mut();
    assert_eq!(
        unsafe { fsb_engine_new(ptr::null(), mode, &mut e) },
        FsbStatus::Ok
    );
    assert!(!e.is_null());
    e
}

#[test]
fn version_and_dims() {
    let v = unsafe { CStr::from_ptr(fsb_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert_eq!(fsb_pose_dim(), POSE_DIM);
}

#[test]
fn engine_matches_core() {
    let e = engine(FsbMode::Fast);
    let mut params = [0.0f32; POSE_DIM];
    let mut cam = [0.0f32; 3];
    let mut ms = 0.0f64;
    let st =
        unsafe { fsb_engine_run_synthetic(e, 5, params.as_mut_ptr(), cam.as_mut_ptr(), &mut ms) };
    assert_eq!(st, FsbStatus::Ok);
    assert!(ms > 0.0);

    let cfg = RunConfig::default();
    let models = Models::build(&cfg).unwrap();
    let mut core = Engine::new(&models.decoder().unwrap(), PipelineConfig::fast()).unwrap();
    let out = core
        .run(&Frame::synthetic(5, &models.mhr).unwrap())
        .unwrap();
    assert_eq!(params.as_slice(), out.params.as_slice());
    assert_eq!(cam, out.camera);

    // Same scene through the JSON entry point.
    let json = CString::new(serde_json::to_string(&Scene::synthetic(5)).unwrap()).unwrap();
    let mut again = [0.0f32; POSE_DIM];
    let st = unsafe {
        fsb_engine_run_scene(
            e,
            json.as_ptr(),
            5,
            again.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, FsbStatus::Ok);
    assert_eq!(again, params);
    unsafe { fsb_engine_free(e) };
}

#[test]
fn serial_engine_runs() {
    let e = engine(FsbMode::Serial);
    let mut params = [f32::NAN; POSE_DIM];
    let st = unsafe {
        fsb_engine_run_synthetic(e, 1, params.as_mut_ptr(), ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(st, FsbStatus::Ok);
    assert!(params.iter().all(|v| v.is_finite()));
    unsafe { fsb_engine_free(e) };
}

#[test]
fn errors_are_reported() {
    let mut params = [0.0f32; POSE_DIM];
    let st = unsafe {
        fsb_engine_run_synthetic(
            ptr::null_mut(),
            0,
            params.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, FsbStatus::NullPointer);
    assert!(last_error().contains("engine"));

    let bad = CString::new(r#"{"pipeline": {"alpah": 1.0}}"#).unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(
        unsafe { fsb_engine_new(bad.as_ptr(), FsbMode::Fast, &mut e) },
        FsbStatus::Config
    );
    assert!(e.is_null());
    assert!(last_error().contains("alpah"));

    assert_eq!(
        unsafe { fsb_engine_new(ptr::null(), FsbMode::Fast, ptr::null_mut()) },
        FsbStatus::NullPointer
    );

    let e = engine(FsbMode::Fast);
    let scene = CString::new(r#"{"image_width": 1}"#).unwrap();
    let st = unsafe {
        fsb_engine_run_scene(
            e,
            scene.as_ptr(),
            0,
            params.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, FsbStatus::Config);
    unsafe { fsb_engine_free(e) };
    unsafe { fsb_engine_free(ptr::null_mut()) };
    unsafe { fsb_projector_free(ptr::null_mut()) };
}

fn saved_projector(dir: &Path) -> (CString, ProjectorWeights, Models) {
    let models = Models::build(&RunConfig::default()).unwrap();
    let w = ProjectorWeights::init(Default::default(), models.smpl.num_vertices(), 3).unwrap();
    let p = dir.join("projector.json");
    w.save(&p).unwrap();
    (CString::new(p.to_str().unwrap()).unwrap(), w, models)
}

#[test]
fn projector_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let (path, w, models) = saved_projector(dir.path());
    let mut p = ptr::null_mut();
    assert_eq!(
        unsafe { fsb_projector_load(path.as_ptr(), ptr::null(), ptr::null(), &mut p) },
        FsbStatus::Ok
    );
    assert_eq!(
        unsafe { fsb_projector_source_vertices(p) },
        models.mhr.num_vertices()
    );

    let pose = PoseSampler::new(9).sample();
    let mesh = skin(&models.mhr, &pose, true, SkinKernel::Sparse).unwrap();
    let flat: Vec<f32> = mesh.iter().flatten().copied().collect();
    let mut params = [0.0f32; POSE_DIM];
    let st = unsafe { fsb_projector_forward(p, flat.as_ptr(), mesh.len(), params.as_mut_ptr()) };
    assert_eq!(st, FsbStatus::Ok);
    let want = project_forward(&mesh, &models.bary, &w).unwrap();
    assert_eq!(params.as_slice(), want.as_slice());

    let st =
        unsafe { fsb_projector_forward(p, flat.as_ptr(), mesh.len() - 1, params.as_mut_ptr()) };
    assert_eq!(st, FsbStatus::Shape);
    assert!(!last_error().is_empty());
    unsafe { fsb_projector_free(p) };
}

#[test]
fn projector_load_errors() {
    let missing = CString::new("/nonexistent/projector.json").unwrap();
    let mut p = ptr::null_mut();
    let st = unsafe { fsb_projector_load(missing.as_ptr(), ptr::null(), ptr::null(), &mut p) };
    assert_eq!(st, FsbStatus::Io);
    assert!(p.is_null());
    assert!(last_error().contains("/nonexistent/projector.json"));
    let st = unsafe { fsb_projector_load(ptr::null(), ptr::null(), ptr::null(), &mut p) };
    assert_eq!(st, FsbStatus::NullPointer);
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fsb.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for f in [
        "fsb_version",
        "fsb_pose_dim",
        "fsb_last_error",
        "fsb_engine_new",
        "fsb_engine_free",
        "fsb_engine_run_synthetic",
        "fsb_engine_run_scene",
        "fsb_projector_load",
        "fsb_projector_free",
        "fsb_projector_source_vertices",
        "fsb_projector_forward",
        "typedef struct FsbEngine FsbEngine",
        "typedef struct FsbProjector FsbProjector",
        "FSB_STATUS_OK = 0",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
}

/// Compiles and runs a small C client against the shared library.
#[test]
fn c_client_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().and_then(Path::parent).unwrap().to_path_buf();
    if !lib_dir.join("libfsb_ffi.so").exists() {
        eprintln!("no shared library in {}; skipping", lib_dir.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <math.h>
#include "fsb.h"
int main(void) {
    FsbEngine *e = NULL;
    if (fsb_engine_new(NULL, FSB_MODE_FAST, &e) != FSB_STATUS_OK) return 10;
    float params[128];
    float cam[3];
    if (fsb_pose_dim() > 128) return 11;
    if (fsb_engine_run_synthetic(e, 3, params, cam, NULL) != FSB_STATUS_OK) return 12;
    for (size_t i = 0; i < fsb_pose_dim(); ++i) if (!isfinite(params[i])) return 13;
    if (fsb_engine_run_synthetic(NULL, 3, params, cam, NULL) != FSB_STATUS_NULL_POINTER) return 14;
    if (fsb_last_error() == NULL) return 15;
    fsb_engine_free(e);
    printf("%s\n", fsb_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("client");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg("-L")
        .arg(&lib_dir)
        .args(["-lfsb_ffi", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C client failed to compile");
    let out = Command::new(&bin)
        .env("LD_LIBRARY_PATH", &lib_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "C client exited with {:?}",
        out.status.code()
    );
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        env!("CARGO_PKG_VERSION")
    );
}

fn which_cc() -> Result<PathBuf, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc)
            .arg("--version")
            .output()
            .is_ok_and(|o| o.status.success())
        {
            return Ok(PathBuf::from(cc));
        }
    }
    Err(())
}
