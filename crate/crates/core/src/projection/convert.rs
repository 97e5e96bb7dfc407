//! Wall-time and accuracy comparison of the two conversion paths.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::fit::{fit_bridged, mean_vertex_error, FitConfig};
use super::projector::{project_forward_with, ProjectorScratch, ProjectorWeights};
use super::{bridge, BaryMap};
use crate::bodymodel::{skin, BodyTemplate, PoseState, SkinKernel, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionReport {
    pub meshes: usize,
    pub fit_steps: usize,
    /// Mean wall time of one full iterative fit.
    pub fit_ms: f64,
    /// Mean wall time of one projector forward pass, bridge included.
    pub project_ms: f64,
    pub speedup: f64,
    pub fit_error: f32,
    pub projector_error: f32,
    /// Projector error over fit error.
    pub error_ratio: f32,
}

/// Timed passes of the projector per mesh; one pass is too short to time.
const PROJECT_REPEATS: usize = 50;

/// Runs both conversion paths on every mesh, single-threaded.
pub fn bench_conversion(
    meshes: &[Vec<Vec3>],
    map: &BaryMap,
    target: &BodyTemplate,
    fit_cfg: &FitConfig,
    projector: &ProjectorWeights,
) -> Result<ConversionReport> {
    fit_cfg.validate()?;
    if meshes.is_empty() {
        return Err(Error::Usage("no meshes to convert".into()));
    }
    let targets = meshes
        .iter()
        .map(|m| bridge(m, map))
        .collect::<Result<Vec<_>>>()?;
    let mut fit_s = 0.0;
    let mut fit_err = 0.0f32;
    for t in &targets {
        let start = Instant::now();
        let r = fit_bridged(t, target, fit_cfg, &PoseState::zeros())?;
        fit_s += start.elapsed().as_secs_f64();
        fit_err += r.error;
    }
    let mut scratch = ProjectorScratch::default();
    let mut preds = Vec::with_capacity(meshes.len());
    for m in meshes {
        preds.push(project_forward_with(m, map, projector, &mut scratch)?);
    }
    let start = Instant::now();
    for _ in 0..PROJECT_REPEATS {
        for m in meshes {
            std::hint::black_box(project_forward_with(
                std::hint::black_box(m),
                map,
                projector,
                &mut scratch,
            )?);
        }
    }
    let proj_s = start.elapsed().as_secs_f64() / PROJECT_REPEATS as f64;
    let mut proj_err = 0.0f32;
    for (p, t) in preds.iter().zip(&targets) {
        proj_err += mean_vertex_error(&skin(target, p, true, SkinKernel::Sparse)?, t)?;
    }
    let n = meshes.len();
    let (fit_error, projector_error) = (fit_err / n as f32, proj_err / n as f32);
    Ok(ConversionReport {
        meshes: n,
        fit_steps: fit_cfg.steps,
        fit_ms: 1e3 * fit_s / n as f64,
        project_ms: 1e3 * proj_s / n as f64,
        speedup: fit_s / proj_s.max(f64::MIN_POSITIVE),
        fit_error,
        projector_error,
        error_ratio: projector_error / fit_error.max(f32::MIN_POSITIVE),
    })
}
