//! Per-mesh gradient fitting of target-model parameters to a bridged mesh.

use serde::{Deserialize, Serialize};

use super::{bridge, BaryMap};
use crate::bodymodel::{
    skin_backward, skin_forward, BodyTemplate, PoseState, SkinKernel, Vec3, POSE_DIM, SHAPE_OFFSET,
};
use crate::error::{shape_err, Error, Result};
use crate::numkit::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f32,
    /// Weight on the squared norm of the 63 body-pose coordinates.
    pub lambda_pose: f32,
    /// Weight on the squared norm of the shape coefficients.
    pub lambda_shape: f32,
    pub correctives: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            lambda_pose: 1e-3,
            lambda_shape: 1e-2,
            correctives: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("fit needs at least one step".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "fit lr {} must be positive",
                self.lr
            )));
        }
        if !(self.lambda_pose >= 0.0 && self.lambda_shape >= 0.0) {
            return Err(Error::Config(
                "regularizer weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Best parameters seen.
    pub pose: PoseState,
    /// Mean per-vertex Euclidean error of `pose` against the bridged target.
    pub error: f32,
    /// Best-so-far error after each evaluation; entry 0 is the initial
    /// guess, the last entry follows the final update.
    pub history: Vec<f32>,
}

/// Objective value and gradient at one pose:
/// `Σ_v ‖V(Θ)_v − T_v‖² + λ_pose‖body‖² + λ_shape‖β‖²`.
#[derive(Clone, Debug)]
pub struct FitEval {
    pub loss: f32,
    /// Mean per-vertex Euclidean error (the reported metric).
    pub error: f32,
    pub grad: [f32; POSE_DIM],
}

/// Standard dense LBS as a reference fitter would run it.
const FIT_KERNEL: SkinKernel = SkinKernel::Dense;

pub fn fit_objective(
    template: &BodyTemplate,
    targets: &[Vec3],
    pose: &PoseState,
    cfg: &FitConfig,
) -> Result<FitEval> {
    let n = template.num_vertices();
    if targets.len() != n {
        return Err(shape_err!(
            "{} fit targets for {n} template vertices",
            targets.len()
        ));
    }
    let fwd = skin_forward(template, pose, cfg.correctives, FIT_KERNEL)?;
    let inv = 1.0 / n as f32;
    let mut sq = 0.0f32;
    let mut dist = 0.0f32;
    let mut dv = vec![[0.0f32; 3]; n];
    for ((v, t), d) in fwd.vertices.iter().zip(targets).zip(&mut dv) {
        let e = [v[0] - t[0], v[1] - t[1], v[2] - t[2]];
        let s = e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
        sq += s;
        dist += s.sqrt();
        *d = e.map(|x| 2.0 * x);
    }
    let mut grad = skin_backward(template, pose, &fwd, &dv, None, cfg.correctives)?;
    let p = pose.as_slice();
    let mut reg = 0.0f32;
    for i in 3..SHAPE_OFFSET {
        reg += cfg.lambda_pose * p[i] * p[i];
        grad[i] += 2.0 * cfg.lambda_pose * p[i];
    }
    for i in SHAPE_OFFSET..POSE_DIM {
        reg += cfg.lambda_shape * p[i] * p[i];
        grad[i] += 2.0 * cfg.lambda_shape * p[i];
    }
    Ok(FitEval {
        loss: sq + reg,
        error: dist * inv,
        grad,
    })
}

/// Fits `target` parameters to the bridged source mesh with Adam, keeping
/// the best parameters seen by vertex error.
pub fn iterative_fit(
    v_mhr: &[Vec3],
    map: &BaryMap,
    target: &BodyTemplate,
    cfg: &FitConfig,
    init: &PoseState,
) -> Result<FitResult> {
    cfg.validate()?;
    if v_mhr.len() != map.source_vertices() {
        return Err(shape_err!(
            "{} source vertices, map expects {}",
            v_mhr.len(),
            map.source_vertices()
        ));
    }
    let targets = bridge(v_mhr, map)?;
    fit_bridged(&targets, target, cfg, init)
}

/// [`iterative_fit`] against an already-bridged target mesh.
pub fn fit_bridged(
    targets: &[Vec3],
    template: &BodyTemplate,
    cfg: &FitConfig,
    init: &PoseState,
) -> Result<FitResult> {
    cfg.validate()?;
    let mut pose = *init;
    let mut adam = Adam::new(POSE_DIM);
    let mut best = (f32::INFINITY, pose);
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let ev = fit_objective(template, targets, &pose, cfg)?;
        if !ev.loss.is_finite() || !ev.grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric(format!(
                "fit objective non-finite at step {step} (loss {}, best error so far {})",
                ev.loss, best.0
            )));
        }
        if ev.error < best.0 {
            best = (ev.error, pose);
        }
        history.push(best.0);
        if step < cfg.steps {
            adam.step(pose.as_mut_slice(), &ev.grad, cfg.lr);
        }
    }
    Ok(FitResult {
        pose: best.1,
        error: best.0,
        history,
    })
}

/// Mean per-vertex Euclidean distance.
pub fn mean_vertex_error(a: &[Vec3], b: &[Vec3]) -> Result<f32> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err!(
            "comparing {} vertices with {}",
            a.len(),
            b.len()
        ));
    }
    let s: f32 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum();
    Ok(s / a.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{make_toy_models, skin, PoseSampler, ToySizes};

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        let c = FitConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(serde_json::from_str::<FitConfig>(r#"{"stepz": 3}"#).is_err());
        let c: FitConfig = serde_json::from_str(r#"{"steps": 3}"#).unwrap();
        assert_eq!(c.steps, 3);
        assert_eq!(c.lr, 0.05);
    }

    #[test]
    fn best_so_far_is_monotone_and_recovers() {
        let toy = make_toy_models(1, ToySizes::default()).unwrap();
        let gt = PoseSampler::new(4).sample();
        let v = skin(&toy.mhr, &gt, true, SkinKernel::Sparse).unwrap();
        let r = iterative_fit(
            &v,
            &toy.ground_truth,
            &toy.smpl,
            &FitConfig::default(),
            &PoseState::zeros(),
        )
        .unwrap();
        assert_eq!(r.history.len(), 301);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*r.history.last().unwrap(), r.error);
        assert!(r.error < 1e-2, "fit error {}", r.error);
    }

    #[test]
    fn starting_at_truth_is_at_floor() {
        let toy = make_toy_models(1, ToySizes::default()).unwrap();
        let gt = PoseSampler::new(5).sample();
        let v = skin(&toy.mhr, &gt, true, SkinKernel::Sparse).unwrap();
        let cfg = FitConfig {
            steps: 20,
            ..Default::default()
        };
        let r = iterative_fit(&v, &toy.ground_truth, &toy.smpl, &cfg, &gt).unwrap();
        let floor = mean_vertex_error(
            &skin(&toy.smpl, &gt, true, SkinKernel::Sparse).unwrap(),
            &bridge(&v, &toy.ground_truth).unwrap(),
        )
        .unwrap();
        assert_eq!(r.history[0], floor);
        assert!(r.error <= floor);
    }

    #[test]
    fn non_finite_aborts() {
        let toy = make_toy_models(1, ToySizes::default()).unwrap();
        let mut v = toy.mhr.vertices_rest().to_vec();
        v[0][0] = f32::NAN;
        let err = iterative_fit(
            &v,
            &toy.ground_truth,
            &toy.smpl,
            &FitConfig::default(),
            &PoseState::zeros(),
        )
        .unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }
}
